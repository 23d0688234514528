use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use catvil::config::TrainConfig;
use catvil::corruption::registry_table;
use catvil::data::{generate_dataset, read_dataset, write_dataset, SceneOptions};
use catvil::experiments::{load_or_generate, run_depth_ablation, run_fusion_ablation, run_robustness, DEPTH_SWEEP, TEST_SEED_OFFSET};
use catvil::fusion::FusionStrategy;
use catvil::model::CatVil;
use catvil::train::{evaluate, train_new};

#[derive(Parser)]
#[command(name = "catvil", about = "Visual question localized-answering with gated co-attention fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/ and test/ datasets.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        train_n: usize,
        #[arg(long, default_value_t = 128)]
        test_n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train a model and write checkpoint, report.json and a report table.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Train and evaluate every fusion strategy under the same budget.
    AblateFusion {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the configured strategy at several co-attention depths.
    AblateDepth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under every corruption at every severity.
    RobustEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the corruption registry with per-severity parameters.
    ListCorruptions,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_outputs(out: Option<&Path>, stem: &str, table: &str, json: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_file(&dir.join(format!("{stem}.txt")), table)?;
        write_file(&dir.join(format!("{stem}.json")), json)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            out,
            train_n,
            test_n,
            seed,
            image_size,
        } => {
            let opts = SceneOptions { image_size };
            let train = generate_dataset(train_n, seed, &opts);
            let test = generate_dataset(test_n, seed.wrapping_add(TEST_SEED_OFFSET), &opts);
            write_dataset(&train, &out.join("train"))?;
            write_dataset(&test, &out.join("test"))?;
            println!("wrote {train_n} train and {test_n} test samples to {}", out.display());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let (train, test) = load_or_generate(&cfg)?;
            let (model, report) = train_new(&train, Some(&test), &cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            model.save(&out.join("model.ckpt"))?;
            write_file(&out.join("config.txt"), &cfg.to_text())?;
            write_file(&out.join("report.json"), &report.to_json()?)?;
            let table = report.to_table();
            write_file(&out.join("report.txt"), &table)?;
            print!("{table}");
        }
        Command::Eval { ckpt, data, json } => {
            let model = CatVil::load(&ckpt)?;
            let samples = read_dataset(&data)?;
            let report = evaluate(&model, &samples)?;
            if json {
                println!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_kv_text());
            }
        }
        Command::AblateFusion { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let (train, test) = load_or_generate(&cfg)?;
            let table = run_fusion_ablation(&cfg, &FusionStrategy::ALL, &train, &test);
            let text = table.to_table();
            write_outputs(out.as_deref(), "fusion_ablation", &text, &table.to_json()?)?;
            print!("{text}");
        }
        Command::AblateDepth { config, depths, out } => {
            let cfg = TrainConfig::load(&config)?;
            let (train, test) = load_or_generate(&cfg)?;
            let depths = depths.unwrap_or_else(|| DEPTH_SWEEP.to_vec());
            let table = run_depth_ablation(&cfg, &depths, &train, &test);
            let text = table.to_table();
            write_outputs(out.as_deref(), "depth_ablation", &text, &table.to_json()?)?;
            print!("{text}");
        }
        Command::RobustEval { ckpt, data, seed, out } => {
            let model = CatVil::load(&ckpt)?;
            let samples = read_dataset(&data)?;
            let report = run_robustness(&model, &samples, seed)?;
            let text = report.to_table();
            write_outputs(out.as_deref(), "robustness", &text, &report.to_json()?)?;
            print!("{text}");
        }
        Command::ListCorruptions => print!("{}", registry_table()),
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
