//! Experiment runners: dataset loading, fusion-strategy and co-attention
//! depth ablations, and the corruption robustness sweep.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corruption::{corrupt_all, CorruptionKind, NUM_SEVERITIES};
use crate::data::{generate_dataset, read_dataset, SceneOptions, VqlaSample};
use crate::error::Result;
use crate::fusion::FusionStrategy;
use crate::metrics::MetricsReport;
use crate::model::CatVil;
use crate::train::{evaluate, train_new};

/// Seed offset separating generated test data from training data.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

/// Reads the configured dataset directories, or generates the configured
/// number of samples in memory when a directory is not given.
pub fn load_or_generate(cfg: &TrainConfig) -> Result<(Vec<VqlaSample>, Vec<VqlaSample>)> {
    let opts = SceneOptions {
        image_size: cfg.model.image_size,
    };
    let train = match &cfg.train_dir {
        Some(dir) => read_dataset(dir)?,
        None => generate_dataset(cfg.train_n, cfg.data_seed, &opts),
    };
    let test = match &cfg.test_dir {
        Some(dir) => read_dataset(dir)?,
        None => generate_dataset(cfg.test_n, cfg.data_seed.wrapping_add(TEST_SEED_OFFSET), &opts),
    };
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub macro_f: f64,
    pub miou: f64,
}

impl From<&MetricsReport> for MetricSummary {
    fn from(m: &MetricsReport) -> Self {
        MetricSummary {
            accuracy: m.accuracy,
            macro_f: m.macro_f,
            miou: m.miou,
        }
    }
}

impl MetricSummary {
    pub fn mean(items: &[MetricSummary]) -> MetricSummary {
        let n = items.len().max(1) as f64;
        MetricSummary {
            accuracy: items.iter().map(|m| m.accuracy).sum::<f64>() / n,
            macro_f: items.iter().map(|m| m.macro_f).sum::<f64>() / n,
            miou: items.iter().map(|m| m.miou).sum::<f64>() / n,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.accuracy.is_finite() && self.macro_f.is_finite() && self.miou.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub strategy: FusionStrategy,
    pub depth: usize,
    pub seeds: Vec<u64>,
    pub metrics: Option<MetricSummary>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Columns: method, Acc, F-Score, mIoU.
    pub fn to_table(&self) -> String {
        let mut out = format!("{}\n{:<20} {:>8} {:>8} {:>8}\n", self.title, "Method", "Acc", "F-Score", "mIoU");
        for r in &self.rows {
            match (&r.metrics, &r.error) {
                (Some(m), _) => out.push_str(&format!(
                    "{:<20} {:>8.4} {:>8.4} {:>8.4}\n",
                    r.label, m.accuracy, m.macro_f, m.miou
                )),
                (None, e) => out.push_str(&format!(
                    "{:<20} failed: {}\n",
                    r.label,
                    e.as_deref().unwrap_or("unknown error")
                )),
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn run_row(
    label: String,
    cfg: &TrainConfig,
    train: &[VqlaSample],
    test: &[VqlaSample],
) -> AblationRow {
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let result = seeds
        .iter()
        .map(|&seed| {
            let run_cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let (model, _) = train_new(train, None, &run_cfg)?;
            evaluate(&model, test).map(|m| MetricSummary::from(&m))
        })
        .collect::<Result<Vec<_>>>();
    let (metrics, error) = match result {
        Ok(ms) => (Some(MetricSummary::mean(&ms)), None),
        Err(e) => (None, Some(e.to_string())),
    };
    AblationRow {
        label,
        strategy: cfg.model.strategy,
        depth: cfg.model.coattn_depth,
        seeds,
        metrics,
        error,
    }
}

/// Trains and evaluates each strategy with the same budget and seeds. A
/// failing strategy is recorded in its row and the sweep continues.
pub fn run_fusion_ablation(
    base: &TrainConfig,
    strategies: &[FusionStrategy],
    train: &[VqlaSample],
    test: &[VqlaSample],
) -> AblationTable {
    let rows = strategies
        .iter()
        .map(|&s| {
            let mut cfg = base.clone();
            cfg.model.strategy = s;
            run_row(s.to_string(), &cfg, train, test)
        })
        .collect();
    AblationTable {
        title: "Fusion strategy ablation".into(),
        rows,
    }
}

pub const DEPTH_SWEEP: [usize; 5] = [2, 4, 6, 8, 10];

/// Same as the fusion ablation with the co-attention depth varied.
pub fn run_depth_ablation(
    base: &TrainConfig,
    depths: &[usize],
    train: &[VqlaSample],
    test: &[VqlaSample],
) -> AblationTable {
    let rows = depths
        .iter()
        .map(|&d| {
            let mut cfg = base.clone();
            cfg.model.coattn_depth = d;
            run_row(format!("{} x{d}", cfg.model.strategy), &cfg, train, test)
        })
        .collect();
    AblationTable {
        title: "Co-attention depth ablation".into(),
        rows,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindResult {
    pub kind: CorruptionKind,
    pub metrics: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    pub severity: usize,
    /// Mean over corruption kinds (the clean evaluation at severity 0).
    pub metrics: MetricSummary,
    pub per_kind: Vec<KindResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub seed: u64,
    pub samples: usize,
    pub rows: Vec<SeverityRow>,
}

impl RobustnessReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<9} {:>8} {:>8} {:>8}\n", "Severity", "Acc", "F-Score", "mIoU");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<9} {:>8.4} {:>8.4} {:>8.4}\n",
                r.severity, r.metrics.accuracy, r.metrics.macro_f, r.metrics.miou
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluates `model` on clean data (severity 0) and, for each severity
/// 1–5, on the test set corrupted by every registered kind; each severity
/// row averages the per-kind metrics.
pub fn run_robustness(model: &CatVil, test: &[VqlaSample], seed: u64) -> Result<RobustnessReport> {
    let clean = MetricSummary::from(&evaluate(model, test)?);
    let mut rows = vec![SeverityRow {
        severity: 0,
        metrics: clean,
        per_kind: Vec::new(),
    }];
    let images: Vec<_> = test.iter().map(|s| &s.image).collect();
    for severity in 1..=NUM_SEVERITIES {
        let mut per_kind = Vec::with_capacity(CorruptionKind::ALL.len());
        for kind in CorruptionKind::ALL {
            let corrupted = corrupt_all(&images, kind, severity, seed)?;
            let samples: Vec<VqlaSample> = test
                .iter()
                .zip(corrupted)
                .map(|(s, image)| VqlaSample {
                    image,
                    ..s.clone()
                })
                .collect();
            per_kind.push(KindResult {
                kind,
                metrics: MetricSummary::from(&evaluate(model, &samples)?),
            });
        }
        let ms: Vec<MetricSummary> = per_kind.iter().map(|k| k.metrics).collect();
        rows.push(SeverityRow {
            severity,
            metrics: MetricSummary::mean(&ms),
            per_kind,
        });
    }
    Ok(RobustnessReport {
        seed,
        samples: test.len(),
        rows,
    })
}
