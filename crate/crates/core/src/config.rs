//! Run configuration in a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. A `preset` key
//! (`desk` or `full`) is applied first, whatever its position; every other
//! key then overrides a single field.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionStrategy, GateKind};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::visual::EncoderKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Number of consecutive seeds averaged by the ablation runners.
    pub seeds: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub loss_weights: LossWeights,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// In-memory dataset sizes used when no directories are given.
    pub train_n: usize,
    pub test_n: usize,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 20,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            seeds: 1,
            max_steps: None,
            loss_weights: LossWeights::default(),
            train_dir: None,
            test_dir: None,
            out_dir: None,
            train_n: 512,
            test_n: 128,
            data_seed: 1,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 80 epochs, batch 64, lr 1e-5, six co-attention
    /// layers.
    pub fn full_scale() -> Self {
        let mut cfg = TrainConfig {
            epochs: 80,
            batch_size: 64,
            lr: 1e-5,
            ..TrainConfig::default()
        };
        cfg.model.coattn_depth = 6;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::default()),
            "full" => Ok(TrainConfig::full_scale()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            entries.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match entries.iter().find(|(_, k, _)| k == "preset") {
            Some((_, _, v)) => TrainConfig::preset(v)?,
            None => TrainConfig::default(),
        };
        for (lineno, k, v) in &entries {
            if k != "preset" {
                cfg.set(k, v).map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        let m = &mut self.model;
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "seeds" => self.seeds = num(key, value)?,
            "max_steps" => {
                self.max_steps = match value {
                    "none" | "" => None,
                    v => Some(num(key, v)?),
                }
            }
            "loss_ce" => self.loss_weights.ce = num(key, value)?,
            "loss_giou" => self.loss_weights.giou = num(key, value)?,
            "loss_l1" => self.loss_weights.l1 = num(key, value)?,
            "train_dir" => self.train_dir = Some(PathBuf::from(value)),
            "test_dir" => self.test_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "train_n" => self.train_n = num(key, value)?,
            "test_n" => self.test_n = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "ffn_hidden" => m.ffn_hidden = num(key, value)?,
            "coattn_depth" => m.coattn_depth = num(key, value)?,
            "encoder_depth" => m.encoder_depth = num(key, value)?,
            "strategy" => m.strategy = value.parse::<FusionStrategy>()?,
            "gate_kind" => m.gate_kind = GateKind::parse(value)?,
            "image_size" => m.image_size = num(key, value)?,
            "patch_size" => m.patch_size = num(key, value)?,
            "encoder_kind" => m.encoder_kind = EncoderKind::parse(value)?,
            "conv_c1" => m.conv_channels.0 = num(key, value)?,
            "conv_c2" => m.conv_channels.1 = num(key, value)?,
            "max_text_len" => m.max_text_len = num(key, value)?,
            "num_classes" => m.num_classes = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Renders every key; parsing the result reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("seed", self.seed.to_string());
        kv("seeds", self.seeds.to_string());
        kv("max_steps", self.max_steps.map_or("none".into(), |s| s.to_string()));
        kv("loss_ce", self.loss_weights.ce.to_string());
        kv("loss_giou", self.loss_weights.giou.to_string());
        kv("loss_l1", self.loss_weights.l1.to_string());
        for (k, p) in [("train_dir", &self.train_dir), ("test_dir", &self.test_dir), ("out_dir", &self.out_dir)] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        kv("train_n", self.train_n.to_string());
        kv("test_n", self.test_n.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("d_model", m.d_model.to_string());
        kv("heads", m.heads.to_string());
        kv("ffn_hidden", m.ffn_hidden.to_string());
        kv("coattn_depth", m.coattn_depth.to_string());
        kv("encoder_depth", m.encoder_depth.to_string());
        kv("strategy", m.strategy.to_string());
        kv("gate_kind", m.gate_kind.name().to_string());
        kv("image_size", m.image_size.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("encoder_kind", m.encoder_kind.name().to_string());
        kv("conv_c1", m.conv_channels.0.to_string());
        kv("conv_c2", m.conv_channels.1.to_string());
        kv("max_text_len", m.max_text_len.to_string());
        kv("num_classes", m.num_classes.to_string());
        out
    }
}
