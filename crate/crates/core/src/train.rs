//! End-to-end training with Adam and evaluation.
//!
//! Each optimizer step builds one tape per sample, backpropagates, and sums
//! the per-sample gradients into a dense buffer in a fixed order, so a run
//! is a pure function of its configuration and seed. Training shuffles with
//! the run seed; evaluation never shuffles.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::boxes::BoundingBox;
use crate::config::TrainConfig;
use crate::data::VqlaSample;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::MetricsReport;
use crate::model::CatVil;
use crate::params::Mat;
use crate::text::Vocabulary;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Mat]) -> Self {
        let zeros: Vec<Mat> = shapes.iter().map(|m| Mat::zeros(m.dim())).collect();
        Adam {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub train_metrics: Option<MetricsReport>,
    pub test_metrics: Option<MetricsReport>,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable per-epoch loss table followed by the final metrics.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:>5} {:>6} {:>10} {:>10} {:>10} {:>10}\n", "epoch", "steps", "total", "ce", "giou", "l1");
        for e in &self.epochs {
            out.push_str(&format!(
                "{:>5} {:>6} {:>10.5} {:>10.5} {:>10.5} {:>10.5}\n",
                e.epoch, e.steps, e.loss.total, e.loss.ce, e.loss.giou_loss, e.loss.l1
            ));
        }
        for (label, m) in [("train", &self.train_metrics), ("test", &self.test_metrics)] {
            if let Some(m) = m {
                out.push_str(&format!(
                    "{label}: acc {:.4}  f-score {:.4}  miou {:.4}  (n = {})\n",
                    m.accuracy, m.macro_f, m.miou, m.count
                ));
            }
        }
        out.push_str(&format!("wall time {:.1}s\n", self.wall_time_secs));
        out
    }
}

/// Vocabulary over the training questions.
pub fn build_vocab(samples: &[VqlaSample]) -> Result<Vocabulary> {
    let questions: Vec<&str> = samples.iter().map(|s| s.question.as_str()).collect();
    Vocabulary::build(&questions)
}

/// Trains `model` in place on `train`; `test`, when given, is evaluated at
/// the end.
pub fn train(
    model: &mut CatVil,
    train: &[VqlaSample],
    test: Option<&[VqlaSample]>,
    cfg: &TrainConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let start = Instant::now();
    let ids: Vec<Vec<usize>> = train
        .iter()
        .map(|s| model.encode_question(&s.question))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(cfg.lr, model.store.values());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        let mut epoch_steps = 0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            if steps.len() >= max_steps {
                if epoch_steps > 0 {
                    epochs.push(EpochLog {
                        epoch,
                        steps: epoch_steps,
                        loss: LossBreakdown::mean(&epoch_losses, &cfg.loss_weights),
                    });
                }
                break 'outer;
            }
            let mut grads = model.store.zeros_like();
            let mut batch_losses = Vec::with_capacity(batch.len());
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &train[i];
                let mut tape = Tape::new(&model.store);
                let (loss, breakdown) =
                    model.sample_loss(&mut tape, &s.image, &ids[i], s.answer_id, &s.bbox, &cfg.loss_weights)?;
                if !tape.scalar(loss).is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        samples: batch.to_vec(),
                        detail: format!("sample {i}: {breakdown:?}"),
                    });
                }
                tape.backward(loss).accumulate_into(&mut grads, scale);
                batch_losses.push(breakdown);
            }
            if let Some(bad) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    samples: batch.to_vec(),
                    detail: format!("non-finite gradient for {}", model.store.iter().nth(bad).map_or("?", |p| p.0)),
                });
            }
            adam.step(model.store.values_mut(), &grads);
            let loss = LossBreakdown::mean(&batch_losses, &cfg.loss_weights);
            steps.push(StepLog {
                step: steps.len(),
                epoch,
                loss,
            });
            epoch_losses.extend(batch_losses);
            epoch_steps += 1;
        }
        epochs.push(EpochLog {
            epoch,
            steps: epoch_steps,
            loss: LossBreakdown::mean(&epoch_losses, &cfg.loss_weights),
        });
    }

    let train_metrics = Some(evaluate(model, train)?);
    let test_metrics = match test {
        Some(t) if !t.is_empty() => Some(evaluate(model, t)?),
        _ => None,
    };
    Ok(RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        epochs,
        steps,
        train_metrics,
        test_metrics,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Builds a fresh model from `cfg` (vocabulary from `train`) and trains it.
pub fn train_new(
    train_set: &[VqlaSample],
    test: Option<&[VqlaSample]>,
    cfg: &TrainConfig,
) -> Result<(CatVil, RunReport)> {
    let vocab = build_vocab(train_set)?;
    let mut model = CatVil::new(cfg.model.clone(), vocab, cfg.seed)?;
    let report = train(&mut model, train_set, test, cfg)?;
    Ok((model, report))
}

/// Per-sample predictions in dataset order; samples are independent, so the
/// result does not depend on how they are sharded.
pub fn predict_all(model: &CatVil, samples: &[VqlaSample]) -> Result<Vec<(usize, BoundingBox)>> {
    samples
        .par_iter()
        .map(|s| {
            let p = model.predict(&s.image, &s.question)?;
            Ok((p.answer_id, p.corners()))
        })
        .collect()
}

pub fn evaluate(model: &CatVil, samples: &[VqlaSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let classes = model.config.num_classes;
    if let Some(s) = samples.iter().find(|s| s.answer_id >= classes) {
        return Err(Error::InvalidInput(format!(
            "dataset answer id {} exceeds the model's {classes} classes",
            s.answer_id
        )));
    }
    let preds = predict_all(model, samples)?;
    let (answers, boxes): (Vec<usize>, Vec<BoundingBox>) = preds.into_iter().unzip();
    let targets: Vec<usize> = samples.iter().map(|s| s.answer_id).collect();
    let gts: Vec<BoundingBox> = samples.iter().map(|s| s.bbox).collect();
    MetricsReport::compute(&answers, &targets, &boxes, &gts, classes)
}
