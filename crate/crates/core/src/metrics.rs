//! Evaluation metrics: accuracy, macro-averaged F1 and mean IoU.

use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::losses::iou;

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a == 0 {
        return Err(Error::InvalidInput(format!("{what}: empty input")));
    }
    if a != b {
        return Err(Error::InvalidInput(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], targets: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), targets.len(), "accuracy")?;
    let correct = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub support: usize,
    pub predicted: usize,
    pub true_positive: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn class_stats(preds: &[usize], targets: &[usize], num_classes: usize) -> Result<Vec<ClassStats>> {
    check_lengths(preds.len(), targets.len(), "class_stats")?;
    let mut stats = vec![ClassStats::default(); num_classes];
    for (&p, &t) in preds.iter().zip(targets) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidInput(format!(
                "class id {} out of range for {num_classes} classes",
                p.max(t)
            )));
        }
        stats[p].predicted += 1;
        stats[t].support += 1;
        if p == t {
            stats[t].true_positive += 1;
        }
    }
    for s in &mut stats {
        let tp = s.true_positive as f64;
        s.precision = if s.predicted > 0 { tp / s.predicted as f64 } else { 0.0 };
        s.recall = if s.support > 0 { tp / s.support as f64 } else { 0.0 };
        s.f1 = if s.precision + s.recall > 0.0 {
            2.0 * s.precision * s.recall / (s.precision + s.recall)
        } else {
            0.0
        };
    }
    Ok(stats)
}

fn macro_from_stats(stats: &[ClassStats]) -> f64 {
    let active: Vec<f64> = stats
        .iter()
        .filter(|s| s.support > 0 || s.predicted > 0)
        .map(|s| s.f1)
        .collect();
    active.iter().sum::<f64>() / active.len().max(1) as f64
}

/// Unweighted mean of per-class F1 over classes that occur in the targets or
/// the predictions.
pub fn macro_f(preds: &[usize], targets: &[usize], num_classes: usize) -> Result<f64> {
    Ok(macro_from_stats(&class_stats(preds, targets, num_classes)?))
}

/// Mean IoU over corner-form boxes; predictions are clamped to the unit square.
pub fn mean_iou(preds: &[BoundingBox], gts: &[BoundingBox]) -> Result<f64> {
    check_lengths(preds.len(), gts.len(), "mean_iou")?;
    let clamp = |b: &BoundingBox| BoundingBox {
        x1: b.x1.clamp(0.0, 1.0),
        y1: b.y1.clamp(0.0, 1.0),
        x2: b.x2.clamp(0.0, 1.0),
        y2: b.y2.clamp(0.0, 1.0),
    };
    let sum: f64 = preds.iter().zip(gts).map(|(p, g)| iou(&clamp(p), g)).sum();
    Ok(sum / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub macro_f: f64,
    pub miou: f64,
    pub per_class: Vec<ClassStats>,
}

impl MetricsReport {
    pub fn compute(
        preds: &[usize],
        targets: &[usize],
        pred_boxes: &[BoundingBox],
        gt_boxes: &[BoundingBox],
        num_classes: usize,
    ) -> Result<Self> {
        let per_class = class_stats(preds, targets, num_classes)?;
        let correct = per_class.iter().map(|s| s.true_positive).sum();
        Ok(MetricsReport {
            count: preds.len(),
            correct,
            accuracy: accuracy(preds, targets)?,
            macro_f: macro_from_stats(&per_class),
            miou: mean_iou(pred_boxes, gt_boxes)?,
            per_class,
        })
    }

    /// Flat `key = value` record, one metric per line.
    pub fn to_kv_text(&self) -> String {
        let mut out = format!(
            "count = {}\ncorrect = {}\naccuracy = {:.6}\nmacro_f = {:.6}\nmiou = {:.6}\n",
            self.count, self.correct, self.accuracy, self.macro_f, self.miou
        );
        for (k, s) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "class.{k}.precision = {:.6}\nclass.{k}.recall = {:.6}\n",
                s.precision, s.recall
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
