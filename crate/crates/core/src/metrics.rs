//! One-pass evaluation metrics.
//!
//! Conventions (fixed; toolkits differ on these and the numbers move with them):
//!
//! | metric   | grid                       | success test |
//! |----------|----------------------------|--------------|
//! | AUC      | IoU thresholds 0, 0.05 .. 1 (21) | `iou > t`    |
//! | P        | 20 px                      | `err <= t`   |
//! | P_norm   | 0, 0.025 .. 0.5 (21)       | `err <= t`   |
//! | SR_t     | 0.5 and 0.75               | `iou > t`    |
//!
//! Dataset aggregates are means of per-sequence values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, GladError, Result};
use crate::geometry::{iou, BoundingBox};

pub const AUC_POINTS: usize = 21;
pub const PRECISION_PX: f64 = 20.0;
pub const NORM_PRECISION_MAX: f64 = 0.5;
pub const NORM_POINTS: usize = 21;

fn non_empty(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        bail!(Undefined, "{what} of an empty trace");
    }
    Ok(())
}

/// IoU thresholds `k / 20`, `k = 0..=20`.
pub fn auc_thresholds() -> Vec<f64> {
    (0..AUC_POINTS)
        .map(|k| k as f64 / (AUC_POINTS - 1) as f64)
        .collect()
}

/// Normalized-error thresholds `k / 40`, `k = 0..=20`.
pub fn norm_thresholds() -> Vec<f64> {
    (0..NORM_POINTS)
        .map(|k| NORM_PRECISION_MAX * k as f64 / (NORM_POINTS - 1) as f64)
        .collect()
}

fn fraction(values: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    values.iter().filter(|v| pred(**v)).count() as f64 / values.len() as f64
}

/// Success rate at every AUC threshold.
pub fn success_curve(ious: &[f64]) -> Result<Vec<f64>> {
    non_empty(ious, "success curve")?;
    Ok(auc_thresholds()
        .iter()
        .map(|t| fraction(ious, |v| v > *t))
        .collect())
}

pub fn success_auc(ious: &[f64]) -> Result<f64> {
    let curve = success_curve(ious)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

pub fn precision(center_err_px: &[f64], threshold: f64) -> Result<f64> {
    non_empty(center_err_px, "precision")?;
    Ok(fraction(center_err_px, |e| e <= threshold))
}

/// Precision at 0..=50 px, for plotting.
pub fn precision_curve(center_err_px: &[f64]) -> Result<Vec<(f64, f64)>> {
    non_empty(center_err_px, "precision curve")?;
    Ok((0..=50)
        .map(|t| (t as f64, fraction(center_err_px, |e| e <= t as f64)))
        .collect())
}

pub fn center_error(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    ((px - gx).powi(2) + (py - gy).powi(2)).sqrt()
}

/// Center error with each axis divided by the ground-truth extent; `None` for zero-size gt.
pub fn normalized_center_error(pred: &BoundingBox, gt: &BoundingBox) -> Option<f64> {
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return None;
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    let dx = (px - gx) / gt.width();
    let dy = (py - gy) / gt.height();
    Some((dx * dx + dy * dy).sqrt())
}

/// Mean success over the normalized-error grid, and the number of skipped frames.
pub fn norm_precision(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<(f64, usize)> {
    if pred.len() != gt.len() {
        bail!(
            Input,
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        );
    }
    let mut errs = Vec::with_capacity(pred.len());
    let mut skipped = 0;
    for (p, g) in pred.iter().zip(gt) {
        match normalized_center_error(p, g) {
            Some(e) => errs.push(e),
            None => skipped += 1,
        }
    }
    non_empty(&errs, "normalized precision")?;
    let grid = norm_thresholds();
    let v = grid
        .iter()
        .map(|t| fraction(&errs, |e| e <= *t))
        .sum::<f64>()
        / grid.len() as f64;
    Ok((v, skipped))
}

/// `(AO, SR_0.5, SR_0.75)`.
pub fn got10k_metrics(ious: &[f64]) -> Result<(f64, f64, f64)> {
    non_empty(ious, "average overlap")?;
    let ao = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok((
        ao,
        fraction(ious, |v| v > 0.5),
        fraction(ious, |v| v > 0.75),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub auc: f64,
    pub p: f64,
    pub p_norm: f64,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub name: String,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub norm_errors: Vec<f64>,
    pub skipped: usize,
    pub scores: Scores,
}

/// Scores one sequence over the frames that have ground truth.
pub fn evaluate_sequence(
    name: &str,
    pred: &[BoundingBox],
    gt: &[BoundingBox],
) -> Result<SequenceEval> {
    let n = gt.len().min(pred.len());
    if n == 0 {
        bail!(Undefined, "sequence {name}: nothing to evaluate");
    }
    if pred.len() < gt.len() {
        bail!(
            Input,
            "sequence {name}: {} predictions for {} annotated frames",
            pred.len(),
            gt.len()
        );
    }
    let (pred, gt) = (&pred[..n], &gt[..n]);
    let ious = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| iou(p, g))
        .collect::<Result<Vec<_>>>()?;
    let center_errors: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| center_error(p, g))
        .collect();
    let norm_errors: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter_map(|(p, g)| normalized_center_error(p, g))
        .collect();
    let (p_norm, skipped) = norm_precision(pred, gt)?;
    let (ao, sr50, sr75) = got10k_metrics(&ious)?;
    Ok(SequenceEval {
        name: name.to_string(),
        scores: Scores {
            auc: success_auc(&ious)?,
            p: precision(&center_errors, PRECISION_PX)?,
            p_norm,
            ao,
            sr50,
            sr75,
        },
        ious,
        center_errors,
        norm_errors,
        skipped,
    })
}

/// Scores `(name, predictions, ground truth)` triples in parallel and aggregates them.
pub fn evaluate_dataset(runs: &[(&str, &[BoundingBox], &[BoundingBox])]) -> Result<EvalReport> {
    let sequences = runs
        .par_iter()
        .map(|(name, pred, gt)| evaluate_sequence(name, pred, gt))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(sequences)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceEval>,
    pub aggregate: Scores,
}

impl EvalReport {
    pub fn new(sequences: Vec<SequenceEval>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(GladError::Undefined("report over zero sequences".into()));
        }
        let n = sequences.len() as f64;
        let mean = |f: fn(&Scores) -> f64| sequences.iter().map(|s| f(&s.scores)).sum::<f64>() / n;
        let aggregate = Scores {
            auc: mean(|s| s.auc),
            p: mean(|s| s.p),
            p_norm: mean(|s| s.p_norm),
            ao: mean(|s| s.ao),
            sr50: mean(|s| s.sr50),
            sr75: mean(|s| s.sr75),
        };
        Ok(Self {
            sequences,
            aggregate,
        })
    }

    /// Tab-separated table, percentages with two decimals; last row is `ALL`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("sequence\tframes\tauc\tp_norm\tp\tao\tsr50\tsr75\n");
        let row = |name: &str, frames: usize, s: &Scores| {
            format!(
                "{name}\t{frames}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\n",
                100.0 * s.auc,
                100.0 * s.p_norm,
                100.0 * s.p,
                100.0 * s.ao,
                100.0 * s.sr50,
                100.0 * s.sr75
            )
        };
        let mut total = 0;
        for s in &self.sequences {
            out.push_str(&row(&s.name, s.ious.len(), &s.scores));
            total += s.ious.len();
        }
        out.push_str(&row("ALL", total, &self.aggregate));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_examples() {
        assert_eq!(success_auc(&[1.0; 5]).unwrap(), 20.0 / 21.0);
        assert_eq!(success_auc(&[0.0; 5]).unwrap(), 0.0);
        assert_eq!(success_auc(&[0.5; 3]).unwrap(), 10.0 / 21.0);
        assert!(success_auc(&[]).is_err());
    }

    #[test]
    fn got10k_examples() {
        assert_eq!(got10k_metrics(&[1.0, 0.0]).unwrap(), (0.5, 0.5, 0.5));
        let (ao, s50, s75) = got10k_metrics(&[0.6; 4]).unwrap();
        assert!((ao - 0.6).abs() < 1e-15 && s50 == 1.0 && s75 == 0.0);
    }
}
