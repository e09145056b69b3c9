use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean of the precision at the rank of every positive, ranking by score
/// descending with ties kept in input order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Macro mean of [`average_precision`] over classes with at least one positive.
/// Both matrices are row-major `N x C`.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let classes = labels.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != classes) || labels.iter().any(|r| r.len() != classes) {
        return Err(Error::ShapeMismatch("ragged score or label matrix".into()));
    }
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<u8> = labels.iter().map(|r| r[c]).collect();
        if let Some(ap) = average_precision(&s, &l) {
            total += ap;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidInput("no class has a positive label".into()));
    }
    Ok(total / counted as f64)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MaskMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// Precision, recall and F1 of the change class (value 1).
pub fn mask_metrics(pred: &[u8], gt: &[u8]) -> Result<MaskMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(MaskMetrics::from_counts(tp, fp, fn_))
}
