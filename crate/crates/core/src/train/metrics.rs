//! AUC, accuracy and fold aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("AUC undefined: labels contain a single class")]
    UndefinedAuc,
    #[error("{0} scores for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no predictions to score")]
    Empty,
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed from rank sums in integer
/// half-units, so the result does not depend on input order.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the number of (pos, neg) wins, ties worth 1
    let mut doubled_wins: u64 = 0;
    let mut negs_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| labels[k] == 1).count() as u64;
        let neg = group.len() as u64 - pos;
        doubled_wins += 2 * pos * negs_below + pos * neg;
        negs_below += neg;
        i = j;
    }
    Ok(doubled_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// Fraction of predictions with `(score >= threshold) == label`.
pub fn acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Summary { mean, std }
}
