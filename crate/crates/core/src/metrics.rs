//! Evaluation metrics and repeat summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// Unweighted mean of per-class F1 over `num_classes` classes. A class with
/// no true and no predicted members scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    if num_classes == 0 {
        return Err(Error::UndefinedMetric("macro-F1 over zero classes".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::UndefinedMetric(format!("label {} outside {num_classes} classes", p.max(t))));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}

/// Micro-averaged F1; for single-label prediction this is accuracy.
pub fn micro_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("micro-F1 of no samples".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half (average-rank formulation).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Reciprocal of the positive's rank among itself and its candidates; ties
/// rank the positive last.
pub fn reciprocal_rank(positive: f64, candidates: &[f64]) -> f64 {
    let ahead = candidates.iter().filter(|&&c| c >= positive).count();
    1.0 / (1 + ahead) as f64
}

/// Mean reciprocal rank over `(positive score, candidate scores)` queries.
pub fn mrr(queries: &[(f64, Vec<f64>)]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::UndefinedMetric("MRR needs at least one positive".into()));
    }
    Ok(queries.iter().map(|(p, c)| reciprocal_rank(*p, c)).sum::<f64>() / queries.len() as f64)
}

/// Mean and sample standard deviation over repeats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Omitted for a single repeat.
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, std })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.4} ± {:.4}", self.mean, s),
            None => write!(f, "{:.4}", self.mean),
        }
    }
}
