//! Statistical pooling over the context matrix, the linear classifier,
//! and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{masked_mean_std, BinaryMask, Matrix};

/// Default epsilon inside the pooled standard deviation.
pub const POOL_EPSILON: f64 = 1e-8;

/// Mean/std pooled descriptor of a context matrix.
#[derive(Debug, Clone)]
pub struct PooledStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PooledStats {
    /// `[mu ; sigma]` in that order.
    pub fn concatenated(&self) -> Vec<f64> {
        let mut out = self.mu.clone();
        out.extend_from_slice(&self.sigma);
        out
    }
}

/// Linear classifier weights: `2*d_attn x L` plus a bias per class.
#[derive(Debug, Clone)]
pub struct ClassifierWeights {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl ClassifierWeights {
    pub fn zeros(d_in: usize, classes: usize) -> Self {
        ClassifierWeights {
            w: Matrix::zeros(d_in, classes),
            b: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }
}

/// Mean and standard deviation of the valid context rows, concatenated
/// into a fixed-length descriptor.
pub fn stat_pool(c: &Matrix, mask: &BinaryMask, epsilon: f64) -> Result<PooledStats> {
    let (mu, sigma) = masked_mean_std(c, mask, epsilon)?;
    Ok(PooledStats { mu, sigma })
}

/// Linear projection of the pooled descriptor followed by softmax.
pub fn classify(stats: &PooledStats, w: &ClassifierWeights) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = stats.concatenated();
    logits_softmax(&s, w)
}

/// `logits = s^T W + b`, `probs = softmax(logits)`.
pub fn logits_softmax(s: &[f64], w: &ClassifierWeights) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.len() != w.w.rows() {
        return Err(Error::Shape(format!(
            "pooled dim {} vs classifier input {}",
            s.len(),
            w.w.rows()
        )));
    }
    let mut logits = w.b.clone();
    for (i, &si) in s.iter().enumerate() {
        for (l, acc) in logits.iter_mut().enumerate() {
            *acc += si * w.w.get(i, l);
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / z).collect();
    Ok((logits, probs))
}

/// Accuracy, macro-F1 and the confusion matrix for a labeled prediction set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[truth][prediction]` counts.
    pub confusion: Vec<Vec<u64>>,
}

/// Computes accuracy and macro-F1 from predictions against truths.
///
/// A class with neither true nor predicted samples is excluded from the
/// macro average; a class that appears on either side but has no true
/// positives contributes F1 = 0.
pub fn evaluate(predictions: &[usize], truths: &[usize], classes: usize) -> Result<EvalReport> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::InvalidArgument(
            "evaluate needs equal-length non-empty label lists".into(),
        ));
    }
    if predictions.iter().chain(truths).any(|&l| l >= classes) {
        return Err(Error::InvalidArgument("label out of range".into()));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        confusion[t][p] += 1;
    }
    let total = predictions.len() as f64;
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / total;

    let mut per_class_f1 = vec![0.0; classes];
    let mut included = 0usize;
    let mut f1_sum = 0.0;
    for c in 0..classes {
        let tp = confusion[c][c];
        let fp: u64 = (0..classes).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
        let fne: u64 = (0..classes).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        if tp + fp + fne == 0 {
            continue;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fne) as f64;
        per_class_f1[c] = f1;
        f1_sum += f1;
        included += 1;
    }
    let macro_f1 = if included > 0 { f1_sum / included as f64 } else { 0.0 };
    Ok(EvalReport {
        accuracy,
        macro_f1,
        per_class_f1,
        confusion,
    })
}
