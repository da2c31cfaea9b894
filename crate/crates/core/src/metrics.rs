//! Classification accuracy and its mean over tasks.

use crate::error::{Error, Result};

/// Fraction of positions where `preds` and `labels` agree.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyList);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Arithmetic mean of per-task accuracies (mAcc).
pub fn mean_accuracy(acc: &[f64]) -> Result<f64> {
    if acc.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(acc.iter().sum::<f64>() / acc.len() as f64)
}
