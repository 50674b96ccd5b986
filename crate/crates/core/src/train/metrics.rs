use alloc::vec::Vec;

use crate::error::{usage, Error, Result};
use crate::tensor::{Tape, Tensor};

/// Mean of `-log softmax(logits)[label]` over the rows of `logits [rows, k]`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let y = tape.cross_entropy(l, labels)?;
    Ok(tape.value(y).item())
}

pub fn mse_loss(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || pred.is_empty() {
        return Err(usage!("mse over {} predictions and {} targets", pred.len(), y.len()));
    }
    Ok(pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    Ok(libm::sqrt(mse_loss(y_hat, y)?))
}

/// `RMSE(y, ŷ) / ȳ` where `ȳ` is the mean of the training targets.
pub fn nrmse(y: &[f64], y_hat: &[f64], train_mean: f64) -> Result<f64> {
    if train_mean == 0.0 || !train_mean.is_finite() {
        return Err(Error::Numeric(alloc::format!("nrmse undefined for training mean {train_mean}")));
    }
    Ok(rmse(y, y_hat)? / train_mean)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(usage!("accuracy over {} predictions and {} labels", pred.len(), labels.len()));
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
}

/// Index of the largest entry per row; the first wins ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.last_dim().max(1);
    logits
        .data()
        .chunks(k)
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0)
        .collect()
}
