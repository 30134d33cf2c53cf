use super::Matrix;
use crate::error::{EmmError, Result};

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let cols = logits.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Mean cross-entropy of `labels` under softmax(`logits`), with its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (rows, cols) = logits.shape();
    if labels.len() != rows {
        return Err(EmmError::shape(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if rows == 0 {
        return Err(EmmError::input("cross-entropy over an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
        return Err(EmmError::input(format!(
            "label {bad} out of range for {cols} classes"
        )));
    }
    let log_probs = log_softmax(logits);
    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut grad = log_probs.map(f64::exp);
    for (r, &y) in labels.iter().enumerate() {
        loss -= log_probs.get(r, y);
        let row = grad.row_mut(r);
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g *= scale);
    }
    Ok((loss * scale, grad))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
