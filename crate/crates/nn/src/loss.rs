//! Loss functions returning `(value, gradient w.r.t. the input)`.

use ndarray::{Array2, ArrayView2, Axis};

use crate::{NnError, Result};

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}

pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean softmax cross-entropy over the batch.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if n == 0 {
        return Err(NnError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(NnError::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{} labels", labels.len()),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::LabelOutOfRange { label, classes: k });
    }
    let logp = log_softmax(logits);
    let loss = -labels.iter().enumerate().map(|(i, &l)| logp[[i, l]]).sum::<f64>() / n as f64;
    let mut grad = logp.mapv(f64::exp);
    for (i, &l) in labels.iter().enumerate() {
        grad[[i, l]] -= 1.0;
    }
    grad /= n as f64;
    Ok((loss, grad))
}

/// Mean entropy of the row-wise softmax distributions and its gradient.
pub fn softmax_entropy(logits: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows().max(1) as f64;
    let logp = log_softmax(logits);
    let p = logp.mapv(f64::exp);
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for ((prow, lrow), mut grow) in p.axis_iter(Axis(0)).zip(logp.axis_iter(Axis(0))).zip(grad.axis_iter_mut(Axis(0))) {
        let h: f64 = -prow.iter().zip(lrow.iter()).map(|(p, l)| p * l).sum::<f64>();
        total += h;
        // dH/dz_j = -p_j (log p_j + H)
        for ((g, &pj), &lj) in grow.iter_mut().zip(prow.iter()).zip(lrow.iter()) {
            *g = -pj * (lj + h) / n;
        }
    }
    (total / n, grad)
}

/// Per-example summed squared error, averaged over the batch.
pub fn squared_error(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = pred.nrows().max(1) as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Per-example summed absolute error, averaged over the batch.
pub fn absolute_error(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = pred.nrows().max(1) as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    (loss, diff.mapv(|d| d.signum() / n))
}
