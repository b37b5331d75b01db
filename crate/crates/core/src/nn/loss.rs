use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Mean cross-entropy of softmax(logits) and its gradient `(p - onehot) / n`.
/// The log-sum-exp is shifted by the row maximum.
pub fn softmax_ce_kernel<F: Float>(logits: &[F], labels: &[u8], classes: usize) -> (f64, Vec<F>) {
    let n = labels.len();
    let mut loss = 0.0f64;
    let mut grad = vec![F::zero(); logits.len()];
    let inv_n = 1.0 / n as f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()));
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64().unwrap() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss -= (row[label as usize].to_f64().unwrap() - max) - sum.ln();
        for (c, e) in exps.iter().enumerate() {
            let target = if c == label as usize { 1.0 } else { 0.0 };
            grad[r * classes + c] = F::from((e / sum - target) * inv_n).unwrap();
        }
    }
    (loss * inv_n, grad)
}

/// Returns the mean loss and the gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f32, Tensor)> {
    let (n, classes) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Empty);
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(Error::BadLabel { index, label });
    }
    let (loss, grad) = softmax_ce_kernel(logits.data(), labels, classes);
    Ok((loss as f32, Tensor::new(logits.shape(), grad)?))
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<u8>> {
    let (_, classes) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}
