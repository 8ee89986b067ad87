use super::{shape_str, Real, Tensor};
use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u16 = u16::MAX;

/// Mean per-position softmax cross-entropy over the last axis of `logits`,
/// skipping positions labelled [`IGNORE_LABEL`].
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[u16]) -> Result<Tensor<T>> {
    let n = *logits.shape().last().unwrap_or(&0);
    let positions = logits.numel() / n.max(1);
    if labels.len() != positions || n == 0 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for logits {}", positions, shape_str(logits.shape())),
            format!("{} labels", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= n) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {n} categories")));
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(Error::EmptyLoss);
    }
    let ld = logits.data_arc();
    let mut total = T::zero();
    let mut probs = vec![T::zero(); ld.len()];
    for ((row, pr), &label) in ld.chunks_exact(n).zip(probs.chunks_exact_mut(n)).zip(labels) {
        if label == IGNORE_LABEL {
            continue;
        }
        let max = row.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
        let mut z = T::zero();
        for (p, v) in pr.iter_mut().zip(row) {
            *p = (*v - max).exp();
            z += *p;
        }
        pr.iter_mut().for_each(|p| *p /= z);
        total += z.ln() + max - row[label as usize];
    }
    let inv = T::one() / T::of(valid as f64);
    let labels = labels.to_vec();
    Ok(Tensor::from_op(vec![1], vec![total * inv], vec![logits.clone()], move |g, _| {
        let s = g[0] * inv;
        let mut d = probs.clone();
        for (dr, &label) in d.chunks_exact_mut(n).zip(&labels) {
            if label == IGNORE_LABEL {
                continue;
            }
            dr.iter_mut().for_each(|v| *v *= s);
            dr[label as usize] -= s;
        }
        vec![Some(d)]
    }))
}
