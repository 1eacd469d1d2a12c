//! Cross-entropy on graph logits.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{contract_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `[n, k]` matrix with a one at each `(i, labels[i])`.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = alloc::vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(contract_err!("label {} outside [0, {})", l, classes));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new([labels.len(), classes], data)
}

/// Per-sample cross-entropy as an `[n, k]` node whose row sums are the
/// losses (non-target entries are zero).
fn masked_nll<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(contract_err!("logits {:?} do not match {} labels", shape, labels.len()));
    }
    let hot = g.constant(one_hot(labels, shape[1])?);
    let lp = g.log_softmax(logits)?;
    let picked = g.mul(lp, hot)?;
    g.neg(picked)
}

/// Summed cross-entropy over the batch, as a scalar node.
pub fn cross_entropy_sum<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let nll = masked_nll(g, logits, labels)?;
    g.sum(nll)
}

/// Mean cross-entropy over the batch, as a scalar node.
pub fn cross_entropy_mean<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = cross_entropy_sum(g, logits, labels)?;
    g.scale(s, 1.0 / labels.len() as f64)
}

/// Per-sample cross-entropy values of a logit matrix.
pub fn cross_entropy_rows<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
    let k = *logits.shape().last().unwrap_or(&0);
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(contract_err!("logits {:?} do not match {} labels", logits.shape(), labels.len()));
    }
    let lp = crate::tensor::log_softmax_rows(logits)?;
    Ok(labels.iter().enumerate().map(|(i, &l)| -lp.data()[i * k + l].as_f64()).collect())
}
