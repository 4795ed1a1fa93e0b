use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Floor applied to the true-class probability before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Max-subtracted softmax of a plain vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `-ln(max(s_t, LOG_FLOOR))`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let s = probs.get(target).ok_or_else(|| {
        Error::Config(format!("class {target} out of range for {} classes", probs.len()))
    })?;
    Ok(-s.max(LOG_FLOOR).ln())
}

fn as_batch(y: &Var) -> Result<(Var, usize, usize)> {
    let shape = y.shape();
    match shape.len() {
        1 => Ok((y.reshape(&[1, shape[0]])?, 1, shape[0])),
        2 => Ok((y.clone(), shape[0], shape[1])),
        _ => Err(Error::InvalidShape(format!(
            "softmax expects [V] or [B,V], got {shape:?}"
        ))),
    }
}

/// Row-wise softmax of `[B,V]` logits (or a single `[V]` vector).
///
/// The row maximum is subtracted as a constant; the softmax is invariant to
/// that shift, so gradients are unaffected.
pub fn softmax_var(y: &Var) -> Result<Var> {
    let (yb, _, v) = as_batch(y)?;
    let shift = yb.detach().max_axis(1)?.broadcast_axis(1, v)?;
    let e = yb.sub(&shift)?.exp();
    let z = e.sum_axis(1)?.broadcast_axis(1, v)?;
    let s = e.div(&z)?;
    s.reshape(&y.shape())
}

/// Per-row entry `m[b, cols[b]]` of a `[B,V]` variable, as `[B]`.
pub fn select_columns(m: &Var, cols: &[usize]) -> Result<Var> {
    let shape = m.shape();
    if shape.len() != 2 || shape[0] != cols.len() {
        return Err(Error::InvalidShape(format!(
            "select {} columns from {shape:?}",
            cols.len()
        )));
    }
    let v = shape[1];
    let mut idx = Vec::with_capacity(cols.len());
    for (b, &c) in cols.iter().enumerate() {
        if c >= v {
            return Err(Error::Config(format!("class {c} out of range for {v} classes")));
        }
        idx.push(b * v + c);
    }
    m.gather(Rc::from(idx), &[cols.len()])
}

/// Per-example cross-entropy of softmax probabilities `[B,V]`, shape `[B]`.
pub fn cross_entropy_per_example(probs: &Var, targets: &[usize]) -> Result<Var> {
    let picked = select_columns(probs, targets)?;
    Ok(picked.clamp(LOG_FLOOR, f64::INFINITY).ln().neg())
}

/// Batch-mean cross-entropy of softmax probabilities.
pub fn cross_entropy_var(probs: &Var, targets: &[usize]) -> Result<Var> {
    Ok(cross_entropy_per_example(probs, targets)?.mean())
}
