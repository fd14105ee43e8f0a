//! Dense linear algebra, stable softmax/entropy, and the keyed Gaussian
//! stream used by every sampler.
//!
//! Everything here is 64-bit and pure.

pub mod count;
pub mod matrix;
pub mod stream;

pub use count::{FlopCounter, OpCounter};
pub use matrix::{cholesky, cholesky_counted, dot, Cholesky, Matrix};
pub use stream::{derive_seed, draw_gaussian, DrawKey, GaussianStream};

use crate::error::{Error, Result};

/// Real vector.
pub type Vector = Vec<f64>;

/// Probability vector: non-negative entries summing to one.
pub type ProbVector = Vec<f64>;

/// Tolerance on the sum of a [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// `softmax(v / temperature)` computed with a max shift.
pub fn softmax(v: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, temperature, &mut out);
    Ok(out)
}

/// Unchecked kernel behind [`softmax`]; `out` must match `v` in length.
#[inline]
pub(crate) fn softmax_into(v: &[f64], temperature: f64, out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = ((x - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `ln Σ exp(v)` with a max shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("log_sum_exp of an empty vector"));
    }
    if v.len() == 1 {
        return Ok(v[0]);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn max_value(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Whether `p` satisfies the [`ProbVector`] invariants.
pub fn is_prob_vector(p: &[f64]) -> bool {
    !p.is_empty() && p.iter().all(|&x| x.is_finite() && x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= PROB_SUM_TOL
}
