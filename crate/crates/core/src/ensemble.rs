//! Model-internal ensembling: a running, cost-weighted average of the exit
//! predictions seen so far.
//!
//! `p_ens_k = Σ_{m≤k} w_m p_m / Σ_{m≤k} w_m`, where `w_m` is the backbone's
//! cumulative cost up to exit `m`. Each push is `O(c)`.

use crate::error::{Error, Result};
use crate::numerics::ProbVector;

#[derive(Debug, Clone, PartialEq)]
pub struct MieState {
    weighted_sum: Vec<f64>,
    total_weight: f64,
    members: usize,
}

impl MieState {
    pub fn new(n_classes: usize) -> Self {
        Self {
            weighted_sum: vec![0.0; n_classes],
            total_weight: 0.0,
            members: 0,
        }
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    /// Folds in the prediction of the next exit with weight `weight`.
    pub fn push(&mut self, pred: &[f64], weight: f64) -> Result<()> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::invalid(format!(
                "ensemble weight must be positive, got {weight}"
            )));
        }
        if pred.len() != self.weighted_sum.len() {
            return Err(Error::invalid(format!(
                "prediction has {} classes, ensemble has {}",
                pred.len(),
                self.weighted_sum.len()
            )));
        }
        for (s, &p) in self.weighted_sum.iter_mut().zip(pred) {
            *s += weight * p;
        }
        self.total_weight += weight;
        self.members += 1;
        Ok(())
    }

    /// The normalized ensemble prediction.
    pub fn current(&self) -> Result<ProbVector> {
        if self.members == 0 {
            return Err(Error::EmptyEnsemble);
        }
        Ok(self.weighted_sum.iter().map(|s| s / self.total_weight).collect())
    }
}

/// Functional form of [`MieState::push`].
pub fn mie_push(mut state: MieState, pred: &[f64], weight: f64) -> Result<MieState> {
    state.push(pred, weight)?;
    Ok(state)
}

pub fn mie_current(state: &MieState) -> Result<ProbVector> {
    state.current()
}

/// Ensemble predictions at every prefix for one sample: element `k` is the
/// ensemble over exits `0..=k`.
pub fn mie_prefixes<P: AsRef<[f64]>>(per_exit: &[P], weights: &[f64]) -> Result<Vec<ProbVector>> {
    let c = per_exit.first().map_or(0, |p| p.as_ref().len());
    let mut state = MieState::new(c);
    per_exit
        .iter()
        .zip(weights)
        .map(|(p, &w)| {
            state.push(p.as_ref(), w)?;
            state.current()
        })
        .collect()
}
