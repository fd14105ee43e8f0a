//! Per-exit predictions for each prediction method.
//!
//! A method turns a bundle into one probability vector per (exit, sample):
//!
//! * `vanilla`: the MAP head at unit temperature;
//! * `laplace`: the Monte-Carlo Laplace predictive with per-exit `(T, σ)`;
//! * `mie`: the cost-weighted running ensemble of vanilla predictions;
//! * `mie-laplace`: the running ensemble of Laplace predictions.
//!
//! Routing, calibration and metrics all consume [`ExitPredictions`].

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{FeatureBundle, Split};
use crate::ensemble::mie_prefixes;
use crate::error::{Error, Result};
use crate::flops::Overheads;
use crate::laplace::{
    map_predict, map_probs_matrix, predict_rows, KfacFactors, KfacPosterior, SharedDraws, DEFAULT_N_MC,
};
use crate::numerics::{GaussianStream, ProbVector};

/// Prior scale used when it is not searched.
pub const DEFAULT_SIGMA: f64 = 2.0;
/// Temperature used when it is not searched.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vanilla,
    Laplace,
    Mie,
    MieLaplace,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vanilla, Method::Laplace, Method::Mie, Method::MieLaplace];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Laplace => "laplace",
            Method::Mie => "mie",
            Method::MieLaplace => "mie-laplace",
        }
    }

    pub fn overheads(self) -> Overheads {
        Overheads {
            laplace: matches!(self, Method::Laplace | Method::MieLaplace),
            mie: matches!(self, Method::Mie | Method::MieLaplace),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

/// Monte-Carlo settings shared by every Laplace evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub n_mc: usize,
    pub stream: GaussianStream,
    /// Reuse one pre-multiplied set of draws for every sample at an exit.
    pub shared_draws: bool,
}

impl SamplingConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            n_mc: DEFAULT_N_MC,
            stream: GaussianStream::new(seed),
            shared_draws: false,
        }
    }
}

/// Curvature statistics for every exit, estimated on the training split at
/// the MAP.
#[derive(Debug, Clone)]
pub struct LaplaceModel {
    factors: Vec<KfacFactors>,
}

impl LaplaceModel {
    pub fn fit(bundle: &FeatureBundle) -> Result<Self> {
        let train = bundle.rows(Split::Train);
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let factors = bundle
            .exits
            .par_iter()
            .enumerate()
            .map(|(k, e)| {
                let feats = e.gather(&train);
                let probs = map_probs_matrix(&e.weight, &e.bias, &feats)?;
                KfacFactors::estimate(&feats, &probs, &e.weight, &e.bias).map_err(|err| Error::Fit {
                    exit: k + 1,
                    reason: err.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { factors })
    }

    pub fn n_exits(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self, exit: usize) -> &KfacFactors {
        &self.factors[exit]
    }

    /// Posterior of exit `exit` (0-based).
    pub fn posterior(&self, exit: usize, sigma: f64, temperature: f64) -> Result<KfacPosterior> {
        self.factors[exit]
            .posterior(sigma, temperature)
            .map_err(|err| Error::Fit {
                exit: exit + 1,
                reason: err.to_string(),
            })
    }
}

/// `(T, σ)` for each exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub temperature: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl HyperParams {
    pub fn defaults(n_exits: usize) -> Self {
        Self {
            temperature: vec![DEFAULT_TEMPERATURE; n_exits],
            sigma: vec![DEFAULT_SIGMA; n_exits],
        }
    }
}

/// Probabilities of every exit for a fixed set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPredictions {
    pub method: Method,
    /// Bundle sample indices, one per column of `probs`.
    pub rows: Vec<usize>,
    /// `probs[exit][position]`.
    pub probs: Vec<Vec<ProbVector>>,
}

impl ExitPredictions {
    pub fn n_exits(&self) -> usize {
        self.probs.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Max-probability confidence, `[exit][position]`.
    pub fn confidences(&self) -> Vec<Vec<f64>> {
        self.probs
            .iter()
            .map(|exit| exit.iter().map(|p| crate::numerics::max_value(p)).collect())
            .collect()
    }
}

/// MAP predictions of one exit at temperature `t`.
pub fn vanilla_exit_probs(bundle: &FeatureBundle, exit: usize, rows: &[usize], t: f64) -> Result<Vec<ProbVector>> {
    let e = &bundle.exits[exit];
    rows.par_iter()
        .map(|&i| map_predict(&e.weight, &e.bias, e.features.row(i), t))
        .collect()
}

/// Laplace predictions of one exit under `posterior`.
pub fn laplace_exit_probs(
    bundle: &FeatureBundle,
    posterior: &KfacPosterior,
    exit: usize,
    rows: &[usize],
    sampling: &SamplingConfig,
) -> Result<Vec<ProbVector>> {
    let shared = sampling
        .shared_draws
        .then(|| SharedDraws::new(posterior, &sampling.stream, exit as u32, sampling.n_mc));
    predict_rows(
        posterior,
        &bundle.exits[exit].features,
        rows,
        exit as u32,
        sampling.n_mc,
        sampling.stream,
        shared.as_ref(),
    )
}

/// Ensemble every sample's per-exit predictions across exits.
pub fn ensemble_predictions(per_exit: &[Vec<ProbVector>], weights: &[f64]) -> Result<Vec<Vec<ProbVector>>> {
    let n_exits = per_exit.len();
    let n = per_exit.first().map_or(0, Vec::len);
    let per_sample: Vec<Vec<ProbVector>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let members: Vec<&ProbVector> = per_exit.iter().map(|e| &e[i]).collect();
            mie_prefixes(&members, weights)
        })
        .collect::<Result<_>>()?;
    Ok((0..n_exits)
        .map(|k| per_sample.iter().map(|s| s[k].clone()).collect())
        .collect())
}

/// Predictions of `method` at every exit for `rows`.
///
/// `hyper` supplies the per-exit `(T, σ)` of the Laplace-based methods and is
/// ignored by the vanilla ones.
pub fn predict_method(
    bundle: &FeatureBundle,
    laplace: &LaplaceModel,
    method: Method,
    hyper: &HyperParams,
    rows: &[usize],
    sampling: &SamplingConfig,
) -> Result<ExitPredictions> {
    let k = bundle.n_exits();
    let base: Vec<Vec<ProbVector>> = match method {
        Method::Vanilla | Method::Mie => (0..k)
            .map(|e| vanilla_exit_probs(bundle, e, rows, DEFAULT_TEMPERATURE))
            .collect::<Result<_>>()?,
        Method::Laplace | Method::MieLaplace => (0..k)
            .map(|e| {
                let post = laplace.posterior(e, hyper.sigma[e], hyper.temperature[e])?;
                laplace_exit_probs(bundle, &post, e, rows, sampling)
            })
            .collect::<Result<_>>()?,
    };
    let probs = match method {
        Method::Mie | Method::MieLaplace => ensemble_predictions(&base, &bundle.exit_flops)?,
        _ => base,
    };
    Ok(ExitPredictions {
        method,
        rows: rows.to_vec(),
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn overhead_flags() {
        assert_eq!(
            Method::Vanilla.overheads(),
            Overheads {
                laplace: false,
                mie: false
            }
        );
        assert_eq!(
            Method::MieLaplace.overheads(),
            Overheads {
                laplace: true,
                mie: true
            }
        );
    }

    #[test]
    fn ensemble_transpose_matches_prefixes() {
        let per_exit = vec![
            vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            vec![vec![0.0, 1.0], vec![0.5, 0.5]],
        ];
        let out = ensemble_predictions(&per_exit, &[1.0, 3.0]).unwrap();
        assert_eq!(out[0], per_exit[0]);
        assert_eq!(out[1][0], vec![0.25, 0.75]);
        assert_eq!(out[1][1], vec![0.5, 0.5]);
    }
}
