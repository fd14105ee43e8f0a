//! Per-exit choice of temperature `T` and prior scale `σ` by validation NLPD.
//!
//! Every `(T, σ)` pair of a [`HyperGrid`] is scored and the minimum wins,
//! ties going to the smaller `T` and then the smaller `σ`. For one `σ` the
//! Monte-Carlo draws do not depend on `T`, so each `σ` is sampled once and
//! re-tempered for every `T`; the draws are keyed exactly as at deployment,
//! which makes a calibrated prediction identical to the one later evaluated.
//!
//! Sequential search calibrates the ensemble: exit `k` is scored by the NLPD
//! of the running ensemble of exits `1..=k`, with earlier exits fixed at
//! their already chosen values.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{FeatureBundle, Split};
use crate::ensemble::MieState;
use crate::error::{Error, Result};
use crate::laplace::{sample_efficient_tempered, DrawSource, SharedDraws};
use crate::metrics::nlpd;
use crate::numerics::ProbVector;
use crate::predict::{
    vanilla_exit_probs, HyperParams, LaplaceModel, SamplingConfig, DEFAULT_SIGMA, DEFAULT_TEMPERATURE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub temperatures: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            temperatures: vec![0.3, 0.5, 0.7, 1.0, 1.3, 1.5, 1.7, 2.0, 2.5, 3.0],
            sigmas: vec![0.5, 0.7, 1.0, 1.3, 1.5, 1.7, 2.0, 2.5, 3.0, 4.0],
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, values) in [("temperature", &self.temperatures), ("sigma", &self.sigmas)] {
            if values.is_empty() {
                return Err(Error::invalid(format!("{name} grid is empty")));
            }
            if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::invalid(format!("{name} grid values must be positive")));
            }
        }
        Ok(())
    }

    /// The grid actually searched under `mode`.
    pub fn restricted(&self, mode: SearchMode) -> HyperGrid {
        match mode {
            SearchMode::Independent | SearchMode::SequentialMie => self.clone(),
            SearchMode::TemperatureOnly => HyperGrid {
                temperatures: self.temperatures.clone(),
                sigmas: vec![DEFAULT_SIGMA],
            },
            SearchMode::SigmaOnly => HyperGrid {
                temperatures: vec![DEFAULT_TEMPERATURE],
                sigmas: self.sigmas.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// Each exit on its own predictive.
    Independent,
    /// Each exit on the running ensemble up to it.
    SequentialMie,
    /// `T` only, `σ` fixed at its default.
    TemperatureOnly,
    /// `σ` only, `T = 1`.
    SigmaOnly,
}

impl SearchMode {
    pub const ALL: [SearchMode; 4] = [
        SearchMode::Independent,
        SearchMode::SequentialMie,
        SearchMode::TemperatureOnly,
        SearchMode::SigmaOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SearchMode::Independent => "independent",
            SearchMode::SequentialMie => "sequential-mie",
            SearchMode::TemperatureOnly => "temperature-only",
            SearchMode::SigmaOnly => "sigma-only",
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SearchMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown search mode '{s}'")))
    }
}

/// Chosen hyperparameters of one exit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitChoice {
    /// 1-based.
    pub exit: usize,
    pub temperature: f64,
    /// `None` for the deterministic head.
    pub sigma: Option<f64>,
    /// Validation NLPD at the chosen values.
    pub nlpd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub mode: SearchMode,
    pub exits: Vec<ExitChoice>,
}

impl CalibrationResult {
    /// Per-exit `(T, σ)`; a missing `σ` falls back to the default.
    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            temperature: self.exits.iter().map(|e| e.temperature).collect(),
            sigma: self.exits.iter().map(|e| e.sigma.unwrap_or(DEFAULT_SIGMA)).collect(),
        }
    }
}

/// Which head a temperature-only search scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    Vanilla,
    Laplace,
}

/// Scored grid: `nlpd[t][s]`, indices into the searched grid.
struct ScoredGrid {
    grid: HyperGrid,
    nlpd: Vec<Vec<f64>>,
}

impl ScoredGrid {
    /// Minimum NLPD; ties go to the smaller `T`, then the smaller `σ`.
    fn best(&self) -> (usize, usize) {
        let mut order_t: Vec<usize> = (0..self.grid.temperatures.len()).collect();
        order_t.sort_by(|&a, &b| self.grid.temperatures[a].total_cmp(&self.grid.temperatures[b]));
        let mut order_s: Vec<usize> = (0..self.grid.sigmas.len()).collect();
        order_s.sort_by(|&a, &b| self.grid.sigmas[a].total_cmp(&self.grid.sigmas[b]));
        let mut best = (order_t[0], order_s[0]);
        for &ti in &order_t {
            for &si in &order_s {
                if self.nlpd[ti][si] < self.nlpd[best.0][best.1] {
                    best = (ti, si);
                }
            }
        }
        best
    }
}

/// Validation-split calibration of one bundle.
pub struct Calibrator<'a> {
    bundle: &'a FeatureBundle,
    laplace: &'a LaplaceModel,
    sampling: SamplingConfig,
    rows: Vec<usize>,
    labels: Vec<usize>,
}

impl<'a> Calibrator<'a> {
    pub fn new(bundle: &'a FeatureBundle, laplace: &'a LaplaceModel, sampling: SamplingConfig) -> Result<Self> {
        let rows = bundle.rows(Split::Val);
        if rows.is_empty() {
            return Err(Error::invalid("validation split is empty"));
        }
        if laplace.n_exits() != bundle.n_exits() {
            return Err(Error::invalid("Laplace model and bundle differ in exit count"));
        }
        let labels = bundle.labels_of(&rows);
        Ok(Self {
            bundle,
            laplace,
            sampling,
            rows,
            labels,
        })
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Laplace validation predictions of `exit` (0-based) at prior `sigma`,
    /// one set per temperature: `out[t][position]`.
    pub fn laplace_val_probs(&self, exit: usize, sigma: f64, temps: &[f64]) -> Result<Vec<Vec<ProbVector>>> {
        let post = self.laplace.posterior(exit, sigma, DEFAULT_TEMPERATURE)?;
        let s = &self.sampling;
        let shared = s
            .shared_draws
            .then(|| SharedDraws::new(&post, &s.stream, exit as u32, s.n_mc));
        let features = &self.bundle.exits[exit].features;
        let per_row: Vec<Vec<ProbVector>> = self
            .rows
            .par_iter()
            .map(|&i| {
                let pred = post.predictive(features.row(i))?;
                let source = match &shared {
                    Some(sh) => DrawSource::Shared(sh),
                    None => DrawSource::Keyed {
                        stream: s.stream,
                        sample: i as u64,
                        exit: exit as u32,
                    },
                };
                sample_efficient_tempered(&pred, s.n_mc, source, temps)
            })
            .collect::<Result<_>>()?;
        Ok(transpose(per_row, temps.len()))
    }

    /// Scores every grid point with `score` applied to the validation
    /// predictions of `exit`.
    fn score_grid(
        &self,
        exit: usize,
        grid: &HyperGrid,
        score: impl Fn(&[ProbVector]) -> Result<f64>,
    ) -> Result<ScoredGrid> {
        grid.validate()?;
        let mut table = vec![vec![f64::NAN; grid.sigmas.len()]; grid.temperatures.len()];
        for (si, &sigma) in grid.sigmas.iter().enumerate() {
            let per_t = self.laplace_val_probs(exit, sigma, &grid.temperatures)?;
            for (ti, preds) in per_t.iter().enumerate() {
                table[ti][si] = score(preds)?;
            }
        }
        Ok(ScoredGrid {
            grid: grid.clone(),
            nlpd: table,
        })
    }

    fn choice(&self, exit: usize, scored: &ScoredGrid) -> ExitChoice {
        let (ti, si) = scored.best();
        ExitChoice {
            exit: exit + 1,
            temperature: scored.grid.temperatures[ti],
            sigma: Some(scored.grid.sigmas[si]),
            nlpd: scored.nlpd[ti][si],
        }
    }

    /// Searches the grid for one exit (0-based) scored on its own predictive.
    pub fn grid_search_exit(&self, exit: usize, grid: &HyperGrid, mode: SearchMode) -> Result<ExitChoice> {
        if mode == SearchMode::SequentialMie {
            return Err(Error::invalid("sequential search covers all exits at once"));
        }
        let grid = grid.restricted(mode);
        let scored = self.score_grid(exit, &grid, |p| nlpd(p, &self.labels))?;
        Ok(self.choice(exit, &scored))
    }

    /// Runs `mode` on every exit.
    pub fn calibrate(&self, grid: &HyperGrid, mode: SearchMode) -> Result<CalibrationResult> {
        let exits = match mode {
            SearchMode::SequentialMie => return self.grid_search_sequential_mie(grid),
            _ => (0..self.bundle.n_exits())
                .map(|k| self.grid_search_exit(k, grid, mode))
                .collect::<Result<_>>()?,
        };
        Ok(CalibrationResult { mode, exits })
    }

    /// Chooses `(T, σ)` exit by exit, scoring each on the running ensemble.
    pub fn grid_search_sequential_mie(&self, grid: &HyperGrid) -> Result<CalibrationResult> {
        let c = self.bundle.n_classes;
        let mut states: Vec<MieState> = vec![MieState::new(c); self.rows.len()];
        let mut exits = Vec::with_capacity(self.bundle.n_exits());
        for k in 0..self.bundle.n_exits() {
            let w = self.bundle.exit_flops[k];
            let scored = self.score_grid(k, grid, |preds| {
                let ens = ensemble_with(&states, preds, w)?;
                nlpd(&ens, &self.labels)
            })?;
            let choice = self.choice(k, &scored);
            let chosen = self.laplace_val_probs(k, choice.sigma.unwrap_or(DEFAULT_SIGMA), &[choice.temperature])?;
            for (state, p) in states.iter_mut().zip(&chosen[0]) {
                state.push(p, w)?;
            }
            exits.push(choice);
        }
        Ok(CalibrationResult {
            mode: SearchMode::SequentialMie,
            exits,
        })
    }

    /// Temperature scaling alone on the deterministic or the Laplace head.
    pub fn temperature_only(&self, exit: usize, grid: &HyperGrid, predictor: Predictor) -> Result<ExitChoice> {
        match predictor {
            Predictor::Laplace => self.grid_search_exit(exit, grid, SearchMode::TemperatureOnly),
            Predictor::Vanilla => {
                grid.validate()?;
                let mut best: Option<ExitChoice> = None;
                let mut temps = grid.temperatures.clone();
                temps.sort_by(f64::total_cmp);
                for t in temps {
                    let preds = vanilla_exit_probs(self.bundle, exit, &self.rows, t)?;
                    let score = nlpd(&preds, &self.labels)?;
                    if best.is_none_or(|b| score < b.nlpd) {
                        best = Some(ExitChoice {
                            exit: exit + 1,
                            temperature: t,
                            sigma: None,
                            nlpd: score,
                        });
                    }
                }
                Ok(best.expect("grid is non-empty"))
            }
        }
    }
}

fn transpose(per_row: Vec<Vec<ProbVector>>, n_cols: usize) -> Vec<Vec<ProbVector>> {
    let mut out: Vec<Vec<ProbVector>> = (0..n_cols).map(|_| Vec::with_capacity(per_row.len())).collect();
    for row in per_row {
        for (col, p) in out.iter_mut().zip(row) {
            col.push(p);
        }
    }
    out
}

fn ensemble_with(states: &[MieState], preds: &[ProbVector], weight: f64) -> Result<Vec<ProbVector>> {
    states
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let mut s = s.clone();
            s.push(p, weight)?;
            s.current()
        })
        .collect()
}

/// Independent per-exit search for one exit (0-based).
pub fn grid_search_exit(
    bundle: &FeatureBundle,
    laplace: &LaplaceModel,
    sampling: SamplingConfig,
    exit: usize,
    grid: &HyperGrid,
) -> Result<ExitChoice> {
    Calibrator::new(bundle, laplace, sampling)?.grid_search_exit(exit, grid, SearchMode::Independent)
}

pub fn grid_search_sequential_mie(
    bundle: &FeatureBundle,
    laplace: &LaplaceModel,
    sampling: SamplingConfig,
    grid: &HyperGrid,
) -> Result<CalibrationResult> {
    Calibrator::new(bundle, laplace, sampling)?.grid_search_sequential_mie(grid)
}

pub fn temperature_only(
    bundle: &FeatureBundle,
    laplace: &LaplaceModel,
    sampling: SamplingConfig,
    exit: usize,
    grid: &HyperGrid,
    predictor: Predictor,
) -> Result<ExitChoice> {
    Calibrator::new(bundle, laplace, sampling)?.temperature_only(exit, grid, predictor)
}
