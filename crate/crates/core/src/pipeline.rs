//! End-to-end experiment: generate data, train the toy backbone, extract a
//! bundle, fit per-exit Laplace posteriors, calibrate, sweep budgets and
//! write the CSV artifacts.
//!
//! Every stage is a pure function of the [`RunConfig`]; sub-seeds are
//! derived from the single run seed by component name.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{extract_features, gen_synthetic, train_toy, SyntheticDataset, ToyModel, ToyModelConfig};
use crate::budget::{budget_grid, sweep_budgets, CostModel, CurveRecord, SweepMode};
use crate::bundle::{FeatureBundle, Split};
use crate::calibration::{CalibrationResult, Calibrator, HyperGrid, SearchMode};
use crate::error::{Error, Result};
use crate::flops::{overhead_report, Convention, OverheadRow};
use crate::format::{
    quantize_bundle, write_calibration_csv, write_curves_csv, write_json, write_overhead_csv, write_scatter_csv,
    Artifacts,
};
use crate::laplace::DEFAULT_N_MC;
use crate::metrics::{scatter_export, ExitPredictionsRef, ScatterRow, ScatterSummary};
use crate::numerics::{derive_seed, GaussianStream};
use crate::predict::{predict_method, ExitPredictions, HyperParams, LaplaceModel, Method, SamplingConfig};

/// A budget-curve mode: decide exits with one method, optionally report the
/// predictions of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeSpec {
    pub decide: Method,
    pub score: Option<Method>,
}

impl ModeSpec {
    pub fn pure(method: Method) -> Self {
        Self {
            decide: method,
            score: None,
        }
    }

    pub fn cross(decide: Method, score: Method) -> Self {
        Self {
            decide,
            score: Some(score),
        }
    }

    pub fn score_method(&self) -> Method {
        self.score.unwrap_or(self.decide)
    }
}

impl fmt::Display for ModeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.score {
            Some(s) if s != self.decide => write!(f, "{}>{}", self.decide, s),
            _ => write!(f, "{}", self.decide),
        }
    }
}

/// `method` or `decide>score`.
impl FromStr for ModeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('>') {
            Some((d, sc)) => Ok(ModeSpec::cross(d.trim().parse()?, sc.trim().parse()?)),
            None => Ok(ModeSpec::pure(s.trim().parse()?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_samples: usize,
    pub cluster_spread: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            cluster_spread: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// The model seed is overwritten by one derived from `seed`.
    pub model: ToyModelConfig,
    pub n_mc: usize,
    pub shared_draws: bool,
    pub grid: HyperGrid,
    pub modes: Vec<ModeSpec>,
    /// Explicit budgets; when empty, `n_budgets` points spanning the exits.
    pub budgets: Vec<f64>,
    pub n_budgets: usize,
    /// Method whose test predictions go to the scatter export.
    pub scatter_method: Method,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed,
            data: DataConfig::default(),
            model: ToyModelConfig::default(),
            n_mc: DEFAULT_N_MC,
            shared_draws: false,
            grid: HyperGrid::default(),
            modes: default_modes(),
            budgets: Vec::new(),
            n_budgets: 20,
            scatter_method: Method::Laplace,
            out_dir: out_dir.into(),
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            n_mc: self.n_mc,
            stream: GaussianStream::new(derive_seed(self.seed, "mc")),
            shared_draws: self.shared_draws,
        }
    }

    pub fn model_config(&self) -> ToyModelConfig {
        ToyModelConfig {
            seed: derive_seed(self.seed, "model"),
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mc == 0 {
            return Err(Error::invalid("n_MC must be at least 1"));
        }
        if self.modes.is_empty() {
            return Err(Error::invalid("no modes to sweep"));
        }
        if self.budgets.is_empty() && self.n_budgets == 0 {
            return Err(Error::invalid("no budgets to sweep"));
        }
        self.grid.validate()?;
        self.model.validate()
    }
}

/// The four pure methods plus deciding with MIE-Laplace while reporting the
/// vanilla predictions.
pub fn default_modes() -> Vec<ModeSpec> {
    let mut modes: Vec<ModeSpec> = Method::ALL.into_iter().map(ModeSpec::pure).collect();
    modes.push(ModeSpec::cross(Method::MieLaplace, Method::Vanilla));
    modes
}

pub fn stage_data(cfg: &RunConfig) -> Result<SyntheticDataset> {
    gen_synthetic(
        derive_seed(cfg.seed, "data"),
        cfg.data.n_samples,
        cfg.model.d,
        cfg.model.c,
        cfg.data.cluster_spread,
    )
}

pub fn stage_train(cfg: &RunConfig, data: &SyntheticDataset) -> Result<ToyModel> {
    Ok(train_toy(&cfg.model_config(), data)?.0)
}

/// Feature bundle at the precision it would have after a write/load cycle,
/// so that file-based and in-memory runs agree.
pub fn stage_extract(model: &ToyModel, data: &SyntheticDataset) -> Result<FeatureBundle> {
    Ok(quantize_bundle(&extract_features(model, data)?))
}

/// Calibration used by each Laplace-based method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrations {
    pub independent: CalibrationResult,
    pub sequential: CalibrationResult,
}

impl Calibrations {
    pub fn run(calibrator: &Calibrator<'_>, grid: &HyperGrid) -> Result<Self> {
        Ok(Self {
            independent: calibrator.calibrate(grid, SearchMode::Independent)?,
            sequential: calibrator.calibrate(grid, SearchMode::SequentialMie)?,
        })
    }

    pub fn hyper_for(&self, method: Method, n_exits: usize) -> HyperParams {
        match method {
            Method::Laplace => self.independent.hyper_params(),
            Method::MieLaplace => self.sequential.hyper_params(),
            Method::Vanilla | Method::Mie => HyperParams::defaults(n_exits),
        }
    }
}

/// Everything downstream of a bundle.
pub struct Experiment<'a> {
    pub bundle: &'a FeatureBundle,
    pub laplace: LaplaceModel,
    pub sampling: SamplingConfig,
    pub calibrations: Calibrations,
}

impl<'a> Experiment<'a> {
    pub fn fit(bundle: &'a FeatureBundle, sampling: SamplingConfig, grid: &HyperGrid) -> Result<Self> {
        bundle.validate()?;
        let laplace = LaplaceModel::fit(bundle)?;
        let calibrations = Calibrations::run(&Calibrator::new(bundle, &laplace, sampling)?, grid)?;
        Ok(Self {
            bundle,
            laplace,
            sampling,
            calibrations,
        })
    }

    /// Reuses calibrations computed earlier.
    pub fn with_calibrations(
        bundle: &'a FeatureBundle,
        sampling: SamplingConfig,
        calibrations: Calibrations,
    ) -> Result<Self> {
        bundle.validate()?;
        let n = bundle.n_exits();
        for r in [&calibrations.independent, &calibrations.sequential] {
            if r.exits.len() != n {
                return Err(Error::invalid(format!(
                    "{} calibration covers {} exits, bundle has {n}",
                    r.mode,
                    r.exits.len()
                )));
            }
        }
        Ok(Self {
            bundle,
            laplace: LaplaceModel::fit(bundle)?,
            sampling,
            calibrations,
        })
    }

    pub fn predict(&self, method: Method, split: Split) -> Result<ExitPredictions> {
        let hyper = self.calibrations.hyper_for(method, self.bundle.n_exits());
        predict_method(
            self.bundle,
            &self.laplace,
            method,
            &hyper,
            &self.bundle.rows(split),
            &self.sampling,
        )
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel {
            arch: self.bundle.arch(),
            n_mc: self.sampling.n_mc as u64,
            convention: Convention::Practical,
        }
    }

    /// Val and test predictions of every method any mode needs.
    pub fn prediction_sets(&self, modes: &[ModeSpec]) -> Result<PredictionSets> {
        let mut val = BTreeMap::new();
        let mut test = BTreeMap::new();
        for m in modes {
            for method in [m.decide, m.score_method()] {
                if let std::collections::btree_map::Entry::Vacant(slot) = test.entry(method) {
                    slot.insert(self.predict(method, Split::Test)?);
                    val.insert(method, self.predict(method, Split::Val)?);
                }
            }
        }
        Ok(PredictionSets { val, test })
    }

    pub fn sweep(&self, sets: &PredictionSets, modes: &[ModeSpec], budgets: &[f64]) -> Result<Vec<CurveRecord>> {
        let sweep_modes: Vec<SweepMode<'_>> = modes
            .iter()
            .map(|m| SweepMode {
                val: &sets.val[&m.decide],
                test: &sets.test[&m.decide],
                score: m.score.map(|s| &sets.test[&s]),
            })
            .collect();
        let labels = self.bundle.labels_of(&self.bundle.rows(Split::Test));
        sweep_budgets(&sweep_modes, budgets, &self.cost_model(), &labels)
    }

    pub fn scatter(&self, preds: &ExitPredictions) -> Result<(Vec<ScatterRow>, Vec<ScatterSummary>)> {
        let labels = self.bundle.labels_of(&preds.rows);
        let refs: Vec<ExitPredictionsRef<'_, Vec<f64>>> = preds
            .probs
            .iter()
            .enumerate()
            .map(|(k, p)| ExitPredictionsRef {
                exit: k + 1,
                sample_ids: &preds.rows,
                preds: p,
                labels: &labels,
            })
            .collect();
        scatter_export(&refs)
    }

    pub fn overhead(&self) -> Vec<OverheadRow> {
        overhead_report(&self.bundle.arch(), self.sampling.n_mc as u64, Convention::Practical)
    }
}

pub struct PredictionSets {
    pub val: BTreeMap<Method, ExitPredictions>,
    pub test: BTreeMap<Method, ExitPredictions>,
}

/// Headline numbers of a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub exit_flops: Vec<f64>,
    pub budgets: Vec<f64>,
    pub curves: Vec<CurveRecord>,
    pub scatter_summary: Vec<ScatterSummary>,
    pub calibrations: Calibrations,
    pub artifacts: Vec<PathBuf>,
}

/// A failure tagged with the stage it happened in.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage '{}' failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage: name, source })
    }
}

/// Budgets to sweep for `bundle`.
pub fn resolve_budgets(cfg: &RunConfig, bundle: &FeatureBundle) -> Result<Vec<f64>> {
    if cfg.budgets.is_empty() {
        budget_grid(&bundle.exit_flops, cfg.n_budgets)
    } else {
        Ok(cfg.budgets.clone())
    }
}

/// Runs every stage from a bundle onwards and writes the artifacts.
pub fn run_from_bundle(cfg: &RunConfig, bundle: &FeatureBundle) -> Result<RunSummary, StageError> {
    let exp = Experiment::fit(bundle, cfg.sampling(), &cfg.grid).stage("calibrate")?;
    let budgets = resolve_budgets(cfg, bundle).stage("sweep")?;
    let sets = exp.prediction_sets(&cfg.modes).stage("predict")?;
    let curves = exp.sweep(&sets, &cfg.modes, &budgets).stage("sweep")?;
    let scatter_preds = match sets.test.get(&cfg.scatter_method) {
        Some(p) => p.clone(),
        None => exp.predict(cfg.scatter_method, Split::Test).stage("predict")?,
    };
    let (scatter_rows, scatter_summary) = exp.scatter(&scatter_preds).stage("scatter")?;
    let overhead = exp.overhead();

    let out = Artifacts::new(&cfg.out_dir);
    let write = || -> Result<()> {
        out.ensure_dir()?;
        write_curves_csv(&out.curves(), &curves)?;
        write_scatter_csv(&out.scatter(), &scatter_rows)?;
        write_overhead_csv(&out.overhead(), &overhead)?;
        let results = [
            exp.calibrations.independent.clone(),
            exp.calibrations.sequential.clone(),
        ];
        write_calibration_csv(&out.calibration_csv(), &results)?;
        write_json(&out.calibration_json(), &exp.calibrations)
    };
    write().stage("write")?;
    let mut artifacts = out.csv_files();
    artifacts.push(out.calibration_json());
    Ok(RunSummary {
        exit_flops: bundle.exit_flops.clone(),
        budgets,
        curves,
        scatter_summary,
        calibrations: exp.calibrations.clone(),
        artifacts,
    })
}

/// The whole pipeline starting from synthetic data.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary, StageError> {
    cfg.validate().stage("config")?;
    let data = stage_data(cfg).stage("generate")?;
    let model = stage_train(cfg, &data).stage("train")?;
    let bundle = stage_extract(&model, &data).stage("extract")?;
    run_from_bundle(cfg, &bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_spec_parsing() {
        assert_eq!("laplace".parse::<ModeSpec>().unwrap(), ModeSpec::pure(Method::Laplace));
        let m: ModeSpec = "mie-laplace>vanilla".parse().unwrap();
        assert_eq!(m, ModeSpec::cross(Method::MieLaplace, Method::Vanilla));
        assert_eq!(m.to_string(), "mie-laplace>vanilla");
        assert!("mie>bogus".parse::<ModeSpec>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::new(1, "out");
        cfg.validate().unwrap();
        cfg.modes.clear();
        assert!(cfg.validate().is_err());
    }
}
