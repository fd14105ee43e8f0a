use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use exitcal::backbone::{train_toy, SyntheticDataset, ToyModel};
use exitcal::bundle::Split;
use exitcal::calibration::{CalibrationResult, Calibrator, HyperGrid, SearchMode};
use exitcal::flops::{flops_efficient, flops_naive, overhead_report, Convention, ExitShape};
use exitcal::format::{
    load_bundle, read_json, write_bundle, write_calibration_csv, write_curves_csv, write_json, write_overhead_csv,
    write_posterior, write_scatter_csv,
};
use exitcal::pipeline::{
    default_modes, resolve_budgets, run_pipeline, stage_data, stage_extract, Calibrations, Experiment, ModeSpec,
    RunConfig,
};
use exitcal::predict::{LaplaceModel, Method, DEFAULT_SIGMA, DEFAULT_TEMPERATURE};
use exitcal::{Error, Result};

#[derive(Parser)]
#[command(
    name = "exitcal",
    version,
    about = "Uncertainty quantification for early-exit classifiers"
)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed every random component derives from.
    #[arg(long, global = true, env = "EXITCAL_SEED", default_value_t = 1)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SamplingArgs {
    /// Monte-Carlo samples per prediction.
    #[arg(long, default_value_t = 50)]
    n_mc: usize,

    /// Share one set of pre-multiplied draws across all samples of an exit.
    #[arg(long)]
    shared_draws: bool,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Comma-separated temperature grid.
    #[arg(long, value_delimiter = ',')]
    temperatures: Option<Vec<f64>>,

    /// Comma-separated prior-scale grid.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
}

impl GridArgs {
    fn grid(&self) -> HyperGrid {
        let d = HyperGrid::default();
        HyperGrid {
            temperatures: self.temperatures.clone().unwrap_or(d.temperatures),
            sigmas: self.sigmas.clone().unwrap_or(d.sigmas),
        }
    }
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// Modes to sweep: a method, or `decide>score` for cross-decision.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<ModeSpec>>,

    /// Decide exits with this method (cross-decision curve).
    #[arg(long, requires = "score_mode")]
    decide_mode: Option<Method>,

    /// Report predictions of this method (cross-decision curve).
    #[arg(long, requires = "decide_mode")]
    score_mode: Option<Method>,

    /// Explicit budgets in FLOPs per sample.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,

    /// Number of evenly spaced budgets when none are given.
    #[arg(long, default_value_t = 20)]
    n_budgets: usize,
}

impl SweepArgs {
    fn modes(&self) -> Vec<ModeSpec> {
        let mut modes = self.modes.clone().unwrap_or_else(default_modes);
        if let (Some(d), Some(s)) = (self.decide_mode, self.score_mode) {
            let m = ModeSpec::cross(d, s);
            if !modes.contains(&m) {
                modes.push(m);
            }
        }
        modes
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clustered dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        c: usize,
        /// Cluster spread; smaller separates the classes more.
        #[arg(long, default_value_t = 0.4)]
        spread: f64,
    },
    /// Train the toy multi-exit backbone.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        /// Comma-separated block widths, one per exit.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
    },
    /// Extract a feature bundle from a trained model.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-exit Laplace posteriors and write them.
    Fit {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        temperature: f64,
    },
    /// Grid-search per-exit temperature and prior scale on validation data.
    Calibrate {
        #[arg(long)]
        bundle: PathBuf,
        /// Output directory for calibration.json and calibration.csv.
        #[arg(long)]
        out: PathBuf,
        /// Additional search modes to report in the CSV.
        #[arg(long, value_delimiter = ',')]
        extra_modes: Vec<CliSearchMode>,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Budget sweep over the test split.
    Sweep {
        #[arg(long)]
        bundle: PathBuf,
        /// calibration.json from `calibrate`; recomputed when absent.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sweep: SweepArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Laplace sampling overhead per exit.
    FlopsReport {
        /// Bundle whose architecture to report.
        #[arg(long, conflicts_with = "p")]
        bundle: Option<PathBuf>,
        /// Feature dimension for a single closed-form evaluation.
        #[arg(long, requires = "c")]
        p: Option<u64>,
        #[arg(long, requires = "p")]
        c: Option<u64>,
        #[arg(long, default_value_t = 50)]
        n_mc: u64,
        #[arg(long, value_enum, default_value_t = CliConvention::Practical)]
        convention: CliConvention,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy/error scatter of test predictions.
    Scatter {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long, default_value = "laplace")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Run everything end to end.
    Demo {
        #[arg(long, default_value = "exitcal-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Cluster spread; smaller separates the classes more.
        #[arg(long, default_value_t = 0.4)]
        spread: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        /// Method whose test predictions go to scatter.csv.
        #[arg(long, default_value = "laplace")]
        scatter_method: Method,
        #[command(flatten)]
        sweep: SweepArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CliConvention {
    Raw,
    Practical,
}

impl From<CliConvention> for Convention {
    fn from(c: CliConvention) -> Self {
        match c {
            CliConvention::Raw => Convention::Raw,
            CliConvention::Practical => Convention::Practical,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CliSearchMode {
    Independent,
    SequentialMie,
    TemperatureOnly,
    SigmaOnly,
}

impl From<CliSearchMode> for SearchMode {
    fn from(m: CliSearchMode) -> Self {
        match m {
            CliSearchMode::Independent => SearchMode::Independent,
            CliSearchMode::SequentialMie => SearchMode::SequentialMie,
            CliSearchMode::TemperatureOnly => SearchMode::TemperatureOnly,
            CliSearchMode::SigmaOnly => SearchMode::SigmaOnly,
        }
    }
}

fn run_config(seed: u64, out: &Path, sampling: &SamplingArgs, grid: &GridArgs) -> RunConfig {
    let mut cfg = RunConfig::new(seed, out);
    cfg.n_mc = sampling.n_mc;
    cfg.shared_draws = sampling.shared_draws;
    cfg.grid = grid.grid();
    cfg
}

fn experiment<'a>(
    bundle: &'a exitcal::bundle::FeatureBundle,
    cfg: &RunConfig,
    calibration: Option<&Path>,
) -> Result<Experiment<'a>> {
    match calibration {
        Some(path) => Experiment::with_calibrations(bundle, cfg.sampling(), read_json::<Calibrations>(path)?),
        None => Experiment::fit(bundle, cfg.sampling(), &cfg.grid),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> std::result::Result<(), (String, Error)> {
    let seed = cli.seed;
    let stage = |name: &str| {
        let name = name.to_string();
        move |e: Error| (name, e)
    };
    match cli.command {
        Command::Gen { out, n, d, c, spread } => {
            let mut cfg = RunConfig::new(seed, ".");
            cfg.data.n_samples = n;
            cfg.data.cluster_spread = spread;
            cfg.model.d = d;
            cfg.model.c = c;
            let data = stage_data(&cfg).map_err(stage("generate"))?;
            create_parent(&out).map_err(stage("generate"))?;
            write_json(&out, &data).map_err(stage("generate"))?;
            println!(
                "{} samples: {} train / {} val / {} test",
                data.len(),
                data.rows(Split::Train).len(),
                data.rows(Split::Val).len(),
                data.rows(Split::Test).len()
            );
        }
        Command::Train {
            data,
            out,
            epochs,
            learning_rate,
            weight_decay,
            widths,
        } => {
            let data: SyntheticDataset = read_json(&data).map_err(stage("train"))?;
            let mut cfg = RunConfig::new(seed, ".");
            cfg.model.d = data.input_dim();
            cfg.model.c = data.n_classes;
            cfg.model.epochs = epochs;
            cfg.model.learning_rate = learning_rate;
            cfg.model.weight_decay = weight_decay;
            if let Some(w) = widths {
                cfg.model.widths = w;
            }
            let (model, history) = train_toy(&cfg.model_config(), &data).map_err(stage("train"))?;
            create_parent(&out).map_err(stage("train"))?;
            write_json(&out, &model).map_err(stage("train"))?;
            println!(
                "best epoch {} with last-exit val top-1 {:.2}%",
                history.best_epoch, history.val_top1_last[history.best_epoch]
            );
        }
        Command::Extract { data, model, out } => {
            let data: SyntheticDataset = read_json(&data).map_err(stage("extract"))?;
            let model: ToyModel = read_json(&model).map_err(stage("extract"))?;
            let bundle = stage_extract(&model, &data).map_err(stage("extract"))?;
            write_bundle(&out, &bundle).map_err(stage("extract"))?;
            println!("exit FLOPs: {:?}", bundle.exit_flops);
        }
        Command::Fit {
            bundle,
            out,
            sigma,
            temperature,
        } => {
            let bundle = load_bundle(&bundle).map_err(stage("load"))?;
            let laplace = LaplaceModel::fit(&bundle).map_err(stage("fit"))?;
            for k in 0..bundle.n_exits() {
                let post = laplace.posterior(k, sigma, temperature).map_err(stage("fit"))?;
                write_posterior(&out.join(format!("exit{}", k + 1)), k + 1, &post).map_err(stage("fit"))?;
            }
            println!("wrote {} posteriors to {}", bundle.n_exits(), out.display());
        }
        Command::Calibrate {
            bundle,
            out,
            extra_modes,
            sampling,
            grid,
        } => {
            let bundle = load_bundle(&bundle).map_err(stage("load"))?;
            let cfg = run_config(seed, &out, &sampling, &grid);
            let laplace = LaplaceModel::fit(&bundle).map_err(stage("fit"))?;
            let calibrator = Calibrator::new(&bundle, &laplace, cfg.sampling()).map_err(stage("calibrate"))?;
            let cals = Calibrations::run(&calibrator, &cfg.grid).map_err(stage("calibrate"))?;
            let mut results: Vec<CalibrationResult> = vec![cals.independent.clone(), cals.sequential.clone()];
            for m in extra_modes {
                let mode = SearchMode::from(m);
                if results.iter().all(|r| r.mode != mode) {
                    results.push(calibrator.calibrate(&cfg.grid, mode).map_err(stage("calibrate"))?);
                }
            }
            let write = || -> Result<()> {
                std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
                write_json(&out.join("calibration.json"), &cals)?;
                write_calibration_csv(&out.join("calibration.csv"), &results)
            };
            write().map_err(stage("write"))?;
            for r in &results {
                for e in &r.exits {
                    println!(
                        "{:<16} exit {}  T={:<4} sigma={:<4} nlpd={:.4}",
                        r.mode.name(),
                        e.exit,
                        e.temperature,
                        e.sigma.map_or("-".into(), |s| s.to_string()),
                        e.nlpd
                    );
                }
            }
        }
        Command::Sweep {
            bundle,
            calibration,
            out,
            sweep,
            sampling,
            grid,
        } => {
            let bundle = load_bundle(&bundle).map_err(stage("load"))?;
            let mut cfg = run_config(seed, &out, &sampling, &grid);
            cfg.modes = sweep.modes();
            cfg.budgets = sweep.budgets.clone().unwrap_or_default();
            cfg.n_budgets = sweep.n_budgets;
            let exp = experiment(&bundle, &cfg, calibration.as_deref()).map_err(stage("calibrate"))?;
            let budgets = resolve_budgets(&cfg, &bundle).map_err(stage("sweep"))?;
            let sets = exp.prediction_sets(&cfg.modes).map_err(stage("predict"))?;
            let curves = exp.sweep(&sets, &cfg.modes, &budgets).map_err(stage("sweep"))?;
            create_parent(&out).map_err(stage("write"))?;
            write_curves_csv(&out, &curves).map_err(stage("write"))?;
            println!("wrote {} curve points to {}", curves.len(), out.display());
        }
        Command::FlopsReport {
            bundle,
            p,
            c,
            n_mc,
            convention,
            out,
        } => {
            let conv = Convention::from(convention);
            if let (Some(p), Some(c)) = (p, c) {
                let naive = flops_naive(p, c, n_mc, conv);
                let eff = flops_efficient(p, c, n_mc, conv);
                println!("naive {naive}  efficient {eff}  ratio {:.3}", naive as f64 / eff as f64);
                return Ok(());
            }
            let arch: Vec<ExitShape> = match bundle {
                Some(path) => load_bundle(&path).map_err(stage("load"))?.arch(),
                None => {
                    return Err((
                        "flops-report".into(),
                        Error::InvalidArgument("pass --bundle or both --p and --c".into()),
                    ))
                }
            };
            let rows = overhead_report(&arch, n_mc, conv);
            for r in &rows {
                println!(
                    "exit {}  backbone {:>10.0}  naive {:>8} ({:.3})  efficient {:>8} ({:.3})",
                    r.exit, r.backbone_flops, r.naive_overhead, r.naive_rel, r.efficient_overhead, r.efficient_rel
                );
            }
            if let Some(out) = out {
                create_parent(&out).map_err(stage("write"))?;
                write_overhead_csv(&out, &rows).map_err(stage("write"))?;
            }
        }
        Command::Scatter {
            bundle,
            calibration,
            method,
            out,
            sampling,
            grid,
        } => {
            let bundle = load_bundle(&bundle).map_err(stage("load"))?;
            let cfg = run_config(seed, &out, &sampling, &grid);
            let exp = experiment(&bundle, &cfg, calibration.as_deref()).map_err(stage("calibrate"))?;
            let preds = exp.predict(method, Split::Test).map_err(stage("predict"))?;
            let (rows, summary) = exp.scatter(&preds).map_err(stage("scatter"))?;
            create_parent(&out).map_err(stage("write"))?;
            write_scatter_csv(&out, &rows).map_err(stage("write"))?;
            for s in summary {
                println!(
                    "exit {}: {:.1}% of samples with error > 0.5",
                    s.exit,
                    100.0 * s.high_error_fraction
                );
            }
        }
        Command::Demo {
            out,
            n,
            spread,
            epochs,
            scatter_method,
            sweep,
            sampling,
            grid,
        } => {
            let mut cfg = run_config(seed, &out, &sampling, &grid);
            cfg.data.n_samples = n;
            cfg.data.cluster_spread = spread;
            cfg.model.epochs = epochs;
            cfg.modes = sweep.modes();
            cfg.budgets = sweep.budgets.clone().unwrap_or_default();
            cfg.n_budgets = sweep.n_budgets;
            cfg.scatter_method = scatter_method;
            let summary = run_pipeline(&cfg).map_err(|e| (e.stage.to_string(), e.source))?;
            println!("exit FLOPs: {:?}", summary.exit_flops);
            for path in &summary.artifacts {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("error in stage '{stage}': {e}");
            ExitCode::FAILURE
        }
    }
}
