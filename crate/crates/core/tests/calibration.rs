//! Hyperparameter search on synthetic exits whose calibration is known.

mod common;

use common::*;
use exitcal::bundle::{ExitFeatures, FeatureBundle, Split};
use exitcal::calibration::{Calibrator, HyperGrid, Predictor, SearchMode};
use exitcal::laplace::map_predict;
use exitcal::predict::{LaplaceModel, SamplingConfig, DEFAULT_SIGMA, DEFAULT_TEMPERATURE};
use rand::Rng;

/// Labels are drawn from the head's own softmax, so the head is perfectly
/// calibrated in expectation.
fn calibrated_bundle(seed: u64, n_exits: usize, n_train: usize, n_val: usize) -> FeatureBundle {
    let (p, c) = (4, 5);
    let n = n_train + n_val;
    let mut r = rng(seed);
    let features = uniform_matrix(&mut r, n, p, 1.5);
    let exits: Vec<ExitFeatures> = (0..n_exits)
        .map(|_| ExitFeatures {
            features: features.clone(),
            weight: uniform_matrix(&mut r, p, c, 1.2),
            bias: (0..c).map(|_| r.random_range(-0.3..0.3)).collect(),
        })
        .collect();
    let last = exits.last().unwrap();
    let labels = (0..n)
        .map(|i| {
            let probs = map_predict(&last.weight, &last.bias, features.row(i), 1.0).unwrap();
            let u: f64 = r.random();
            let mut acc = 0.0;
            probs
                .iter()
                .position(|q| {
                    acc += q;
                    u < acc
                })
                .unwrap_or(c - 1)
        })
        .collect();
    let splits = (0..n)
        .map(|i| if i < n_train { Split::Train } else { Split::Val })
        .collect();
    FeatureBundle {
        n_classes: c,
        labels,
        splits,
        exits,
        exit_flops: (1..=n_exits).map(|k| 100.0 * k as f64).collect(),
    }
}

#[test]
fn calibrated_exit_keeps_temperature_near_one() {
    let bundle = calibrated_bundle(21, 1, 2000, 4000);
    let laplace = LaplaceModel::fit(&bundle).unwrap();
    let cal = Calibrator::new(&bundle, &laplace, SamplingConfig::new(1)).unwrap();
    let choice = cal
        .grid_search_exit(0, &HyperGrid::default(), SearchMode::Independent)
        .unwrap();
    assert!(
        [0.7, 1.0, 1.3].contains(&choice.temperature),
        "chose T={}",
        choice.temperature
    );
}

#[test]
fn vanilla_temperature_scaling_returns_default_on_calibrated_head() {
    let bundle = calibrated_bundle(22, 1, 500, 4000);
    let laplace = LaplaceModel::fit(&bundle).unwrap();
    let cal = Calibrator::new(&bundle, &laplace, SamplingConfig::new(1)).unwrap();
    let choice = cal
        .temperature_only(0, &HyperGrid::default(), Predictor::Vanilla)
        .unwrap();
    assert_eq!(choice.temperature, 1.0);
    assert_eq!(choice.sigma, None);
}

#[test]
fn unsearched_hyperparameters_stay_at_defaults() {
    let bundle = calibrated_bundle(23, 2, 400, 300);
    let laplace = LaplaceModel::fit(&bundle).unwrap();
    let cal = Calibrator::new(&bundle, &laplace, SamplingConfig::new(1)).unwrap();
    let grid = HyperGrid::default();
    for choice in cal.calibrate(&grid, SearchMode::TemperatureOnly).unwrap().exits {
        assert_eq!(choice.sigma, Some(DEFAULT_SIGMA));
    }
    for choice in cal.calibrate(&grid, SearchMode::SigmaOnly).unwrap().exits {
        assert_eq!(choice.temperature, DEFAULT_TEMPERATURE);
    }
}

#[test]
fn single_pair_grid_returns_that_pair() {
    let bundle = calibrated_bundle(24, 2, 300, 200);
    let laplace = LaplaceModel::fit(&bundle).unwrap();
    let cal = Calibrator::new(&bundle, &laplace, SamplingConfig::new(1)).unwrap();
    let grid = HyperGrid {
        temperatures: vec![1.7],
        sigmas: vec![0.3],
    };
    for mode in [SearchMode::Independent, SearchMode::SequentialMie] {
        for choice in cal.calibrate(&grid, mode).unwrap().exits {
            assert_eq!((choice.temperature, choice.sigma), (1.7, Some(0.3)));
        }
    }
}

#[test]
fn sequential_search_on_one_exit_matches_independent() {
    let bundle = calibrated_bundle(25, 1, 300, 300);
    let laplace = LaplaceModel::fit(&bundle).unwrap();
    let cal = Calibrator::new(&bundle, &laplace, SamplingConfig::new(4)).unwrap();
    let grid = HyperGrid::default();
    let a = cal.calibrate(&grid, SearchMode::Independent).unwrap();
    let b = cal.calibrate(&grid, SearchMode::SequentialMie).unwrap();
    assert_eq!(a.exits, b.exits);
}

#[test]
fn first_sequential_choice_ignores_later_exits() {
    let grid = HyperGrid::default();
    let short = calibrated_bundle(26, 1, 300, 300);
    let mut long = calibrated_bundle(26, 1, 300, 300);
    let mut r = rng(99);
    let extra = ExitFeatures {
        features: long.exits[0].features.clone(),
        weight: uniform_matrix(&mut r, 4, 5, 2.0),
        bias: vec![0.0; 5],
    };
    long.exits.push(extra);
    long.exit_flops.push(250.0);
    let pick = |b: &FeatureBundle| {
        let laplace = LaplaceModel::fit(b).unwrap();
        let cal = Calibrator::new(b, &laplace, SamplingConfig::new(4)).unwrap();
        cal.calibrate(&grid, SearchMode::SequentialMie).unwrap().exits[0]
    };
    assert_eq!(pick(&short), pick(&long));
}

#[test]
fn calibration_is_deterministic() {
    let bundle = calibrated_bundle(27, 2, 300, 300);
    let laplace = LaplaceModel::fit(&bundle).unwrap();
    let grid = HyperGrid::default();
    let run = || {
        Calibrator::new(&bundle, &laplace, SamplingConfig::new(8))
            .unwrap()
            .calibrate(&grid, SearchMode::Independent)
            .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_validation_split_is_rejected() {
    let mut bundle = calibrated_bundle(28, 1, 50, 10);
    bundle.splits.iter_mut().for_each(|s| *s = Split::Train);
    let laplace = LaplaceModel::fit(&bundle).unwrap();
    assert!(Calibrator::new(&bundle, &laplace, SamplingConfig::new(1)).is_err());
}
