//! Helpers shared by the integration tests: the default toy bundle, random
//! posteriors, and small reference implementations used as oracles.

#![allow(dead_code)]

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use exitcal::bundle::FeatureBundle;
use exitcal::laplace::{fit_kfac, map_probs_matrix, KfacPosterior};
use exitcal::numerics::Matrix;
use exitcal::pipeline::{stage_data, stage_extract, stage_train, RunConfig};

/// The default benchmark configuration at seed 1.
pub fn default_config() -> RunConfig {
    RunConfig::new(1, std::env::temp_dir().join("exitcal-unused"))
}

/// Bundle of the default benchmark, built once per test binary.
pub fn default_bundle() -> &'static FeatureBundle {
    static BUNDLE: OnceLock<FeatureBundle> = OnceLock::new();
    BUNDLE.get_or_init(|| {
        let cfg = default_config();
        let data = stage_data(&cfg).expect("data");
        let model = stage_train(&cfg, &data).expect("train");
        stage_extract(&model, &data).expect("extract")
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A posterior fitted on `n` random features with random head weights.
pub fn random_posterior(rng: &mut ChaCha8Rng, p: usize, c: usize, n: usize, sigma: f64) -> KfacPosterior {
    let features = uniform_matrix(rng, n, p, 1.0);
    let weight = uniform_matrix(rng, p, c, 1.5);
    let bias: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let probs = map_probs_matrix(&weight, &bias, &features).unwrap();
    fit_kfac(&features, &probs, &weight, &bias, sigma).unwrap()
}

/// Textbook Cholesky–Banachiewicz on a dense row-major matrix.
pub fn reference_cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                assert!(d > 0.0, "reference cholesky: not positive definite");
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Plain softmax, written independently of the library.
pub fn reference_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Random probability vectors over `c` classes with varied sharpness.
pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let sharp = rng.random_range(0.1..6.0);
            let z: Vec<f64> = (0..c).map(|_| sharp * rng.random_range(-1.0..1.0)).collect();
            reference_softmax(&z)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
