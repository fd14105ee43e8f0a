//! Last-layer Laplace approximation with Kronecker-factored covariance.
//!
//! Each exit's linear head is treated Bayesianly with the bias absorbed into
//! the weights, `φ̂ = (φᵀ, 1)ᵀ`. The posterior over the augmented weights is
//! `N(Ŵ_MAP, ΣV ⊗ ΣU)`, and pushing it through the head gives the pre-softmax
//! predictive
//!
//! ```text
//! ẑ ~ N(Ŵ_MAPᵀ φ̂, (φ̂ᵀ ΣV φ̂) · ΣU)
//! ```
//!
//! Because the sample-dependent part of the covariance is a scalar, the
//! Cholesky factor of `ΣU` is computed once per exit and a draw costs
//! `μ + √s · L g`. The naïve sampler, which factors `s · ΣU` per sample, is
//! kept for equivalence checks and cost measurements.
//!
//! Curvature factors are the last-layer GGN expectations at the MAP,
//! `A = E[φ̂φ̂ᵀ]` and `G = E[diag(p) − ppᵀ]`; the prior precision `1/σ²` is
//! split evenly as `(1/σ)·I` on each factor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::lower_matvec_counted;
use crate::numerics::{
    cholesky, cholesky_counted, dot, softmax, softmax_into, Cholesky, DrawKey, GaussianStream, Matrix, OpCounter,
    ProbVector,
};

/// Default number of Monte-Carlo samples.
pub const DEFAULT_N_MC: usize = 50;

/// Tolerance below zero tolerated on `φ̂ᵀ ΣV φ̂` before it is an error.
const NEGATIVE_VARIANCE_TOL: f64 = 1e-12;

/// Undamped curvature statistics for one exit. Refitting with a different
/// prior only changes the damping, so these are computed once.
#[derive(Debug, Clone)]
pub struct KfacFactors {
    weights_aug: Matrix,
    feature_moment: Matrix,
    output_curvature: Matrix,
    n: usize,
}

/// Stacks `W` (`p×c`) over the bias row to give `Ŵ` (`(p+1)×c`).
pub fn augment_weights(weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if weight.cols() != bias.len() {
        return Err(Error::invalid(format!(
            "bias has {} entries for {} classes",
            bias.len(),
            weight.cols()
        )));
    }
    let mut data = weight.data().to_vec();
    data.extend_from_slice(bias);
    Matrix::from_vec(weight.rows() + 1, weight.cols(), data)
}

fn augment_features(phi: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(phi.len() + 1);
    v.extend_from_slice(phi);
    v.push(1.0);
    v
}

impl KfacFactors {
    /// Accumulates `E[φ̂φ̂ᵀ]` and `E[diag(p) − ppᵀ]` over the rows of
    /// `features` (`n×p`) and `map_probs` (`n×c`).
    pub fn estimate(features: &Matrix, map_probs: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::invalid("KFAC needs at least one sample"));
        }
        if map_probs.rows() != n {
            return Err(Error::invalid("features and probabilities differ in rows"));
        }
        if features.cols() != weight.rows() || map_probs.cols() != weight.cols() {
            return Err(Error::invalid(format!(
                "shape mismatch: features {}x{}, probs {}x{}, weight {}x{}",
                features.rows(),
                features.cols(),
                map_probs.rows(),
                map_probs.cols(),
                weight.rows(),
                weight.cols()
            )));
        }
        let weights_aug = augment_weights(weight, bias)?;
        let d = features.cols() + 1;
        let c = map_probs.cols();
        let mut a = Matrix::zeros(d, d);
        let mut g = Matrix::zeros(c, c);
        for i in 0..n {
            let phi = augment_features(features.row(i));
            for r in 0..d {
                let pr = phi[r];
                for (dst, &pc) in a.row_mut(r)[..=r].iter_mut().zip(&phi[..=r]) {
                    *dst += pr * pc;
                }
            }
            let p = map_probs.row(i);
            for r in 0..c {
                for col in 0..=r {
                    let v = if r == col { p[r] - p[r] * p[r] } else { -p[r] * p[col] };
                    g[(r, col)] += v;
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        let a = mirror_lower(&a).scaled(inv_n);
        let g = mirror_lower(&g).scaled(inv_n);
        if !a.is_finite() || !g.is_finite() {
            return Err(Error::Numerical("non-finite curvature statistics".into()));
        }
        Ok(Self {
            weights_aug,
            feature_moment: a,
            output_curvature: g,
            n,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn feature_moment(&self) -> &Matrix {
        &self.feature_moment
    }

    pub fn output_curvature(&self) -> &Matrix {
        &self.output_curvature
    }

    /// Damps both factors with `(1/σ)·I`, inverts them, and factors `ΣU`.
    pub fn posterior(&self, sigma: f64, temperature: f64) -> Result<KfacPosterior> {
        check_hyper(sigma, temperature)?;
        let damp = 1.0 / sigma;
        let invert = |m: &Matrix| -> Result<Matrix> {
            let mut m = m.clone();
            for i in 0..m.rows() {
                m[(i, i)] += damp;
            }
            Ok(Cholesky::factor(&m)?.inverse())
        };
        let sigma_v = invert(&self.feature_moment)?;
        let sigma_u = invert(&self.output_curvature)?;
        let chol_u = cholesky(&sigma_u)?;
        Ok(KfacPosterior {
            weights_aug: self.weights_aug.clone(),
            sigma_v,
            sigma_u,
            chol_u,
            sigma,
            temperature,
        })
    }
}

fn mirror_lower(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..i {
            out[(j, i)] = m[(i, j)];
        }
    }
    out
}

fn check_hyper(sigma: f64, temperature: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("prior sigma must be positive, got {sigma}")));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Fits the Laplace posterior of one exit head with prior scale `sigma` and
/// unit temperature.
pub fn fit_kfac(
    features: &Matrix,
    map_probs: &Matrix,
    weight: &Matrix,
    bias: &[f64],
    sigma: f64,
) -> Result<KfacPosterior> {
    KfacFactors::estimate(features, map_probs, weight, bias)?.posterior(sigma, 1.0)
}

/// Laplace posterior of one exit head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfacPosterior {
    weights_aug: Matrix,
    sigma_v: Matrix,
    sigma_u: Matrix,
    chol_u: Matrix,
    sigma: f64,
    temperature: f64,
}

impl KfacPosterior {
    /// Reassembles a posterior from stored parts, re-checking invariants.
    pub fn from_parts(
        weights_aug: Matrix,
        sigma_v: Matrix,
        sigma_u: Matrix,
        chol_u: Matrix,
        sigma: f64,
        temperature: f64,
    ) -> Result<Self> {
        check_hyper(sigma, temperature)?;
        let d = weights_aug.rows();
        let c = weights_aug.cols();
        let shapes_ok = sigma_v.rows() == d
            && sigma_v.cols() == d
            && sigma_u.rows() == c
            && sigma_u.cols() == c
            && chol_u.rows() == c
            && chol_u.cols() == c;
        if !shapes_ok {
            return Err(Error::invalid("posterior factor shapes disagree"));
        }
        let recon = chol_u.matmul(&chol_u.transpose())?;
        let rel = recon.max_abs_diff(&sigma_u) / sigma_u.frobenius_norm().max(f64::MIN_POSITIVE);
        if rel > 1e-8 {
            return Err(Error::Numerical(format!(
                "stored Cholesky factor does not reproduce ΣU (rel {rel:.2e})"
            )));
        }
        Ok(Self {
            weights_aug,
            sigma_v,
            sigma_u,
            chol_u,
            sigma,
            temperature,
        })
    }

    pub fn weights_aug(&self) -> &Matrix {
        &self.weights_aug
    }

    pub fn sigma_v(&self) -> &Matrix {
        &self.sigma_v
    }

    pub fn sigma_u(&self) -> &Matrix {
        &self.sigma_u
    }

    pub fn chol_u(&self) -> &Matrix {
        &self.chol_u
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        check_hyper(self.sigma, temperature)?;
        Ok(Self {
            temperature,
            ..self.clone()
        })
    }

    /// Feature dimension `p` (without the bias slot).
    pub fn feature_dim(&self) -> usize {
        self.weights_aug.rows() - 1
    }

    pub fn n_classes(&self) -> usize {
        self.weights_aug.cols()
    }

    pub fn predictive(&self, phi: &[f64]) -> Result<PredictiveGaussian<'_>> {
        self.predictive_counted(phi, &mut ())
    }

    /// Predictive Gaussian for feature vector `phi`, counting the work that
    /// goes beyond the vanilla mean.
    pub fn predictive_counted(&self, phi: &[f64], counter: &mut impl OpCounter) -> Result<PredictiveGaussian<'_>> {
        if phi.len() != self.feature_dim() {
            return Err(Error::invalid(format!(
                "feature vector has {} entries, posterior expects {}",
                phi.len(),
                self.feature_dim()
            )));
        }
        let phi_hat = augment_features(phi);
        let mean = self.weights_aug.t_matvec(&phi_hat);
        let d = phi_hat.len() as u64;
        let v = self.sigma_v.matvec(&phi_hat);
        counter.fma(d * d);
        let s = dot(&phi_hat, &v);
        counter.fma(d);
        if s < -NEGATIVE_VARIANCE_TOL || !s.is_finite() {
            return Err(Error::Numerical(format!(
                "feature variance {s:.3e} is negative; ΣV is not PSD"
            )));
        }
        Ok(PredictiveGaussian {
            mean,
            scale_sq: s.max(0.0),
            posterior: self,
        })
    }
}

/// `N(μ, s·ΣU)` over the pre-softmax outputs of one sample at one exit.
#[derive(Debug, Clone)]
pub struct PredictiveGaussian<'a> {
    pub mean: Vec<f64>,
    /// `φ̂ᵀ ΣV φ̂`.
    pub scale_sq: f64,
    posterior: &'a KfacPosterior,
}

impl<'a> PredictiveGaussian<'a> {
    /// Builds a predictive directly from its mean and scalar variance term.
    pub fn from_parts(posterior: &'a KfacPosterior, mean: Vec<f64>, scale_sq: f64) -> Result<Self> {
        if mean.len() != posterior.n_classes() {
            return Err(Error::invalid("mean length differs from class count"));
        }
        if !(scale_sq >= 0.0) {
            return Err(Error::invalid("variance term must be non-negative"));
        }
        Ok(Self {
            mean,
            scale_sq,
            posterior,
        })
    }

    pub fn posterior(&self) -> &'a KfacPosterior {
        self.posterior
    }

    pub fn temperature(&self) -> f64 {
        self.posterior.temperature
    }
}

/// Standard-normal draws pre-multiplied by `L` and shared by every sample at
/// one exit.
#[derive(Debug, Clone)]
pub struct SharedDraws {
    raw: Vec<Vec<f64>>,
    correlated: Vec<Vec<f64>>,
}

impl SharedDraws {
    /// Key used for shared draws: no real sample carries this id.
    pub const SHARED_SAMPLE: u64 = u64::MAX;

    pub fn new(posterior: &KfacPosterior, stream: &GaussianStream, exit: u32, n_mc: usize) -> Self {
        let c = posterior.n_classes();
        let raw: Vec<Vec<f64>> = (0..n_mc)
            .map(|l| stream.draw(DrawKey::new(Self::SHARED_SAMPLE, exit, l as u32), c))
            .collect();
        let correlated = raw
            .iter()
            .map(|g| lower_matvec_counted(&posterior.chol_u, g, &mut ()))
            .collect();
        Self { raw, correlated }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Where Monte-Carlo draws come from.
#[derive(Debug, Clone, Copy)]
pub enum DrawSource<'a> {
    /// Fresh draws keyed by `(sample, exit, draw index)`.
    Keyed {
        stream: GaussianStream,
        sample: u64,
        exit: u32,
    },
    /// Draws shared across samples and pre-multiplied offline.
    Shared(&'a SharedDraws),
}

impl DrawSource<'_> {
    fn raw(&self, l: usize, c: usize) -> Vec<f64> {
        match self {
            DrawSource::Keyed { stream, sample, exit } => stream.draw(DrawKey::new(*sample, *exit, l as u32), c),
            DrawSource::Shared(sh) => sh.raw[l].clone(),
        }
    }

    /// `L g` for draw `l`. Not counted: with shared draws this is done
    /// offline, and for keyed draws it belongs to generating the variate.
    fn correlated(&self, l: usize, chol: &Matrix) -> Vec<f64> {
        match self {
            DrawSource::Shared(sh) => sh.correlated[l].clone(),
            DrawSource::Keyed { .. } => lower_matvec_counted(chol, &self.raw(l, chol.rows()), &mut ()),
        }
    }

    fn check(&self, n_mc: usize) -> Result<()> {
        if n_mc == 0 {
            return Err(Error::invalid("n_MC must be at least 1"));
        }
        if let DrawSource::Shared(sh) = self {
            if sh.len() < n_mc {
                return Err(Error::invalid(format!(
                    "{} shared draws available, {n_mc} requested",
                    sh.len()
                )));
            }
        }
        Ok(())
    }
}

/// Pre-softmax draws `μ + √s · L g⁽ˡ⁾`, row-major `n_mc × c`.
pub fn efficient_logit_draws(
    pred: &PredictiveGaussian<'_>,
    n_mc: usize,
    source: DrawSource<'_>,
    counter: &mut impl OpCounter,
) -> Result<Vec<f64>> {
    source.check(n_mc)?;
    let c = pred.mean.len();
    let root = pred.scale_sq.sqrt();
    counter.op(1);
    let mut out = Vec::with_capacity(n_mc * c);
    for l in 0..n_mc {
        let lg = source.correlated(l, &pred.posterior.chol_u);
        out.extend(pred.mean.iter().zip(&lg).map(|(m, v)| m + root * v));
        counter.fma(c as u64);
    }
    Ok(out)
}

/// Average of `softmax(z / T)` over the rows of `draws` (`n × c`).
pub fn mc_average(draws: &[f64], c: usize, temperature: f64) -> ProbVector {
    let n = draws.len() / c;
    let mut acc = vec![0.0; c];
    let mut buf = vec![0.0; c];
    for z in draws.chunks_exact(c) {
        softmax_into(z, temperature, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Monte-Carlo predictive using the precomputed Cholesky factor of `ΣU`.
pub fn sample_efficient(pred: &PredictiveGaussian<'_>, n_mc: usize, source: DrawSource<'_>) -> Result<ProbVector> {
    sample_efficient_counted(pred, n_mc, source, &mut ())
}

pub fn sample_efficient_counted(
    pred: &PredictiveGaussian<'_>,
    n_mc: usize,
    source: DrawSource<'_>,
    counter: &mut impl OpCounter,
) -> Result<ProbVector> {
    source.check(n_mc)?;
    let t = pred.temperature();
    if pred.scale_sq == 0.0 {
        return softmax(&pred.mean, t);
    }
    let draws = efficient_logit_draws(pred, n_mc, source, counter)?;
    Ok(mc_average(&draws, pred.mean.len(), t))
}

/// [`sample_efficient`] at several temperatures from one set of draws. Entry
/// `i` equals `sample_efficient` with the posterior tempered by `temps[i]`.
pub fn sample_efficient_tempered(
    pred: &PredictiveGaussian<'_>,
    n_mc: usize,
    source: DrawSource<'_>,
    temps: &[f64],
) -> Result<Vec<ProbVector>> {
    source.check(n_mc)?;
    if pred.scale_sq == 0.0 {
        return temps.iter().map(|&t| softmax(&pred.mean, t)).collect();
    }
    let draws = efficient_logit_draws(pred, n_mc, source, &mut ())?;
    let c = pred.mean.len();
    temps
        .iter()
        .map(|&t| {
            if !(t > 0.0) {
                return Err(Error::invalid("temperature must be positive"));
            }
            Ok(mc_average(&draws, c, t))
        })
        .collect()
}

/// Monte-Carlo predictive that materializes and factors `s·ΣU` per sample.
pub fn sample_naive(pred: &PredictiveGaussian<'_>, n_mc: usize, source: DrawSource<'_>) -> Result<ProbVector> {
    sample_naive_counted(pred, n_mc, source, &mut ())
}

pub fn sample_naive_counted(
    pred: &PredictiveGaussian<'_>,
    n_mc: usize,
    source: DrawSource<'_>,
    counter: &mut impl OpCounter,
) -> Result<ProbVector> {
    source.check(n_mc)?;
    let t = pred.temperature();
    if pred.scale_sq == 0.0 {
        return softmax(&pred.mean, t);
    }
    let c = pred.mean.len();
    let cov = pred.posterior.sigma_u.scaled(pred.scale_sq);
    counter.op((c * c) as u64);
    let chol = match cholesky_counted(&cov, counter) {
        Ok(l) => l,
        // s·ΣU underflowed to a degenerate matrix
        Err(Error::NotPositiveDefinite { .. }) if pred.scale_sq < 1e-250 => {
            return softmax(&pred.mean, t);
        }
        Err(e) => return Err(e),
    };
    let mut draws = Vec::with_capacity(n_mc * c);
    for l in 0..n_mc {
        let g = source.raw(l, c);
        let lg = lower_matvec_counted(&chol, &g, counter);
        draws.extend(pred.mean.iter().zip(&lg).map(|(m, v)| m + v));
        counter.op(c as u64);
    }
    Ok(mc_average(&draws, c, t))
}

/// `Wᵀφ + b`.
pub fn linear_logits(weight: &Matrix, bias: &[f64], phi: &[f64]) -> Vec<f64> {
    let mut z = weight.t_matvec(phi);
    for (zj, bj) in z.iter_mut().zip(bias) {
        *zj += bj;
    }
    z
}

/// Deterministic prediction `softmax((Wᵀφ + b) / T)`.
pub fn map_predict(weight: &Matrix, bias: &[f64], phi: &[f64], temperature: f64) -> Result<ProbVector> {
    if weight.rows() != phi.len() || weight.cols() != bias.len() {
        return Err(Error::invalid(format!(
            "map_predict shapes: weight {}x{}, phi {}, bias {}",
            weight.rows(),
            weight.cols(),
            phi.len(),
            bias.len()
        )));
    }
    softmax(&linear_logits(weight, bias, phi), temperature)
}

/// Laplace predictions for the given rows of `features`, keyed by sample id.
pub fn predict_rows(
    posterior: &KfacPosterior,
    features: &Matrix,
    rows: &[usize],
    exit: u32,
    n_mc: usize,
    stream: GaussianStream,
    shared: Option<&SharedDraws>,
) -> Result<Vec<ProbVector>> {
    rows.par_iter()
        .map(|&i| {
            let pred = posterior.predictive(features.row(i))?;
            let source = match shared {
                Some(sh) => DrawSource::Shared(sh),
                None => DrawSource::Keyed {
                    stream,
                    sample: i as u64,
                    exit,
                },
            };
            sample_efficient(&pred, n_mc, source)
        })
        .collect()
}

/// Softmax probabilities of the MAP head for every row of `features`.
pub fn map_probs_matrix(weight: &Matrix, bias: &[f64], features: &Matrix) -> Result<Matrix> {
    let c = weight.cols();
    let mut out = Matrix::zeros(features.rows(), c);
    for i in 0..features.rows() {
        let p = map_predict(weight, bias, features.row(i), 1.0)?;
        out.row_mut(i).copy_from_slice(&p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{is_prob_vector, FlopCounter};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect(),
        )
        .unwrap()
    }

    fn random_posterior(
        seed: u64,
        n: usize,
        p: usize,
        c: usize,
        sigma: f64,
    ) -> (KfacPosterior, Matrix, Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = random_matrix(&mut rng, n, p, 1.0);
        let weight = random_matrix(&mut rng, p, c, 1.0);
        let bias: Vec<f64> = (0..c).map(|_| rng.random::<f64>() - 0.5).collect();
        let probs = map_probs_matrix(&weight, &bias, &features).unwrap();
        let post = fit_kfac(&features, &probs, &weight, &bias, sigma).unwrap();
        (post, features, weight, bias)
    }

    /// Dense inverse by Gauss-Jordan elimination with partial pivoting.
    fn gauss_jordan_inverse(m: &Matrix) -> Matrix {
        let n = m.rows();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = m.row(i).to_vec();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            let d = a[col][col];
            a[col].iter_mut().for_each(|v| *v /= d);
            for r in 0..n {
                if r != col {
                    let f = a[r][col];
                    let pivot_row = a[col].clone();
                    a[r].iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
                }
            }
        }
        Matrix::from_rows(&a.iter().map(|r| r[n..].to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn output_curvature_single_sample() {
        let features = Matrix::from_rows(&[vec![0.3]]).unwrap();
        let probs = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let weight = Matrix::zeros(1, 2);
        let f = KfacFactors::estimate(&features, &probs, &weight, &[0.0, 0.0]).unwrap();
        let g = f.output_curvature();
        assert_eq!(g.data(), &[0.25, -0.25, -0.25, 0.25]);
    }

    #[test]
    fn tiny_prior_collapses_posterior() {
        let (post, ..) = random_posterior(1, 5, 3, 3, 1e-9);
        assert!(post.sigma_v().frobenius_norm() < 1e-8);
        assert!(post.sigma_u().frobenius_norm() < 1e-8);
    }

    #[test]
    fn sigma_v_matches_dense_inverse_oracle() {
        let (post, features, ..) = random_posterior(2, 3, 4, 3, 1.0);
        let mut a = Matrix::zeros(5, 5);
        for i in 0..3 {
            let phi = augment_features(features.row(i));
            for r in 0..5 {
                for c in 0..5 {
                    a[(r, c)] += phi[r] * phi[c] / 3.0;
                }
            }
        }
        for i in 0..5 {
            a[(i, i)] += 1.0;
        }
        let oracle = gauss_jordan_inverse(&a);
        assert!(post.sigma_v().max_abs_diff(&oracle) < 1e-8);
    }

    #[test]
    fn zero_feature_uses_bias_row_only() {
        let (post, _, _, bias) = random_posterior(3, 10, 4, 3, 2.0);
        let pred = post.predictive(&[0.0; 4]).unwrap();
        assert_eq!(pred.mean, bias);
        assert_eq!(pred.scale_sq, post.sigma_v()[(4, 4)]);
    }

    #[test]
    fn identity_feature_factor_gives_squared_norm() {
        let (post, ..) = random_posterior(4, 10, 3, 2, 1.0);
        let post = KfacPosterior::from_parts(
            post.weights_aug().clone(),
            Matrix::identity(4),
            post.sigma_u().clone(),
            post.chol_u().clone(),
            1.0,
            1.0,
        )
        .unwrap();
        let phi = [0.5, -1.0, 2.0];
        let s = post.predictive(&phi).unwrap().scale_sq;
        assert!((s - (0.25 + 1.0 + 4.0 + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn mean_matches_vanilla_logits_exactly() {
        let (post, features, weight, bias) = random_posterior(5, 6, 4, 3, 1.0);
        for i in 0..6 {
            let phi = features.row(i);
            assert_eq!(post.predictive(phi).unwrap().mean, linear_logits(&weight, &bias, phi));
        }
    }

    #[test]
    fn wrong_feature_length_rejected() {
        let (post, ..) = random_posterior(6, 4, 4, 3, 1.0);
        assert!(post.predictive(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_variance_is_plain_softmax() {
        let (post, ..) = random_posterior(7, 4, 2, 3, 1.0);
        let post = post.with_temperature(1.7).unwrap();
        let pred = PredictiveGaussian::from_parts(&post, vec![0.3, -0.2, 1.0], 0.0).unwrap();
        let src = DrawSource::Keyed {
            stream: GaussianStream::new(1),
            sample: 0,
            exit: 0,
        };
        let expected = softmax(&[0.3, -0.2, 1.0], 1.7).unwrap();
        for n in [1, 7, 50] {
            assert_eq!(sample_efficient(&pred, n, src).unwrap(), expected);
            assert_eq!(sample_naive(&pred, n, src).unwrap(), expected);
        }
    }

    #[test]
    fn single_draw_arithmetic() {
        // μ = 0, s = 4, L = I, g = [1, -1] gives softmax([2, -2])
        let post = KfacPosterior::from_parts(
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::identity(2),
            1.0,
            1.0,
        )
        .unwrap();
        let pred = PredictiveGaussian::from_parts(&post, vec![0.0, 0.0], 4.0).unwrap();
        let z = efficient_logit_draws(
            &pred,
            1,
            DrawSource::Shared(&SharedDraws {
                raw: vec![vec![1.0, -1.0]],
                correlated: vec![vec![1.0, -1.0]],
            }),
            &mut (),
        )
        .unwrap();
        assert_eq!(z, vec![2.0, -2.0]);
        assert_eq!(mc_average(&z, 2, 1.0), softmax(&[2.0, -2.0], 1.0).unwrap());
    }

    #[test]
    fn naive_matches_efficient_under_shared_keys() {
        for seed in 0..20 {
            let (post, features, ..) = random_posterior(100 + seed, 12, 5, 4, 1.5);
            let post = post.with_temperature(0.8).unwrap();
            let stream = GaussianStream::new(seed);
            for i in 0..3 {
                let pred = post.predictive(features.row(i)).unwrap();
                let src = DrawSource::Keyed {
                    stream,
                    sample: i as u64,
                    exit: 2,
                };
                let a = sample_efficient(&pred, 50, src).unwrap();
                let b = sample_naive(&pred, 50, src).unwrap();
                let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-10, "diff {diff}");
                assert!(is_prob_vector(&a));
            }
        }
    }

    #[test]
    fn naive_costs_at_least_a_cholesky_more() {
        for (p, c) in [(4usize, 3usize), (8, 10), (16, 33)] {
            let (post, features, ..) = random_posterior(9, 20, p, c, 1.0);
            let stream = GaussianStream::new(3);
            let src = DrawSource::Keyed {
                stream,
                sample: 0,
                exit: 0,
            };
            let pred = post.predictive(features.row(0)).unwrap();
            let mut eff = FlopCounter::new();
            let mut naive = FlopCounter::new();
            let pe = post.predictive_counted(features.row(0), &mut eff).unwrap();
            sample_efficient_counted(&pe, 50, src, &mut eff).unwrap();
            let pn = post.predictive_counted(features.row(0), &mut naive).unwrap();
            sample_naive_counted(&pn, 50, src, &mut naive).unwrap();
            drop(pred);
            let c3 = (c * c * c) as f64 / 3.0;
            assert!(naive.raw as f64 - eff.raw as f64 >= c3, "p={p} c={c}");
        }
    }

    #[test]
    fn shared_draws_reused_across_samples() {
        let (post, features, ..) = random_posterior(11, 8, 3, 3, 1.0);
        let sh = SharedDraws::new(&post, &GaussianStream::new(2), 0, 10);
        let out = predict_rows(&post, &features, &[0, 1, 2], 0, 10, GaussianStream::new(2), Some(&sh)).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|p| is_prob_vector(p)));
        assert!(predict_rows(&post, &features, &[0], 0, 11, GaussianStream::new(2), Some(&sh)).is_err());
    }

    #[test]
    fn map_predict_examples() {
        let w = Matrix::zeros(3, 4);
        assert_eq!(
            map_predict(&w, &[0.0; 4], &[1.0, 2.0, 3.0], 1.0).unwrap(),
            vec![0.25; 4]
        );
        let (_, features, weight, bias) = random_posterior(12, 5, 3, 4, 1.0);
        for i in 0..5 {
            let a = map_predict(&weight, &bias, features.row(i), 1.0).unwrap();
            let b = map_predict(&weight, &bias, features.row(i), 2.0).unwrap();
            assert_eq!(crate::numerics::argmax(&a), crate::numerics::argmax(&b));
        }
    }
}
