//! A small multi-exit classifier trained on synthetic clusters.
//!
//! The trunk is a chain of dense `tanh` blocks; exit `k` is a linear head on
//! the block-`k` activation. Training minimizes the per-sample sum of exit
//! cross-entropies plus `λ‖θ‖²` with momentum SGD and keeps the epoch with
//! the best last-exit validation accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{ExitFeatures, FeatureBundle, Split};
use crate::error::{Error, Result};
use crate::flops::{dense_layer_flops, Convention};
use crate::laplace::linear_logits;
use crate::numerics::{argmax, derive_seed, log_sum_exp, softmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    /// `n × d`.
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub n_classes: usize,
}

impl SyntheticDataset {
    pub fn rows(&self, split: Split) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }
}

/// `c` Gaussian clusters with unit-variance noise around random means of
/// norm `1 / cluster_spread`, split 80/10/10 per class.
pub fn gen_synthetic(seed: u64, n: usize, d: usize, c: usize, cluster_spread: f64) -> Result<SyntheticDataset> {
    if c < 2 || d < 2 {
        return Err(Error::invalid(format!("need d >= 2 and c >= 2, got d={d}, c={c}")));
    }
    if n < 10 * c {
        return Err(Error::invalid(format!(
            "need at least {} samples for {c} classes, got {n}",
            10 * c
        )));
    }
    if !(cluster_spread > 0.0) || !cluster_spread.is_finite() {
        return Err(Error::invalid("cluster spread must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gen"));
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm / cluster_spread).collect()
        })
        .collect();

    let mut samples: Vec<(usize, Split)> = Vec::with_capacity(n);
    for class in 0..c {
        let count = n / c + usize::from(class < n % c);
        let held_out = count / 10;
        for j in 0..count {
            let split = if j < held_out {
                Split::Val
            } else if j < 2 * held_out {
                Split::Test
            } else {
                Split::Train
            };
            samples.push((class, split));
        }
    }
    samples.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * d);
    for &(class, _) in &samples {
        data.extend(means[class].iter().map(|m| m + normal(&mut rng)));
    }
    Ok(SyntheticDataset {
        inputs: Matrix::from_vec(n, d, data)?,
        labels: samples.iter().map(|s| s.0).collect(),
        splits: samples.iter().map(|s| s.1).collect(),
        n_classes: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub d: usize,
    pub c: usize,
    /// One width per block; `widths.len()` is the exit count.
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            c: 8,
            widths: vec![32; 4],
            epochs: 200,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 1,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::invalid("need at least two blocks"));
        }
        if self.widths.iter().any(|&w| w < self.c) {
            return Err(Error::invalid("every block width must be at least the class count"));
        }
        if self.d < 2 || self.c < 2 {
            return Err(Error::invalid("need d >= 2 and c >= 2"));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("bad optimizer settings"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Dense trunk block `h ↦ tanh(A h + a)`, `A` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Linear exit head `φ ↦ Wᵀφ + b`, `W` stored `p × c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub blocks: Vec<Block>,
    pub heads: Vec<Head>,
}

/// Activations of one forward pass.
struct Trace {
    /// `acts[0]` is the input, `acts[k]` the block-`k` output.
    acts: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

impl ToyModel {
    pub fn init(cfg: &ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
        let mut gaussian = |rows: usize, cols: usize, fan_in: usize| -> Matrix {
            let scale = (1.0 / fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>();
            Matrix::from_vec(rows, cols, data).expect("shape")
        };
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        let mut fan_in = cfg.d;
        for &w in &cfg.widths {
            blocks.push(Block {
                weight: gaussian(w, fan_in, fan_in),
                bias: vec![0.0; w],
            });
            heads.push(Head {
                weight: gaussian(w, cfg.c, w),
                bias: vec![0.0; cfg.c],
            });
            fan_in = w;
        }
        Ok(Self { blocks, heads })
    }

    pub fn n_exits(&self) -> usize {
        self.heads.len()
    }

    pub fn n_classes(&self) -> usize {
        self.heads[0].bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].weight.cols()
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.push(b.weight.data());
            out.push(&b.bias);
        }
        for h in &self.heads {
            out.push(h.weight.data());
            out.push(&h.bias);
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.weight.data_mut());
            out.push(&mut b.bias);
        }
        for h in &mut self.heads {
            out.push(h.weight.data_mut());
            out.push(&mut h.bias);
        }
        out
    }

    /// All parameters, flattened block by block then head by head.
    pub fn params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::invalid("parameter vector has the wrong length"));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            let len = s.len();
            s.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.param_slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum()
    }

    fn zeros_like(&self) -> ToyModel {
        let mut z = self.clone();
        for s in z.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    fn forward(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.blocks.len() + 1);
        acts.push(x.to_vec());
        let mut logits = Vec::with_capacity(self.heads.len());
        for (block, head) in self.blocks.iter().zip(&self.heads) {
            let prev = acts.last().expect("input");
            let mut h = block.weight.matvec(prev);
            for (v, b) in h.iter_mut().zip(&block.bias) {
                *v = (*v + b).tanh();
            }
            logits.push(linear_logits(&head.weight, &head.bias, &h));
            acts.push(h);
        }
        Trace { acts, logits }
    }

    /// Post-activation trunk output after every block.
    pub fn features(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.forward(x).acts.split_off(1)
    }

    /// Pre-softmax outputs of every exit.
    pub fn exit_logits(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.forward(x).logits
    }

    /// Softmax outputs of every exit.
    pub fn predict(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.exit_logits(x)
            .iter()
            .map(|z| softmax(z, 1.0).expect("unit temperature"))
            .collect()
    }

    /// Cross-entropy of each exit for one labelled sample.
    pub fn exit_losses(&self, x: &[f64], y: usize) -> Vec<f64> {
        self.exit_logits(x)
            .iter()
            .map(|z| log_sum_exp(z).expect("non-empty logits") - z[y])
            .collect()
    }

    /// `Σ_k CE_k(x, y) + λ‖θ‖²`.
    pub fn sample_loss(&self, x: &[f64], y: usize, weight_decay: f64) -> f64 {
        self.exit_losses(x, y).iter().sum::<f64>() + weight_decay * self.squared_norm()
    }

    /// Adds the gradient of the summed exit cross-entropies at `(x, y)` into
    /// `grad` (weight decay not included).
    fn accumulate_grad(&self, x: &[f64], y: usize, grad: &mut ToyModel) {
        let trace = self.forward(x);
        let k_max = self.blocks.len();
        let mut upstream: Vec<f64> = vec![0.0; self.blocks[k_max - 1].bias.len()];
        for k in (0..k_max).rev() {
            let h = &trace.acts[k + 1];
            // head k
            let mut dz = softmax(&trace.logits[k], 1.0).expect("unit temperature");
            dz[y] -= 1.0;
            let head = &self.heads[k];
            let ghead = &mut grad.heads[k];
            for (i, &hi) in h.iter().enumerate() {
                for (g, &d) in ghead.weight.row_mut(i).iter_mut().zip(&dz) {
                    *g += hi * d;
                }
            }
            for (g, &d) in ghead.bias.iter_mut().zip(&dz) {
                *g += d;
            }
            let mut dh = head.weight.matvec(&dz);
            for (a, u) in dh.iter_mut().zip(&upstream) {
                *a += u;
            }
            // block k
            let da: Vec<f64> = dh.iter().zip(h).map(|(g, hv)| g * (1.0 - hv * hv)).collect();
            let prev = &trace.acts[k];
            let gblock = &mut grad.blocks[k];
            for (r, &dr) in da.iter().enumerate() {
                for (g, &p) in gblock.weight.row_mut(r).iter_mut().zip(prev) {
                    *g += dr * p;
                }
            }
            for (g, &d) in gblock.bias.iter_mut().zip(&da) {
                *g += d;
            }
            upstream = self.blocks[k].weight.t_matvec(&da);
        }
    }

    /// Gradient of [`ToyModel::sample_loss`], flattened like [`ToyModel::params`].
    pub fn sample_gradient(&self, x: &[f64], y: usize, weight_decay: f64) -> Vec<f64> {
        let mut grad = self.zeros_like();
        self.accumulate_grad(x, y, &mut grad);
        grad.params()
            .iter()
            .zip(self.params())
            .map(|(g, t)| g + 2.0 * weight_decay * t)
            .collect()
    }
}

/// Per-epoch training record. Index 0 is the untrained model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub val_top1_last: Vec<f64>,
    pub best_epoch: usize,
}

fn mean_train_loss(model: &ToyModel, data: &SyntheticDataset, rows: &[usize], weight_decay: f64) -> f64 {
    let ce: f64 = rows
        .iter()
        .map(|&i| {
            model
                .exit_losses(data.inputs.row(i), data.labels[i])
                .iter()
                .sum::<f64>()
        })
        .sum();
    ce / rows.len() as f64 + weight_decay * model.squared_norm()
}

fn last_exit_accuracy(model: &ToyModel, data: &SyntheticDataset, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows
        .iter()
        .filter(|&&i| {
            let logits = model.exit_logits(data.inputs.row(i));
            argmax(logits.last().expect("exit")) == data.labels[i]
        })
        .count();
    100.0 * hits as f64 / rows.len() as f64
}

/// Trains with momentum SGD on the training split and returns the snapshot
/// with the best last-exit validation Top-1 (earliest epoch on ties).
pub fn train_toy(cfg: &ToyModelConfig, data: &SyntheticDataset) -> Result<(ToyModel, TrainingHistory)> {
    cfg.validate()?;
    if data.input_dim() != cfg.d || data.n_classes != cfg.c {
        return Err(Error::invalid("dataset shape differs from model config"));
    }
    let train = data.rows(Split::Train);
    let val = data.rows(Split::Val);
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut model = ToyModel::init(cfg)?;
    let mut velocity = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train"));
    let mut order = train.clone();

    let mut history = TrainingHistory {
        train_loss: vec![mean_train_loss(&model, data, &train, cfg.weight_decay)],
        val_top1_last: vec![last_exit_accuracy(&model, data, &val)],
        best_epoch: 0,
    };
    let mut best = (history.val_top1_last[0], model.clone());

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = model.zeros_like();
            for &i in batch {
                model.accumulate_grad(data.inputs.row(i), data.labels[i], &mut grad);
            }
            let inv = 1.0 / batch.len() as f64;
            let params = model.params();
            let mut offset = 0;
            let grad_slices = grad.param_slices();
            for (v, g) in velocity.param_slices_mut().into_iter().zip(grad_slices) {
                for (j, (vj, gj)) in v.iter_mut().zip(g).enumerate() {
                    let full = gj * inv + 2.0 * cfg.weight_decay * params[offset + j];
                    *vj = cfg.momentum * *vj + full;
                }
                offset += v.len();
            }
            for (t, v) in model.param_slices_mut().into_iter().zip(velocity.param_slices()) {
                for (tj, vj) in t.iter_mut().zip(v) {
                    *tj -= cfg.learning_rate * vj;
                }
            }
        }
        let loss = mean_train_loss(&model, data, &train, cfg.weight_decay);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let acc = last_exit_accuracy(&model, data, &val);
        history.train_loss.push(loss);
        history.val_top1_last.push(acc);
        if acc > best.0 {
            best = (acc, model.clone());
            history.best_epoch = epoch;
        }
    }
    Ok((best.1, history))
}

/// Largest relative difference between the analytic gradient of
/// `Σ_k CE_k + λ‖θ‖²` at one sample and central finite differences.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-5·‖a‖∞)`. Roundoff in the
/// loss limits a central difference to an absolute accuracy near `ε|ℒ|/h`,
/// so entries far below the gradient's own scale are measured against that
/// scale instead of their own magnitude.
pub fn grad_check(model: &ToyModel, x: &[f64], y: usize, weight_decay: f64, h: f64) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    let analytic = model.sample_gradient(x, y, weight_decay);
    let theta = model.params();
    let mut probe = model.clone();
    let floor = 1e-5 * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    let mut shifted = theta.clone();
    for (j, &a) in analytic.iter().enumerate() {
        shifted[j] = theta[j] + h;
        probe.set_params(&shifted)?;
        let up = probe.sample_loss(x, y, weight_decay);
        shifted[j] = theta[j] - h;
        probe.set_params(&shifted)?;
        let down = probe.sample_loss(x, y, weight_decay);
        shifted[j] = theta[j];
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Cumulative backbone cost of each exit: every block and every head up to
/// and including exit `k`.
pub fn exit_costs(model: &ToyModel, conv: Convention) -> Vec<f64> {
    let c = model.n_classes() as u64;
    let mut total = 0u64;
    model
        .blocks
        .iter()
        .map(|b| {
            let (out, inp) = (b.weight.rows() as u64, b.weight.cols() as u64);
            total += dense_layer_flops(inp, out, conv) + dense_layer_flops(out, c, conv);
            total as f64
        })
        .collect()
}

/// Runs the trunk over every sample and packages per-exit features with the
/// exit heads and practical-FLOPs cumulative costs.
pub fn extract_features(model: &ToyModel, data: &SyntheticDataset) -> Result<FeatureBundle> {
    if data.input_dim() != model.input_dim() {
        return Err(Error::invalid("dataset dimension differs from model input"));
    }
    let per_sample: Vec<Vec<Vec<f64>>> = (0..data.len())
        .into_par_iter()
        .map(|i| model.features(data.inputs.row(i)))
        .collect();
    let exits = model
        .heads
        .iter()
        .enumerate()
        .map(|(k, head)| {
            let p = head.weight.rows();
            let mut flat = Vec::with_capacity(data.len() * p);
            for s in &per_sample {
                flat.extend_from_slice(&s[k]);
            }
            Ok(ExitFeatures {
                features: Matrix::from_vec(data.len(), p, flat)?,
                weight: head.weight.clone(),
                bias: head.bias.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = FeatureBundle {
        n_classes: model.n_classes(),
        labels: data.labels.clone(),
        splits: data.splits.clone(),
        exits,
        exit_flops: exit_costs(model, Convention::Practical),
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplace::map_predict;

    fn small_cfg() -> ToyModelConfig {
        ToyModelConfig {
            d: 4,
            c: 3,
            widths: vec![5, 4, 6],
            epochs: 5,
            ..ToyModelConfig::default()
        }
    }

    #[test]
    fn split_arithmetic() {
        let ds = gen_synthetic(1, 800, 16, 8, 1.0).unwrap();
        assert_eq!(ds.rows(Split::Train).len(), 640);
        assert_eq!(ds.rows(Split::Val).len(), 80);
        assert_eq!(ds.rows(Split::Test).len(), 80);
        for split in Split::ALL {
            let rows = ds.rows(split);
            for class in 0..8 {
                assert!(rows.iter().any(|&i| ds.labels[i] == class));
            }
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(gen_synthetic(1, 79, 16, 8, 1.0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            gen_synthetic(3, 200, 5, 4, 1.0).unwrap(),
            gen_synthetic(3, 200, 5, 4, 1.0).unwrap()
        );
        assert_ne!(
            gen_synthetic(3, 200, 5, 4, 1.0).unwrap(),
            gen_synthetic(4, 200, 5, 4, 1.0).unwrap()
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let model = ToyModel::init(&cfg).unwrap();
        let x = [0.3, -1.2, 0.8, 0.1];
        let err = grad_check(&model, &x, 2, 0.0, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradient_check_includes_weight_decay() {
        let model = ToyModel::init(&small_cfg()).unwrap();
        let x = [0.5, 0.5, -0.5, 1.0];
        assert!(grad_check(&model, &x, 0, 0.3, 1e-5).unwrap() < 1e-4);
        // with decay the analytic gradient picks up 2λθ
        let g0 = model.sample_gradient(&x, 0, 0.0);
        let g1 = model.sample_gradient(&x, 0, 0.3);
        for ((a, b), t) in g0.iter().zip(&g1).zip(model.params()) {
            assert!((b - a - 0.6 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_check_on_zero_input() {
        let mut model = ToyModel::init(&small_cfg()).unwrap();
        // nonzero trunk biases so zero input still drives every block
        let mut theta = model.params();
        theta
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += 0.01 * (i % 7) as f64);
        model.set_params(&theta).unwrap();
        let g = model.sample_gradient(&[0.0; 4], 1, 0.0);
        let bias_grad = &g[20..25];
        assert!(bias_grad.iter().any(|v| v.abs() > 1e-6));
        assert!(grad_check(&model, &[0.0; 4], 1, 0.0, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn bad_step_rejected() {
        let model = ToyModel::init(&small_cfg()).unwrap();
        assert!(grad_check(&model, &[0.0; 4], 0, 0.0, 1e-2).is_err());
    }

    #[test]
    fn sum_loss_decomposes_over_exits() {
        let model = ToyModel::init(&small_cfg()).unwrap();
        let x = [1.0, -0.4, 0.2, 0.9];
        let per_exit: f64 = model.predict(&x).iter().map(|p| -p[2].ln()).sum();
        assert!((model.sample_loss(&x, 2, 0.0) - per_exit).abs() < 1e-12);
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let ds = gen_synthetic(2, 300, 4, 3, 1.0).unwrap();
        let cfg = ToyModelConfig {
            epochs: 10,
            ..small_cfg()
        };
        let (m1, h1) = train_toy(&cfg, &ds).unwrap();
        let (m2, _) = train_toy(&cfg, &ds).unwrap();
        assert_eq!(m1, m2);
        assert!(h1.train_loss.last().unwrap() < &h1.train_loss[0]);
    }

    #[test]
    fn separable_data_is_learned() {
        let ds = gen_synthetic(5, 400, 4, 3, 0.05).unwrap();
        let cfg = ToyModelConfig {
            epochs: 50,
            ..small_cfg()
        };
        let (_, hist) = train_toy(&cfg, &ds).unwrap();
        assert_eq!(hist.val_top1_last[hist.best_epoch], 100.0);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let ds = gen_synthetic(6, 300, 4, 3, 1.0).unwrap();
        let cfg0 = ToyModelConfig {
            epochs: 20,
            weight_decay: 0.0,
            ..small_cfg()
        };
        let cfg1 = ToyModelConfig {
            weight_decay: 0.1,
            ..cfg0.clone()
        };
        let (m0, _) = train_toy(&cfg0, &ds).unwrap();
        let (m1, _) = train_toy(&cfg1, &ds).unwrap();
        assert!(m1.squared_norm() < m0.squared_norm());
    }

    #[test]
    fn features_reproduce_exit_predictions() {
        let ds = gen_synthetic(7, 120, 4, 3, 1.0).unwrap();
        let model = ToyModel::init(&small_cfg()).unwrap();
        let bundle = extract_features(&model, &ds).unwrap();
        for i in 0..ds.len() {
            let own = model.predict(ds.inputs.row(i));
            for (k, e) in bundle.exits.iter().enumerate() {
                let p = map_predict(&e.weight, &e.bias, e.features.row(i), 1.0).unwrap();
                assert_eq!(p, own[k]);
            }
        }
        assert!(bundle.exit_flops.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ToyModelConfig {
            widths: vec![32],
            ..ToyModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ToyModelConfig {
            widths: vec![4, 32],
            ..ToyModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
