//! Budgeted batch classification.
//!
//! A budget `B` (backbone FLOPs per sample, on average over a batch) is
//! turned into target exit fractions `q`, the fractions into per-exit
//! confidence thresholds on the validation split, and the thresholds route
//! test samples: a sample leaves at the first exit whose confidence reaches
//! that exit's threshold.
//!
//! Exit fractions follow a geometric profile `q_k ∝ r^{k−1}`. Ratios below
//! one front-load exits, ratios above one push mass towards the end, and the
//! ratio is found by bisection on `ln r` so that the expected backbone cost
//! meets the budget.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{method_overhead, Convention, ExitShape, Overheads};
use crate::metrics::{report, MetricsReport};
use crate::numerics::{max_value, ProbVector};
use crate::predict::{ExitPredictions, Method};

/// Threshold that no confidence reaches.
pub const NEVER_EXIT: f64 = 1.0 + 1e-9;

/// Slack subtracted before rounding target counts up, so that `q·n` landing
/// a hair above an integer does not claim an extra sample.
const COUNT_SLACK: f64 = 1e-9;

/// Half-width of the bisection interval on `ln r`.
const LOG_RATIO_BOUND: f64 = 200.0;

/// Relative tolerance on the expected cost.
const COST_TOL: f64 = 1e-12;

/// Maps a budget to exit fractions.
pub trait ExitDistributionStrategy {
    fn solve(&self, w: &[f64], budget: f64) -> Result<ExitDistribution>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDistribution {
    pub q: Vec<f64>,
    /// Budget after clamping into `[w_1, w_last]`.
    pub target: f64,
    /// `Σ q_k w_k`.
    pub expected_cost: f64,
}

/// Geometric exit profile.
#[derive(Debug, Clone, Copy, Default)]
pub struct Geometric;

fn geometric_profile(n: usize, log_ratio: f64) -> Vec<f64> {
    let logs: Vec<f64> = (0..n).map(|k| k as f64 * log_ratio).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    q
}

fn expected(q: &[f64], w: &[f64]) -> f64 {
    q.iter().zip(w).map(|(a, b)| a * b).sum()
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut q = vec![0.0; n];
    q[k] = 1.0;
    q
}

impl ExitDistributionStrategy for Geometric {
    fn solve(&self, w: &[f64], budget: f64) -> Result<ExitDistribution> {
        check_costs(w)?;
        if !(budget > 0.0) || !budget.is_finite() {
            return Err(Error::invalid(format!("budget must be positive, got {budget}")));
        }
        let n = w.len();
        let (first, last) = (w[0], w[n - 1]);
        let q = if budget <= first {
            one_hot(n, 0)
        } else if budget >= last {
            one_hot(n, n - 1)
        } else {
            // expected cost increases with the ratio
            let (mut lo, mut hi) = (-LOG_RATIO_BOUND, LOG_RATIO_BOUND);
            let mut q = geometric_profile(n, 0.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                q = geometric_profile(n, mid);
                let cost = expected(&q, w);
                if (cost - budget).abs() <= COST_TOL * budget {
                    break;
                }
                if cost < budget {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            q
        };
        let target = budget.clamp(first, last);
        Ok(ExitDistribution {
            expected_cost: expected(&q, w),
            q,
            target,
        })
    }
}

/// Exit fractions for budget `budget` under the geometric profile.
pub fn solve_exit_distribution(w: &[f64], budget: f64) -> Result<ExitDistribution> {
    Geometric.solve(w, budget)
}

fn check_costs(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid("no exit costs"));
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid("exit costs must be positive"));
    }
    if w.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::invalid("exit costs must be strictly increasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t: Vec<f64>,
    /// Samples that left at each exit on the calibration data.
    pub exited: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Sequential order-statistic thresholds.
///
/// `confidences[k][i]` is sample `i`'s confidence at exit `k`. At each exit
/// but the last, the threshold is the confidence of the `⌈q_k n⌉`-th most
/// confident sample still in play, and every sample at or above it leaves.
pub fn compute_thresholds(confidences: &[Vec<f64>], q: &[f64]) -> Result<Thresholds> {
    let k_exits = confidences.len();
    if k_exits == 0 || q.len() != k_exits {
        return Err(Error::invalid(format!(
            "{} confidence rows for {} exit fractions",
            k_exits,
            q.len()
        )));
    }
    let n = confidences[0].len();
    if confidences.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("confidence rows differ in length"));
    }
    let mut alive: Vec<usize> = (0..n).collect();
    let mut t = Vec::with_capacity(k_exits);
    let mut exited = Vec::with_capacity(k_exits);
    let mut warnings = Vec::new();
    for k in 0..k_exits - 1 {
        let target = (q[k] * n as f64 - COUNT_SLACK).ceil().max(0.0) as usize;
        let conf = &confidences[k];
        let threshold = if target == 0 || alive.is_empty() {
            if target > 0 {
                warnings.push(format!("exit {}: no samples left for a target of {target}", k + 1));
            }
            NEVER_EXIT
        } else {
            let mut sorted: Vec<f64> = alive.iter().map(|&i| conf[i]).collect();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if target > sorted.len() {
                warnings.push(format!(
                    "exit {}: {} samples left for a target of {target}; all exit",
                    k + 1,
                    sorted.len()
                ));
            }
            sorted[target.min(sorted.len()) - 1]
        };
        let before = alive.len();
        alive.retain(|&i| conf[i] < threshold);
        exited.push(before - alive.len());
        t.push(threshold);
    }
    t.push(0.0);
    exited.push(alive.len());
    Ok(Thresholds { t, exited, warnings })
}

/// Exit (0-based) taken by a sample with per-exit confidences `conf`.
pub fn exit_for(conf: impl Fn(usize) -> f64, thresholds: &[f64]) -> usize {
    let last = thresholds.len() - 1;
    (0..last).find(|&k| conf(k) >= thresholds[k]).unwrap_or(last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub method: Method,
    pub budget: f64,
    pub q: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Mean backbone cost of the validation split under the thresholds.
    pub expected_cost: f64,
    pub warnings: Vec<String>,
}

/// Plans budget `budget` from validation predictions of the deciding method.
pub fn plan_budget(val: &ExitPredictions, w: &[f64], budget: f64) -> Result<BudgetPlan> {
    plan_budget_with(&Geometric, val, w, budget)
}

pub fn plan_budget_with(
    strategy: &impl ExitDistributionStrategy,
    val: &ExitPredictions,
    w: &[f64],
    budget: f64,
) -> Result<BudgetPlan> {
    if val.n_exits() != w.len() {
        return Err(Error::invalid("predictions and exit costs differ in exit count"));
    }
    if val.is_empty() {
        return Err(Error::invalid("no validation samples to plan on"));
    }
    let dist = strategy.solve(w, budget)?;
    let conf = val.confidences();
    let th = compute_thresholds(&conf, &dist.q)?;
    let n = val.len() as f64;
    let expected_cost = th.exited.iter().zip(w).map(|(&m, &wk)| m as f64 * wk).sum::<f64>() / n;
    Ok(BudgetPlan {
        method: val.method,
        budget,
        q: dist.q,
        thresholds: th.t,
        expected_cost,
        warnings: th.warnings,
    })
}

/// Cost of leaving at each exit for each method.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub arch: Vec<ExitShape>,
    pub n_mc: u64,
    pub convention: Convention,
}

impl CostModel {
    pub fn backbone(&self, exit: usize) -> f64 {
        self.arch[exit].backbone_flops
    }

    /// Backbone plus method overhead when leaving at `exit` (0-based).
    pub fn charged(&self, exit: usize, overheads: Overheads) -> f64 {
        self.backbone(exit) + method_overhead(&self.arch, exit + 1, self.n_mc, overheads, self.convention) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedSample {
    pub sample_id: usize,
    /// 1-based.
    pub exit: usize,
    pub prediction: ProbVector,
    /// Confidence of the deciding method at the exit taken.
    pub confidence: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub decide: Method,
    pub score: Method,
    pub samples: Vec<RoutedSample>,
}

impl RoutingTrace {
    pub fn mean_cost(&self) -> f64 {
        self.samples.iter().map(|s| s.cost).sum::<f64>() / self.samples.len() as f64
    }

    pub fn exit_counts(&self, n_exits: usize) -> Vec<usize> {
        let mut counts = vec![0; n_exits];
        for s in &self.samples {
            counts[s.exit - 1] += 1;
        }
        counts
    }

    pub fn predictions(&self) -> Vec<&ProbVector> {
        self.samples.iter().map(|s| &s.prediction).collect()
    }

    pub fn metrics(&self, labels: &[usize]) -> Result<MetricsReport> {
        report(&self.predictions(), labels)
    }
}

/// Routes every sample of `decide` through the plan.
///
/// `score`, when given, supplies the reported prediction at the exit taken
/// and may come from a different method than the one deciding; the charged
/// cost then covers the overheads of both.
pub fn route(
    plan: &BudgetPlan,
    decide: &ExitPredictions,
    score: Option<&ExitPredictions>,
    costs: &CostModel,
) -> Result<RoutingTrace> {
    if decide.method != plan.method {
        return Err(Error::invalid(format!(
            "plan built for {} but routing with {}",
            plan.method, decide.method
        )));
    }
    let score = score.unwrap_or(decide);
    if score.rows != decide.rows || score.n_exits() != decide.n_exits() {
        return Err(Error::invalid(
            "deciding and scoring predictions cover different samples",
        ));
    }
    if decide.n_exits() != plan.thresholds.len() || costs.arch.len() != plan.thresholds.len() {
        return Err(Error::invalid("plan, predictions and costs differ in exit count"));
    }
    let (a, b) = (decide.method.overheads(), score.method.overheads());
    let overheads = Overheads {
        laplace: a.laplace || b.laplace,
        mie: a.mie || b.mie,
    };
    let samples = (0..decide.len())
        .into_par_iter()
        .map(|i| {
            let conf = |k: usize| max_value(&decide.probs[k][i]);
            let k = exit_for(conf, &plan.thresholds);
            RoutedSample {
                sample_id: decide.rows[i],
                exit: k + 1,
                prediction: score.probs[k][i].clone(),
                confidence: conf(k),
                cost: costs.charged(k, overheads),
            }
        })
        .collect();
    Ok(RoutingTrace {
        decide: decide.method,
        score: score.method,
        samples,
    })
}

/// One point of a budget curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub mode: String,
    pub budget_flops: f64,
    pub mean_cost_flops: f64,
    pub top1: f64,
    pub top5: f64,
    pub nlpd: f64,
    pub ece: f64,
}

/// Predictions needed to sweep one mode.
#[derive(Debug, Clone, Copy)]
pub struct SweepMode<'a> {
    pub val: &'a ExitPredictions,
    pub test: &'a ExitPredictions,
    /// Scoring predictions on the test split for cross-decision curves.
    pub score: Option<&'a ExitPredictions>,
}

impl SweepMode<'_> {
    pub fn label(&self) -> String {
        match self.score {
            Some(s) if s.method != self.test.method => format!("{}>{}", self.test.method, s.method),
            _ => self.test.method.name().to_string(),
        }
    }
}

/// Plans every budget on validation data and scores the routed test split.
pub fn sweep_budgets(
    modes: &[SweepMode<'_>],
    budgets: &[f64],
    costs: &CostModel,
    test_labels: &[usize],
) -> Result<Vec<CurveRecord>> {
    let w: Vec<f64> = costs.arch.iter().map(|s| s.backbone_flops).collect();
    let mut out = Vec::with_capacity(modes.len() * budgets.len());
    for mode in modes {
        for &b in budgets {
            let plan = plan_budget(mode.val, &w, b)?;
            let trace = route(&plan, mode.test, mode.score, costs)?;
            let m = trace.metrics(test_labels)?;
            out.push(CurveRecord {
                mode: mode.label(),
                budget_flops: b,
                mean_cost_flops: trace.mean_cost(),
                top1: m.top1,
                top5: m.top5,
                nlpd: m.nlpd,
                ece: m.ece,
            });
        }
    }
    Ok(out)
}

/// `n` budgets evenly spaced over `[w_1, w_last]`.
pub fn budget_grid(w: &[f64], n: usize) -> Result<Vec<f64>> {
    check_costs(w)?;
    let (a, b) = (w[0], w[w.len() - 1]);
    Ok(match n {
        0 => Vec::new(),
        1 => vec![b],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    })
}
