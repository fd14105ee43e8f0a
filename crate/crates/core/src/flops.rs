//! Closed-form cost model for vanilla, naïve-Laplace, efficient-Laplace and
//! model-internal-ensemble prediction.
//!
//! Formulas are stated in raw FLOPs (every multiply and every add counts).
//! The practical convention counts a fused multiply-add pair as one
//! operation; for the closed forms it is the raw value halved before the
//! final rounding. Rational terms (the `c³/3` of the naïve path) are kept
//! exact until that single rounding step.

use serde::{Deserialize, Serialize};

pub use crate::numerics::count::{FlopCounter, OpCounter};

/// Counting convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    #[default]
    Raw,
    Practical,
}

impl Convention {
    /// Cost of `n` multiply-add pairs.
    pub fn fma(self, n: u64) -> u64 {
        match self {
            Convention::Raw => 2 * n,
            Convention::Practical => n,
        }
    }

    fn finish(self, numerator: u128, denominator: u128) -> u64 {
        let den = match self {
            Convention::Raw => denominator,
            Convention::Practical => 2 * denominator,
        };
        // round half up
        ((2 * numerator + den) / (2 * den)) as u64
    }
}

/// Extra cost of naïve Laplace sampling at one exit:
/// `2c²(n_MC+1) + c³/3 + 2p² + p − 1`.
pub fn flops_naive(p: u64, c: u64, n_mc: u64, conv: Convention) -> u64 {
    let (p, c, n) = (p as u128, c as u128, n_mc as u128);
    // everything over a common denominator of 3
    let num = 3 * (2 * c * c * (n + 1) + 2 * p * p + p) + c * c * c - 3;
    conv.finish(num, 3)
}

/// Extra cost of efficient Laplace sampling at one exit:
/// `2c·n_MC + 2p² + 5p + 2`.
pub fn flops_efficient(p: u64, c: u64, n_mc: u64, conv: Convention) -> u64 {
    let (p, c, n) = (p as u128, c as u128, n_mc as u128);
    conv.finish(2 * c * n + 2 * p * p + 5 * p + 2, 1)
}

/// Cumulative ensembling cost when exiting at `exit` (1-based): `3c` per
/// exit after the first under the raw convention, `2c` under practical
/// (the weight multiply and the accumulate fuse).
pub fn flops_mie(c: u64, exit: usize) -> u64 {
    flops_mie_with(c, exit, Convention::Raw)
}

pub fn flops_mie_with(c: u64, exit: usize, conv: Convention) -> u64 {
    let steps = exit.saturating_sub(1) as u64;
    match conv {
        Convention::Raw => 3 * c * steps,
        Convention::Practical => 2 * c * steps,
    }
}

/// Cost of a dense layer `in → out` with bias.
pub fn dense_layer_flops(inputs: u64, outputs: u64, conv: Convention) -> u64 {
    conv.fma(inputs * outputs)
}

/// Per-exit shape of an early-exit architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitShape {
    pub p: u64,
    pub c: u64,
    /// Cumulative backbone cost up to and including this exit.
    pub backbone_flops: f64,
}

/// One row of the overhead report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub exit: usize,
    pub p: u64,
    pub c: u64,
    pub backbone_flops: f64,
    pub naive_overhead: u64,
    pub efficient_overhead: u64,
    pub naive_rel: f64,
    pub efficient_rel: f64,
}

/// Per-exit overhead of Laplace sampling relative to the backbone.
///
/// Overheads are cumulative: reaching exit `k` means every earlier exit's
/// predictive was sampled too.
pub fn overhead_report(arch: &[ExitShape], n_mc: u64, conv: Convention) -> Vec<OverheadRow> {
    let mut naive = 0u64;
    let mut efficient = 0u64;
    arch.iter()
        .enumerate()
        .map(|(i, shape)| {
            naive += flops_naive(shape.p, shape.c, n_mc, conv);
            efficient += flops_efficient(shape.p, shape.c, n_mc, conv);
            OverheadRow {
                exit: i + 1,
                p: shape.p,
                c: shape.c,
                backbone_flops: shape.backbone_flops,
                naive_overhead: naive,
                efficient_overhead: efficient,
                naive_rel: naive as f64 / shape.backbone_flops,
                efficient_rel: efficient as f64 / shape.backbone_flops,
            }
        })
        .collect()
}

/// Prediction method whose test-time overhead is charged on top of the
/// backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overheads {
    pub laplace: bool,
    pub mie: bool,
}

/// Cumulative method overhead when a sample leaves at `exit` (1-based).
pub fn method_overhead(arch: &[ExitShape], exit: usize, n_mc: u64, overheads: Overheads, conv: Convention) -> u64 {
    let mut total = 0;
    if overheads.laplace {
        total += arch[..exit]
            .iter()
            .map(|s| flops_efficient(s.p, s.c, n_mc, conv))
            .sum::<u64>();
    }
    if overheads.mie {
        total += flops_mie_with(arch[0].c, exit, conv);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_examples() {
        assert_eq!(flops_naive(10, 5, 50, Convention::Raw), 2801);
        assert_eq!(flops_naive(1, 1, 1, Convention::Raw), 6);
    }

    #[test]
    fn efficient_examples() {
        assert_eq!(flops_efficient(10, 5, 50, Convention::Raw), 752);
        assert_eq!(flops_efficient(1, 2, 1, Convention::Raw), 13);
        assert_eq!(flops_efficient(10, 5, 50, Convention::Practical), 376);
    }

    #[test]
    fn naive_to_efficient_ratio_grows_with_classes() {
        let ratio =
            |c| flops_naive(128, c, 50, Convention::Raw) as f64 / flops_efficient(128, c, 50, Convention::Raw) as f64;
        assert!(ratio(10) < ratio(100));
        assert!(ratio(100) < ratio(1000));
    }

    #[test]
    fn efficient_cheaper_except_tiny_class_counts() {
        // naive − efficient = 2c²(n+1) − 2cn + c³/3 − 4p − 3, which is only
        // non-positive for very few classes and wide features
        let mut violations = 0;
        for p in 1..=256u64 {
            for c in 2..=1000u64 {
                for n in [1u64, 50] {
                    let eff = flops_efficient(p, c, n, Convention::Raw);
                    let naive = flops_naive(p, c, n, Convention::Raw);
                    let margin =
                        3 * (2 * c * c * (n + 1) - 2 * c * n) as i64 + (c * c * c) as i64 - 3 * (4 * p + 3) as i64;
                    if c >= 12 {
                        assert!(eff < naive, "p={p} c={c} n={n}");
                    }
                    if eff >= naive {
                        violations += 1;
                        assert!(margin <= 1, "p={p} c={c} n={n}");
                    }
                }
            }
        }
        assert_eq!(violations, 2044);
    }

    #[test]
    fn mie_examples() {
        assert_eq!(flops_mie(100, 1), 0);
        assert_eq!(flops_mie(100, 3), 600);
        let diffs: Vec<u64> = (1..6).map(|k| flops_mie(7, k + 1) - flops_mie(7, k)).collect();
        assert!(diffs.iter().all(|&d| d == diffs[0]));
    }

    #[test]
    fn naive_is_cubic_in_classes() {
        let c = 10_000u64;
        let ratio = flops_naive(16, c, 50, Convention::Raw) as f64 / (c as f64).powi(3);
        assert!((ratio - 1.0 / 3.0).abs() / (1.0 / 3.0) < 0.05, "ratio {ratio}");
    }

    #[test]
    fn efficient_is_affine_in_draws() {
        let f = |n| flops_efficient(32, 17, n, Convention::Raw) as i64;
        let step = f(2) - f(1);
        for n in 1..100 {
            assert_eq!(f(n + 1) - f(n), step);
        }
    }

    #[test]
    fn report_rows_match_exits() {
        let arch: Vec<ExitShape> = (1..=5)
            .map(|k| ExitShape {
                p: 64,
                c: 1000,
                backbone_flops: 1e8 * k as f64,
            })
            .collect();
        let rows = overhead_report(&arch, 50, Convention::Raw);
        assert_eq!(rows.len(), 5);
        for r in &rows {
            assert!(r.efficient_rel < r.naive_rel);
            assert!(r.naive_rel > 100.0 * r.efficient_rel);
        }
    }

    #[test]
    fn overhead_accumulates() {
        let arch = [
            ExitShape {
                p: 4,
                c: 3,
                backbone_flops: 100.0,
            },
            ExitShape {
                p: 4,
                c: 3,
                backbone_flops: 200.0,
            },
        ];
        let on = Overheads {
            laplace: true,
            mie: true,
        };
        let one = flops_efficient(4, 3, 10, Convention::Raw);
        assert_eq!(method_overhead(&arch, 1, 10, on, Convention::Raw), one);
        assert_eq!(method_overhead(&arch, 2, 10, on, Convention::Raw), 2 * one + 9);
        let off = Overheads {
            laplace: false,
            mie: false,
        };
        assert_eq!(method_overhead(&arch, 2, 10, off, Convention::Raw), 0);
    }
}
