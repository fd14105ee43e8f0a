//! Sampling overhead relative to the backbone.

use exitcal::flops::{overhead_report, Convention, ExitShape};

fn toy_arch() -> Vec<ExitShape> {
    [768.0, 2048.0, 3328.0, 4608.0]
        .into_iter()
        .map(|w| ExitShape {
            p: 32,
            c: 8,
            backbone_flops: w,
        })
        .collect()
}

#[test]
fn efficient_beats_naive_at_every_exit() {
    for conv in [Convention::Raw, Convention::Practical] {
        let rows = overhead_report(&toy_arch(), 50, conv);
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.efficient_rel < r.naive_rel));
    }
}

#[test]
fn thousand_classes_make_naive_over_a_hundred_times_dearer() {
    for p in [64, 256, 512] {
        let arch = [ExitShape {
            p,
            c: 1000,
            backbone_flops: 1e9,
        }];
        let row = &overhead_report(&arch, 50, Convention::Practical)[0];
        assert!(row.naive_rel > 100.0 * row.efficient_rel, "p={p}");
    }
}

/// The toy head costs `2p² + 5p + 2cn + 2` raw FLOPs to sample, about 3000
/// for p=32, c=8, n=50, while the first exit's backbone is only 768.
#[test]
#[ignore = "the 16-32-8 toy backbone is too small for sampling to cost under 1% of it"]
fn toy_efficient_overhead_below_one_percent() {
    let rows = overhead_report(&toy_arch(), 50, Convention::Practical);
    for r in rows {
        assert!(r.efficient_rel < 0.01, "exit {}: {:.3}", r.exit, r.efficient_rel);
    }
}
