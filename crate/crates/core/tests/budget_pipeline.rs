//! Budget sweeps on the default benchmark.

mod common;

use std::sync::OnceLock;

use common::*;
use exitcal::budget::{budget_grid, CurveRecord};
use exitcal::bundle::Split;
use exitcal::metrics::report;
use exitcal::pipeline::{default_modes, Experiment, ModeSpec};
use exitcal::predict::{vanilla_exit_probs, Method};

fn experiment() -> &'static Experiment<'static> {
    static EXP: OnceLock<Experiment<'static>> = OnceLock::new();
    EXP.get_or_init(|| {
        let cfg = default_config();
        Experiment::fit(default_bundle(), cfg.sampling(), &cfg.grid).unwrap()
    })
}

fn curves(modes: &[ModeSpec], budgets: &[f64]) -> Vec<CurveRecord> {
    let exp = experiment();
    let sets = exp.prediction_sets(modes).unwrap();
    exp.sweep(&sets, modes, budgets).unwrap()
}

#[test]
fn vanilla_at_full_budget_is_the_last_exit() {
    let bundle = default_bundle();
    let w_last = *bundle.exit_flops.last().unwrap();
    let rec = &curves(&[ModeSpec::pure(Method::Vanilla)], &[w_last])[0];

    let rows = bundle.rows(Split::Test);
    let direct = vanilla_exit_probs(bundle, bundle.n_exits() - 1, &rows, 1.0).unwrap();
    let want = report(&direct, &bundle.labels_of(&rows)).unwrap();
    assert_eq!(rec.mean_cost_flops, w_last);
    assert_eq!(
        (rec.top1, rec.top5, rec.nlpd, rec.ece),
        (want.top1, want.top5, want.nlpd, want.ece)
    );
}

#[test]
fn charged_cost_grows_with_budget() {
    let budgets = budget_grid(&default_bundle().exit_flops, 20).unwrap();
    let modes = default_modes();
    let records = curves(&modes, &budgets);
    assert_eq!(records.len(), modes.len() * budgets.len());
    for mode in records.chunks(budgets.len()) {
        for pair in mode.windows(2) {
            assert!(
                pair[1].mean_cost_flops >= pair[0].mean_cost_flops,
                "{}: cost fell from {} to {}",
                pair[0].mode,
                pair[0].mean_cost_flops,
                pair[1].mean_cost_flops
            );
        }
    }
}

#[test]
fn cross_decision_curve_differs_from_both_pure_modes() {
    let budgets = budget_grid(&default_bundle().exit_flops, 6).unwrap();
    let modes = [
        ModeSpec::cross(Method::MieLaplace, Method::Vanilla),
        ModeSpec::pure(Method::MieLaplace),
        ModeSpec::pure(Method::Vanilla),
    ];
    let records = curves(&modes, &budgets);
    let by_mode: Vec<&[CurveRecord]> = records.chunks(budgets.len()).collect();
    assert_eq!(by_mode[0][0].mode, "mie-laplace>vanilla");
    let key = |r: &CurveRecord| (r.mean_cost_flops, r.top1, r.nlpd, r.ece);
    for pure in &by_mode[1..] {
        assert!(by_mode[0].iter().zip(pure.iter()).any(|(a, b)| key(a) != key(b)));
    }
    // deciding with MIE-Laplace charges its overhead even when scoring vanilla
    for (cross, decide) in by_mode[0].iter().zip(by_mode[1]) {
        assert_eq!(cross.mean_cost_flops, decide.mean_cost_flops);
    }
}

#[test]
fn single_budget_single_mode_gives_one_full_record() {
    let w = &default_bundle().exit_flops;
    let records = curves(&[ModeSpec::pure(Method::Laplace)], &[0.5 * (w[0] + w[3])]);
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert_eq!(r.mode, "laplace");
    for v in [r.mean_cost_flops, r.top1, r.top5, r.nlpd, r.ece] {
        assert!(v.is_finite() && v >= 0.0);
    }
    assert!(r.top5 >= r.top1);
}

#[test]
fn laplace_methods_pay_for_sampling() {
    let w = &default_bundle().exit_flops;
    let b = [w[0]];
    let vanilla = &curves(&[ModeSpec::pure(Method::Vanilla)], &b)[0];
    let laplace = &curves(&[ModeSpec::pure(Method::Laplace)], &b)[0];
    assert!(laplace.mean_cost_flops > vanilla.mean_cost_flops);
}
