use hjbi_core::hjbi::{build_grid, ValueField};
use hjbi_core::montecarlo::{
    discounted_cost, discounted_costs, exp_martingale_moment, flow_contraction_estimate, robust_expectation,
    simulate_gsde, ControlPolicy, VolatilityPolicy,
};
use hjbi_core::{ControlSet, ProblemSpec, UncertaintySet};
use nalgebra::DMatrix;

fn gamma() -> UncertaintySet {
    UncertaintySet::interval(0.25, 1.0).unwrap()
}

fn scalar(drift: &str, sigma: &str) -> ProblemSpec {
    ProblemSpec::builder(1, 1, 0)
        .drift(0, drift)
        .sigma(0, 0, sigma)
        .f("-y")
        .gamma(gamma())
        .build()
        .unwrap()
}

fn none() -> ControlPolicy {
    ControlPolicy::Constant(Vec::new())
}

fn hi() -> VolatilityPolicy {
    VolatilityPolicy::constant_scalar(1.0)
}

fn lo() -> VolatilityPolicy {
    VolatilityPolicy::constant_scalar(0.25)
}

fn terminal_mean(bundle: &hjbi_core::montecarlo::PathBundle, payoff: impl Fn(f64) -> f64) -> (f64, f64) {
    let v: Vec<f64> = (0..bundle.n_paths()).map(|p| payoff(bundle.terminal(p)[0])).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn deterministic_decay() {
    let spec = scalar("-x1", "0");
    let dt = 1e-3;
    let b = simulate_gsde(&spec, &[1.0], &none(), &hi(), dt, 1.0, 3, 0).unwrap();
    for p in 0..3 {
        let x = b.terminal(p)[0];
        assert_eq!(x, b.terminal(0)[0]);
        assert!((x - (-1.0f64).exp()).abs() < dt, "{x}");
    }
}

#[test]
fn mean_reverting_mean() {
    let spec = scalar("1 - x1", "1");
    let x0 = 3.0;
    let b = simulate_gsde(&spec, &[x0], &none(), &hi(), 1e-3, 1.0, 20_000, 7).unwrap();
    let (mean, se) = terminal_mean(&b, |x| x);
    let exact = 1.0 + (x0 - 1.0) * (-1.0f64).exp();
    assert!((mean - exact).abs() < 4.0 * se + 2e-3, "{mean} vs {exact} (se {se})");
}

#[test]
fn brownian_martingale_and_robust_variance() {
    let spec = scalar("0", "1");
    let n = 20_000;
    let hi_b = simulate_gsde(&spec, &[0.0], &none(), &hi(), 1e-2, 1.0, n, 3).unwrap();
    let lo_b = simulate_gsde(&spec, &[0.0], &none(), &lo(), 1e-2, 1.0, n, 3).unwrap();

    let (m, se) = terminal_mean(&hi_b, |x| x);
    assert!(m.abs() < 4.0 * se, "{m} (se {se})");

    let hi_sq = terminal_mean(&hi_b, |x| x * x);
    let lo_sq = terminal_mean(&lo_b, |x| x * x);
    let robust = robust_expectation(&[lo_sq, hi_sq]).unwrap();
    assert_eq!(robust.index, 1);
    assert!((robust.value - 1.0).abs() < 4.0 * robust.std_error, "{robust:?}");
    assert!((lo_sq.0 - 0.25).abs() < 4.0 * lo_sq.1);

    // Shared increments: every path of the low scenario is the high one scaled by 1/2.
    for p in 0..n {
        assert!((lo_b.terminal(p)[0] - 0.5 * hi_b.terminal(p)[0]).abs() < 1e-12);
    }
    let lo_4 = terminal_mean(&lo_b, |x| x.powi(4)).0;
    let hi_4 = terminal_mean(&hi_b, |x| x.powi(4)).0;
    assert!(lo_4 < hi_4);
}

#[test]
fn quadratic_variation_bookkeeping() {
    let spec = scalar("-x1", "1");
    let dt = 0.01;
    let schedule = VolatilityPolicy::Schedule(vec![
        (0.0, DMatrix::from_element(1, 1, 0.25)),
        (0.5, DMatrix::from_element(1, 1, 1.0)),
    ]);
    let b = simulate_gsde(&spec, &[0.5], &none(), &schedule, dt, 1.0, 4, 11).unwrap();
    for p in 0..4 {
        for k in 0..b.steps {
            let q = if (k as f64) * dt < 0.5 - 1e-12 { 0.25 } else { 1.0 };
            assert_eq!(b.qv_increment(p, k), &[q * dt]);
        }
    }
    assert_eq!(b.summary().n_paths, 4);
}

#[test]
fn bundle_does_not_depend_on_thread_count() {
    let spec = ProblemSpec::example57(1.0).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                simulate_gsde(
                    &spec,
                    &[0.3],
                    &ControlPolicy::Constant(vec![1.0]),
                    &hi(),
                    1e-2,
                    1.0,
                    257,
                    42,
                )
                .unwrap()
                .to_csv()
            })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn convex_feedback_picks_high_volatility() {
    let spec = ProblemSpec::example57(1.0).unwrap();
    let grid = build_grid(&[(-5.0, 5.0)], &[201]).unwrap();
    let convex = ValueField::from_fn(grid, |x| x[0] * x[0]).unwrap();
    let ctrl = ControlPolicy::Constant(vec![1.0]);
    let fb = simulate_gsde(
        &spec,
        &[0.5],
        &ctrl,
        &VolatilityPolicy::Feedback(convex),
        1e-2,
        1.0,
        50,
        5,
    )
    .unwrap();
    let constant = simulate_gsde(&spec, &[0.5], &ctrl, &hi(), 1e-2, 1.0, 50, 5).unwrap();
    for p in 0..50 {
        assert_eq!(fb.terminal(p), constant.terminal(p));
    }
}

#[test]
fn moment_examples() {
    let m = exp_martingale_moment(&gamma(), 0.5, 1.0, 2.0, 1.0, 100_000, 1).unwrap();
    assert!((m.exact - 0.25f64.exp()).abs() < 1e-15);
    assert!((m.estimate - m.exact).abs() < 4.0 * m.std_error, "{m:?}");
    assert!(m.estimate <= m.bound + 3.0 * m.std_error);

    let one = exp_martingale_moment(&gamma(), 0.5, 0.25, 1.0, 1.0, 1000, 1).unwrap();
    assert_eq!((one.exact, one.bound), (1.0, 1.0));
    assert!(exp_martingale_moment(&gamma(), 0.5, 2.0, 2.0, 1.0, 10, 1).is_err());
    assert!(exp_martingale_moment(&gamma(), 0.5, 1.0, 0.5, 1.0, 10, 1).is_err());
}

#[test]
fn contraction_examples() {
    let dt = 1e-3;
    let decay = scalar("-x1", "0");
    let c = flow_contraction_estimate(&decay, &[1.0], &[-1.0], &hi(), &none(), dt, 1.0, 10, 0).unwrap();
    assert!((c.eta_hat - 1.0).abs() < 1e-12);
    let euler = 4.0 * (1.0 - dt).powi(2000);
    assert!((c.estimate - euler).abs() < 1e-10 && c.std_error < 1e-12);
    assert!((c.estimate - 4.0 * (-2.0f64).exp()).abs() < 4.0 * 2.0 * dt * 4.0 * (-2.0f64).exp());
    assert!(c.pass);

    let noisy = scalar("-2 * x1", "0.5 * x1");
    let c = flow_contraction_estimate(&noisy, &[1.0], &[0.0], &hi(), &none(), 1e-3, 1.0, 2000, 3).unwrap();
    assert!(c.pass, "{c:?}");
    assert_eq!(c.flagged, 0);
}

fn linear_cost_problem() -> ProblemSpec {
    ProblemSpec::builder(1, 1, 0)
        .drift(0, "-x1")
        .sigma(0, 0, "0")
        .discounted(1.0, "x1")
        .gamma(gamma())
        .build()
        .unwrap()
}

#[test]
fn cost_examples() {
    let spec = linear_cost_problem();
    let est = discounted_cost(&spec, &[2.0], &none(), &[lo(), hi()], 1e-3, 10.0, 4, 0).unwrap();
    // Trapezoid rule along the Euler path X_k = 2(1 − dt)^k.
    let (dt, steps) = (1e-3, 10_000);
    let integrand = |k: i32| (-(k as f64) * dt).exp() * 2.0 * (1.0 - dt).powi(k);
    let discrete = dt * ((1..steps).map(integrand).sum::<f64>() + 0.5 * (integrand(0) + integrand(steps)));
    assert!((est.value - discrete).abs() < 1e-10, "{est:?} vs {discrete}");
    // ∫ e^{−s}·2e^{−s} ds = 1, up to the O(dt) Euler bias.
    assert!((est.value - 1.0).abs() < dt, "{est:?}");
    assert_eq!(est.std_error, 0.0);
    assert_eq!(est.scenarios.len(), 2);
    assert!(est.tail_bound < 1e-3);

    assert!(discounted_cost(&spec, &[2.0], &none(), &[hi()], 1e-3, 4.0, 4, 0).is_err());
    assert!(discounted_cost(&spec, &[2.0], &none(), &[], 1e-3, 10.0, 4, 0).is_err());
    assert!(discounted_cost(&scalar("-x1", "0"), &[2.0], &none(), &[hi()], 1e-3, 10.0, 4, 0).is_err());
}

#[test]
fn multi_start_matches_single_start() {
    let spec = ProblemSpec::example57(1.0).unwrap();
    let ctrl = ControlPolicy::Constant(vec![1.0]);
    let family = [lo(), hi()];
    let starts = vec![vec![-2.0], vec![0.0], vec![3.0]];
    let all = discounted_costs(&spec, &starts, &ctrl, &family, 1e-2, 6.0, 300, 9).unwrap();
    for (x0, est) in starts.iter().zip(&all) {
        let single = discounted_cost(&spec, x0, &ctrl, &family, 1e-2, 6.0, 300, 9).unwrap();
        assert_eq!(&single, est);
        let exact = (x0[0] - 1.0) / 2.0;
        assert!(
            (est.value - exact).abs() < 4.0 * est.std_error + 2e-2,
            "{x0:?}: {est:?}"
        );
    }
}

#[test]
fn control_set_is_respected() {
    let spec = ProblemSpec::builder(1, 1, 1)
        .drift(0, "u1")
        .f("-y")
        .gamma(gamma())
        .controls(ControlSet::interval(0.0, 1.0).unwrap())
        .build()
        .unwrap();
    let outside = ControlPolicy::Constant(vec![2.0]);
    assert!(simulate_gsde(&spec, &[0.0], &outside, &hi(), 1e-2, 1.0, 1, 0).is_err());
}
