use hjbi_core::hjbi::{build_grid, hjbi_residual_at, solve_elliptic, ValueField};
use hjbi_core::montecarlo::ControlPolicy;
use hjbi_core::verification::{
    example57_oracle, fit_growth_lipschitz, verify_control_residual, DerivativeSource, RESIDUAL_TOLERANCE_FACTOR,
};
use hjbi_core::{ControlSet, ProblemSpec, UncertaintySet};
use nalgebra::DMatrix;

fn oracle_field(lambda: f64, count: usize) -> ValueField {
    let grid = build_grid(&[(-5.0, 5.0)], &[count]).unwrap();
    ValueField::from_fn(grid, |x| example57_oracle(lambda, x[0]).unwrap().0).unwrap()
}

#[test]
fn analytic_residual_of_the_closed_form() {
    let lambda = 1.0;
    let spec = ProblemSpec::example57(lambda).unwrap();
    let field = oracle_field(lambda, 401);
    let gradient = |_: &[f64]| vec![1.0 / (lambda + 1.0)];
    let hessian = |_: &[f64]| DMatrix::zeros(1, 1);
    let source = || DerivativeSource::Analytic {
        gradient: &gradient,
        hessian: &hessian,
    };

    let optimal = verify_control_residual(&spec, &field, &ControlPolicy::Constant(vec![1.0]), source(), 1e-10).unwrap();
    assert!(optimal.pass && optimal.sup <= 1e-10, "{}", optimal.sup);
    assert_eq!(optimal.nodes, field.grid().interior_nodes());

    let lazy = verify_control_residual(&spec, &field, &ControlPolicy::Constant(vec![0.0]), source(), 1e-10).unwrap();
    assert!(!lazy.pass);
    for r in &lazy.pointwise {
        assert!((r - 0.5).abs() < 1e-12, "{r}");
    }
}

#[test]
fn oracle_solves_the_equation() {
    for lambda in [0.5, 1.0, 2.0] {
        let spec = ProblemSpec::example57(lambda).unwrap();
        for i in 0..100 {
            let x = -5.0 + 10.0 * i as f64 / 99.0;
            let (v, u) = example57_oracle(lambda, x).unwrap();
            let r = hjbi_residual_at(&spec, &[x], v, &[1.0 / (lambda + 1.0)], &DMatrix::zeros(1, 1)).unwrap();
            assert!(r.residual.abs() <= 1e-10, "lambda {lambda}, x {x}: {}", r.residual);
            assert_eq!(r.control, vec![u]);
        }
    }
    assert!(example57_oracle(0.0, 1.0).is_err());
}

#[test]
fn zero_problem_has_zero_residual() {
    let spec = ProblemSpec::builder(1, 1, 1)
        .gamma(UncertaintySet::interval(0.25, 1.0).unwrap())
        .controls(ControlSet::interval(0.0, 1.0).unwrap())
        .build()
        .unwrap();
    let grid = build_grid(&[(-1.0, 1.0)], &[21]).unwrap();
    let r = verify_control_residual(
        &spec,
        &ValueField::zeros(grid),
        &ControlPolicy::Constant(vec![0.5]),
        DerivativeSource::Stencil,
        0.0,
    )
    .unwrap();
    assert_eq!(r.sup, 0.0);
    assert!(r.pass);
}

#[test]
fn solved_field_passes_the_stencil_check() {
    let tol = 1e-6;
    let spec = ProblemSpec::example57(1.0).unwrap();
    let grid = build_grid(&[(-5.0, 5.0)], &[101]).unwrap();
    let (field, report) = solve_elliptic(&spec, &grid, tol, None).unwrap();
    assert!(report.converged);
    let ctrl = ControlPolicy::Feedback(field.clone());
    let r = verify_control_residual(
        &spec,
        &field,
        &ctrl,
        DerivativeSource::Stencil,
        RESIDUAL_TOLERANCE_FACTOR * tol,
    )
    .unwrap();
    assert!(r.pass, "{}", r.sup);

    let fit = fit_growth_lipschitz(&field).unwrap();
    // V = (x − 1)/2: neighbours at 0 and h give the largest ratio, 0.5/(1 + h);
    // |V|/(1 + x²) peaks at x = 1 − √2 with value (1 + √2)/4.
    assert!((fit.c_lip - 0.5 / 1.1).abs() < 1e-4, "{fit:?}");
    assert!((fit.c_growth - (1.0 + 2f64.sqrt()) / 4.0).abs() < 1e-3, "{fit:?}");
    let k = grid.interior_nodes().len();
    assert_eq!(fit.pairs, k * (k - 1) / 2);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let spec = ProblemSpec::example57(1.0).unwrap();
    let grid = build_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &[5, 5]).unwrap();
    let field = ValueField::zeros(grid);
    assert!(verify_control_residual(
        &spec,
        &field,
        &ControlPolicy::Constant(vec![1.0]),
        DerivativeSource::Stencil,
        1.0
    )
    .is_err());
    assert!(verify_control_residual(
        &spec,
        &oracle_field(1.0, 11),
        &ControlPolicy::Constant(vec![1.0]),
        DerivativeSource::Stencil,
        -1.0
    )
    .is_err());
}
