use std::collections::HashMap;

use hjbi_core::expr::{BinaryOp, UnaryOp};
use hjbi_core::gfunc::g_scalar;
use hjbi_core::{
    check_assumptions, eval_expression, g_of, parse_expression, ControlSet, Error, Expr, ProblemSpec, SampleBox,
    UncertaintySet,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

const VARS: [&str; 5] = ["x1", "x2", "u1", "y", "z1"];

fn gamma1() -> UncertaintySet {
    UncertaintySet::interval(0.25, 1.0).unwrap()
}

fn gamma2() -> UncertaintySet {
    let m = |a: f64, b: f64, c: f64| DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
    UncertaintySet::new(
        2,
        0.25,
        1.0,
        vec![
            m(0.25, 0.0, 0.25),
            m(1.0, 0.0, 1.0),
            m(0.25, 0.0, 1.0),
            m(1.0, 0.0, 0.25),
            m(0.625, 0.375, 0.625),
        ],
    )
    .unwrap()
}

fn sym(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0..10.0f64, d * d).prop_map(move |v| {
        let a = DMatrix::from_row_slice(d, d, &v);
        (&a + a.transpose()) * 0.5
    })
}

fn psd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0..3.0f64, d * d).prop_map(move |v| {
        let c = DMatrix::from_row_slice(d, d, &v);
        &c * c.transpose()
    })
}

fn check_g_properties(gamma: &UncertaintySet, a: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>, t: f64) {
    let g = |m: &DMatrix<f64>| g_of(gamma, m).unwrap();
    assert!((g(&(a * t)) - t * g(a)).abs() <= 1e-12, "homogeneity");
    assert!(g(&(a + b)) <= g(a) + g(b) + 1e-12, "subadditivity");
    let lower = a - p;
    let diff = g(a) - g(&lower);
    let tr = p.trace();
    assert!(0.5 * gamma.sigma_lo2() * tr - 1e-12 <= diff, "sandwich lower");
    assert!(diff <= 0.5 * gamma.sigma_hi2() * tr + 1e-12, "sandwich upper");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn g_properties_scalar(a in sym(1), b in sym(1), p in psd(1), t in 0.0..10.0f64) {
        check_g_properties(&gamma1(), &a, &b, &p, t);
    }

    #[test]
    fn g_properties_two_dimensional(a in sym(2), b in sym(2), p in psd(2), t in 0.0..10.0f64) {
        check_g_properties(&gamma2(), &a, &b, &p, t);
    }

    #[test]
    fn scalar_g_is_endpoint_maximum(a in -50.0..50.0f64) {
        // Brute force over the two endpoints of [σ̲², σ̄²].
        let brute = (0.5 * a * 0.25).max(0.5 * a * 1.0);
        prop_assert_eq!(g_scalar(&gamma1(), a), brute);
    }
}

#[test]
fn g_examples() {
    let g = gamma1();
    assert_eq!(g_of(&g, &DMatrix::from_element(1, 1, 2.0)).unwrap(), 1.0);
    assert_eq!(g_of(&g, &DMatrix::from_element(1, 1, -2.0)).unwrap(), -0.25);
    assert_eq!(g_of(&gamma2(), &DMatrix::zeros(2, 2)).unwrap(), 0.0);
    assert!(matches!(
        g_of(&g, &DMatrix::zeros(2, 2)),
        Err(Error::DimensionMismatch(_))
    ));
    assert!(matches!(
        UncertaintySet::new(2, 0.25, 1.0, Vec::new()),
        Err(Error::EmptyCandidates(2))
    ));
    assert!(UncertaintySet::new(1, 0.0, 1.0, Vec::new()).is_err());
    // Candidate outside the bounds.
    assert!(UncertaintySet::new(2, 0.25, 1.0, vec![DMatrix::identity(2, 2) * 2.0]).is_err());
}

const CORPUS: [&str; 52] = [
    "x1 + u1",
    "-x1 + u1",
    "x1 - u1",
    "(x1 + u1)",
    "x1 * x2",
    "x1 / 2",
    "2 * x1 - 3 * x2 + 1",
    "-(x1)",
    "--x1",
    "-x1 * -u1",
    "x1 ^ 2",
    "x1 ^ 2 ^ 3",
    "pow(x1, 3)",
    "exp(x1)",
    "exp(-x1 * x1 / 2)",
    "abs(x1 - x2)",
    "sqrt(1 + x1 * x1)",
    "min(x1, 0)",
    "max(x1, 0)",
    "max(min(x1, 1), -1)",
    "-y + x1 - u1",
    "-2 * y + z1",
    "y * z1 - x2",
    "1e-3 * x1",
    "1.5e2",
    "0.25",
    "3",
    "x1 + x2 + u1 + y + z1",
    "x1 - x2 - u1",
    "x1 / x2 / u1",
    "x1 * (x2 + u1)",
    "(x1 + x2) * (x1 - x2)",
    "exp(abs(x1))",
    "sqrt(abs(y))",
    "min(max(x1, x2), u1)",
    "pow(abs(x1), 0.5)",
    "-(x1 + u1) * (x1 + u1)",
    "2 ^ -x1",
    "-x1 ^ 2",
    "x1 * -2",
    "(((x1)))",
    "1 / (1 + exp(-x1))",
    "max(0, 1 - abs(x1))",
    "0.5 * (x1 + abs(x1))",
    "x1 - (x2 - (u1 - y))",
    "z1 * z1 + y * y",
    "exp(x1) * exp(-x1)",
    "min(x1, min(x2, min(u1, y)))",
    "-exp(-y)",
    "x1 * x1 * x1 - 3 * x1",
    "sqrt(x1 * x1 + x2 * x2 + 1e-12)",
    "4 / 3 * x1",
];

fn reparse(e: &Expr) -> Expr {
    parse_expression(&e.to_string(), &VARS).unwrap_or_else(|err| panic!("`{e}` does not reparse: {err}"))
}

#[test]
fn corpus_round_trips() {
    for text in CORPUS {
        let first = parse_expression(text, &VARS).unwrap_or_else(|e| panic!("{text}: {e}"));
        assert_eq!(reparse(&first), first, "{text}");
    }
}

fn expr_tree() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-1e3..1e3f64).prop_map(Expr::constant),
        prop::sample::select(VARS.to_vec()).prop_map(Expr::var),
    ];
    leaf.prop_recursive(5, 48, 2, |inner| {
        let unary = prop::sample::select(vec![UnaryOp::Neg, UnaryOp::Exp, UnaryOp::Abs, UnaryOp::Sqrt]);
        let binary = prop::sample::select(vec![
            BinaryOp::Add,
            BinaryOp::Sub,
            BinaryOp::Mul,
            BinaryOp::Div,
            BinaryOp::Min,
            BinaryOp::Max,
            BinaryOp::Pow,
        ]);
        prop_oneof![
            (unary, inner.clone()).prop_map(|(op, a)| Expr::unary(op, a)),
            (binary, inner.clone(), inner).prop_map(|(op, a, b)| Expr::binary(op, a, b)),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn printed_form_reparses(tree in expr_tree()) {
        let first = parse_expression(&tree.to_string(), &VARS).unwrap();
        prop_assert_eq!(reparse(&first), first);
    }

    #[test]
    fn evaluation_is_finite_or_an_error(tree in expr_tree(), xs in prop::collection::vec(-5.0..5.0f64, 5)) {
        let bindings: HashMap<String, f64> = VARS.iter().map(|v| v.to_string()).zip(xs).collect();
        match eval_expression(&tree, &bindings) {
            Ok(v) => prop_assert!(v.is_finite()),
            Err(e) => prop_assert!(matches!(
                e,
                Error::DivisionByZero | Error::SqrtOfNegative(_) | Error::NonFinite
            ), "{e}"),
        }
    }
}

#[test]
fn parse_and_eval_examples() {
    let b = parse_expression("-x1 + u1", &["x1", "u1"]).unwrap();
    let at = HashMap::from([("x1".to_string(), 2.0), ("u1".to_string(), 1.0)]);
    assert_eq!(eval_expression(&b, &at).unwrap(), -1.0);
    let s = parse_expression("x1 + u1", &["x1", "u1"]).unwrap();
    assert_eq!(eval_expression(&s, &at).unwrap(), 3.0);
    assert_eq!(eval_expression(&Expr::constant(7.0), &HashMap::new()).unwrap(), 7.0);
    let m = parse_expression("max(x1, 0)", &["x1"]).unwrap();
    assert_eq!(
        eval_expression(&m, &HashMap::from([("x1".to_string(), -3.0)])).unwrap(),
        0.0
    );
    assert!(matches!(
        parse_expression("x1 +", &["x1"]),
        Err(Error::Syntax { offset: 4, .. })
    ));
    assert!(matches!(
        parse_expression("x1 + w", &["x1"]),
        Err(Error::UnknownIdentifier { ref name, .. }) if name == "w"
    ));
    assert!(matches!(
        eval_expression(&s, &HashMap::new()),
        Err(Error::MissingBinding(_))
    ));
}

fn example_box(spec: &ProblemSpec) -> SampleBox {
    SampleBox::new(vec![(-5.0, 5.0); spec.n()], spec.d())
}

#[test]
fn assumption_examples() {
    let spec = ProblemSpec::example57(1.0).unwrap();
    let report = check_assumptions(&spec, &example_box(&spec), 2000, 3).unwrap();
    assert!((report.mu_hat - 1.0).abs() < 1e-12, "{}", report.mu_hat);
    assert!(report.verdict("B1").unwrap().pass);
    assert_eq!(report, check_assumptions(&spec, &example_box(&spec), 2000, 3).unwrap());

    let expanding = ProblemSpec::builder(1, 1, 0)
        .drift(0, "x1")
        .f("-y")
        .gamma(UncertaintySet::interval(0.25, 1.0).unwrap())
        .controls(ControlSet::empty())
        .build()
        .unwrap();
    let report = check_assumptions(&expanding, &example_box(&expanding), 500, 0).unwrap();
    assert!(report.eta_hat <= -1.0, "{}", report.eta_hat);
    assert!(!report.verdict("B4").unwrap().pass);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn assumption_report_is_reproducible(seed in any::<u64>(), lambda in 0.1..5.0f64) {
        let spec = ProblemSpec::example57(lambda).unwrap();
        let a = check_assumptions(&spec, &example_box(&spec), 200, seed).unwrap();
        let b = check_assumptions(&spec, &example_box(&spec), 200, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let expected = a.eta_hat - (1.0 + a.sigma_hi2) * a.alpha1 * a.alpha2;
        prop_assert_eq!(a.eta_bar_hat, expected);
    }
}
