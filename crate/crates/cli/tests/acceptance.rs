//! Acceptance run: one PASS/FAIL line per criterion, criteria executed one
//! after another so that wall-clock budgets are measured without
//! interference from other tests.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use hjbi_core::hjbi::{
    build_grid, dpp_residual, horizon_fields, solve_elliptic, Grid, Scheme, SolveReport, ValueField,
};
use hjbi_core::montecarlo::{
    discounted_costs, exp_martingale_moment, flow_contraction_estimate, ControlPolicy, VolatilityPolicy,
};
use hjbi_core::verification::{example57_oracle, fit_growth_lipschitz, verify_control_residual, DerivativeSource};
use hjbi_core::{g_of, ProblemSpec, UncertaintySet};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SOLVE_TOL: f64 = 1e-6;
const VALUE_SUP_ERROR: f64 = 2e-2;
const SOLVE_SECONDS: f64 = 60.0;
const RATE_FRACTION: f64 = 0.8;
const DPP_FACTOR: f64 = 5.0;
const DPP_S: f64 = 0.1;
const MONOTONE_SLACK: f64 = 1e-12;
const MONOTONE_PAIRS: usize = 50;
const COST_SE_MULTIPLE: f64 = 3.0;
const COST_ABS: f64 = 1e-2;
const COST_VS_PDE: f64 = 3e-2;
const COST_SECONDS: f64 = 120.0;
const COST_PATHS: usize = 100_000;
const G_TOL: f64 = 1e-12;
const G_SAMPLES: usize = 100;
const MOMENT_PATHS: usize = 100_000;
const MOMENT_SE_MULTIPLE: f64 = 3.0;
const CONTRACTION_SE_MULTIPLE: f64 = 3.0;
const CONTRACTION_EXACT: f64 = 1e-10;
const LIPSCHITZ_CHANGE: f64 = 0.2;
const ANALYTIC_TOL: f64 = 1e-10;

struct Solved {
    spec: ProblemSpec,
    grid: Grid,
    field: ValueField,
    report: SolveReport,
    seconds: f64,
}

fn example_grid(count: usize) -> Grid {
    build_grid(&[(-5.0, 5.0)], &[count]).unwrap()
}

/// Solves the built-in example on `count` nodes inside a one-thread pool.
fn solve_example(count: usize) -> Solved {
    let spec = ProblemSpec::example57(1.0).unwrap();
    let grid = example_grid(count);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let (field, report) = pool.install(|| solve_elliptic(&spec, &grid, SOLVE_TOL, None)).unwrap();
    Solved {
        spec,
        grid,
        field,
        report,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_1(s: &Solved) -> (bool, String) {
    let nodes = s.grid.interior_nodes();
    let sup = nodes
        .iter()
        .map(|&k| (s.field.value(k) - (s.grid.coords(k)[0] - 1.0) / 2.0).abs())
        .fold(0.0, f64::max);
    let policy = s.field.policy().unwrap();
    let ones = nodes
        .iter()
        .filter(|&&k| s.spec.controls().point(policy[k]) == [1.0])
        .count();
    let pass = s.report.converged && sup <= VALUE_SUP_ERROR && ones == nodes.len() && s.seconds <= SOLVE_SECONDS;
    (
        pass,
        format!(
            "sup |V - (x-1)/2| = {sup:.3e} (<= {VALUE_SUP_ERROR:.0e}), u = 1 at {ones}/{} interior nodes, \
             converged = {}, {:.1} s single-threaded (<= {SOLVE_SECONDS} s)",
            nodes.len(),
            s.report.converged,
            s.seconds
        ),
    )
}

/// Rate of `‖V_T − V_{2T}‖∞` over the trusted subgrid, from a least-squares
/// fit of its logarithm against `T`.
fn truncation_rate(spec: &ProblemSpec, grid: &Grid, initial: Option<&ValueField>) -> (f64, Vec<f64>) {
    let ts = [2.0, 4.0, 6.0, 8.0];
    let mut horizons: Vec<f64> = ts.iter().flat_map(|t| [*t, 2.0 * t]).collect();
    horizons.sort_by(f64::total_cmp);
    horizons.dedup();
    let fields = horizon_fields(spec, grid, &horizons, initial).unwrap();
    let at = |t: f64| &fields[horizons.iter().position(|h| *h == t).unwrap()];
    let nodes = grid.interior_nodes();
    let gaps: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let (a, b) = (at(t), at(2.0 * t));
            nodes
                .iter()
                .map(|&k| (a.value(k) - b.value(k)).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let logs: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    let mt = ts.iter().sum::<f64>() / 4.0;
    let ml = logs.iter().sum::<f64>() / 4.0;
    let sxy: f64 = ts.iter().zip(&logs).map(|(t, l)| (t - mt) * (l - ml)).sum();
    let sxx: f64 = ts.iter().map(|t| (t - mt).powi(2)).sum();
    (-sxy / sxx, gaps)
}

fn criterion_2() -> (bool, String) {
    let grid = example_grid(101);
    let example = ProblemSpec::example57(1.0).unwrap();
    let (rate_a, gaps_a) = truncation_rate(&example, &grid, None);

    let lambda = 2.0;
    let discount = ProblemSpec::builder(1, 1, 0)
        .f(&format!("-{lambda} * y"))
        .gamma(UncertaintySet::interval(0.25, 1.0).unwrap())
        .build()
        .unwrap();
    let ones = ValueField::from_fn(grid.clone(), |_| 1.0).unwrap();
    let (rate_b, gaps_b) = truncation_rate(&discount, &grid, Some(&ones));

    let pass = rate_a >= RATE_FRACTION * 1.0 && rate_b >= RATE_FRACTION * lambda;
    let show = |g: &[f64]| g.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join(" ");
    (
        pass,
        format!(
            "example rate {rate_a:.3} (>= {:.1}), gaps [{}]; discount-only rate {rate_b:.3} (>= {:.1}), gaps [{}]; 101 nodes",
            RATE_FRACTION,
            show(&gaps_a),
            RATE_FRACTION * lambda,
            show(&gaps_b)
        ),
    )
}

fn criterion_3(s: &Solved) -> (bool, String) {
    let dt_max = Scheme::new(&s.spec, &s.grid).unwrap().dt_max();
    let dt = DPP_S / (DPP_S / dt_max).ceil();
    let r = dpp_residual(&s.spec, &s.field, DPP_S, dt).unwrap();
    (
        r <= DPP_FACTOR * SOLVE_TOL,
        format!(
            "DPP residual at s = {DPP_S}: {r:.3e} (<= {:.0e})",
            DPP_FACTOR * SOLVE_TOL
        ),
    )
}

fn criterion_4() -> (bool, String) {
    let spec = ProblemSpec::example57(1.0).unwrap();
    let grid = example_grid(401);
    let scheme = Scheme::new(&spec, &grid).unwrap();
    let dt = scheme.dt_max();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..MONOTONE_PAIRS {
        let phi: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-10.0..10.0)).collect();
        let psi: Vec<f64> = phi.iter().map(|v| v + rng.random_range(0.0..5.0)).collect();
        let a = scheme.step(&ValueField::new(grid.clone(), phi).unwrap(), dt).unwrap();
        let b = scheme.step(&ValueField::new(grid.clone(), psi).unwrap(), dt).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            worst = worst.max(x - y);
            if x - y > MONOTONE_SLACK {
                violations += 1;
            }
        }
    }
    (
        violations == 0,
        format!("{MONOTONE_PAIRS} pairs, {violations} violations, max step(phi) - step(psi) = {worst:.3e}"),
    )
}

fn criterion_5(s: &Solved) -> (bool, String) {
    let spec = &s.spec;
    let starts = vec![vec![-2.0], vec![0.0], vec![3.0]];
    let family = [
        VolatilityPolicy::constant_scalar(0.25),
        VolatilityPolicy::constant_scalar(1.0),
    ];
    let start = Instant::now();
    let estimates = discounted_costs(
        spec,
        &starts,
        &ControlPolicy::Constant(vec![1.0]),
        &family,
        1e-3,
        15.0,
        COST_PATHS,
        0,
    )
    .unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let mut pass = seconds <= COST_SECONDS;
    let mut parts = Vec::new();
    for (x0, e) in starts.iter().zip(&estimates) {
        let exact = (x0[0] - 1.0) / 2.0;
        let pde = s.field.value(s.grid.nearest_node(x0));
        let err = (e.value - exact).abs();
        let ok = err <= COST_SE_MULTIPLE * e.std_error && err <= COST_ABS && (e.value - pde).abs() <= COST_VS_PDE;
        pass &= ok;
        parts.push(format!(
            "x0 = {}: {:.5} (se {:.1e}, exact {exact}, pde {pde:.5})",
            x0[0], e.value, e.std_error
        ));
    }
    (
        pass,
        format!(
            "{}; {COST_PATHS} paths in {seconds:.1} s (<= {COST_SECONDS} s)",
            parts.join("; ")
        ),
    )
}

fn random_sym(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-10.0..10.0));
    (&a + a.transpose()) * 0.5
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let c = DMatrix::from_fn(d, d, |_, _| rng.random_range(-3.0..3.0));
    &c * c.transpose()
}

fn criterion_6() -> (bool, String) {
    let m = |a: f64, b: f64, c: f64| DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
    let sets = [
        UncertaintySet::interval(0.25, 1.0).unwrap(),
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
        .unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = 0;
    let mut worst = 0.0_f64;
    for gamma in &sets {
        let d = gamma.dim();
        let g = |a: &DMatrix<f64>| g_of(gamma, a).unwrap();
        for _ in 0..G_SAMPLES {
            let (a, b, p) = (
                random_sym(&mut rng, d),
                random_sym(&mut rng, d),
                random_psd(&mut rng, d),
            );
            let t = rng.random_range(0.0..10.0);
            let homogeneity = (g(&(&a * t)) - t * g(&a)).abs();
            let subadditivity = g(&(&a + &b)) - g(&a) - g(&b);
            let diff = g(&a) - g(&(&a - &p));
            let lower = 0.5 * gamma.sigma_lo2() * p.trace() - diff;
            let upper = diff - 0.5 * gamma.sigma_hi2() * p.trace();
            let excess = homogeneity.max(subadditivity).max(lower).max(upper);
            worst = worst.max(excess);
            if excess > G_TOL {
                failures += 1;
            }
        }
    }
    (
        failures == 0,
        format!("{G_SAMPLES} inputs each for d = 1 and d = 2, {failures} failures, worst excess {worst:.2e} (<= {G_TOL:.0e})"),
    )
}

fn criterion_7() -> (bool, String) {
    let gamma = UncertaintySet::interval(0.25, 1.0).unwrap();
    let mut pass = true;
    let mut worst_margin = f64::INFINITY;
    for q in [0.25, 1.0] {
        for p in [1.0, 2.0, 3.0] {
            for alpha2 in [0.0, 0.5] {
                let m = exp_martingale_moment(&gamma, alpha2, q, p, 1.0, MOMENT_PATHS, 7).unwrap();
                let margin = m.bound + MOMENT_SE_MULTIPLE * m.std_error - m.estimate;
                worst_margin = worst_margin.min(margin);
                pass &= margin >= 0.0;
            }
        }
    }
    let m = exp_martingale_moment(&gamma, 0.5, 1.0, 2.0, 1.0, MOMENT_PATHS, 7).unwrap();
    let target = 0.25f64.exp();
    let close = (m.estimate - target).abs() <= MOMENT_SE_MULTIPLE * m.std_error;
    (
        pass && close,
        format!(
            "12 cases, smallest bound + 3 se - estimate = {worst_margin:.3e}; p = 2, alpha2 = 0.5: {:.5} (se {:.1e}) vs e^0.25 = {target:.5}",
            m.estimate, m.std_error
        ),
    )
}

fn criterion_8() -> (bool, String) {
    let gamma = UncertaintySet::interval(0.25, 1.0).unwrap();
    let linear = |drift: &str, sigma: &str| {
        ProblemSpec::builder(1, 1, 0)
            .drift(0, drift)
            .sigma(0, 0, sigma)
            .f("-y")
            .gamma(gamma.clone())
            .build()
            .unwrap()
    };
    let none = ControlPolicy::Constant(Vec::new());
    let hi = VolatilityPolicy::constant_scalar(1.0);
    let dt = 1e-3;

    let a = flow_contraction_estimate(&linear("-x1", "0"), &[1.0], &[-1.0], &hi, &none, dt, 1.0, 100, 8).unwrap();
    let euler = 4.0 * (1.0 - dt).powi(2000);
    let per_path = (a.min_sample - euler).abs().max((a.max_sample - euler).abs());
    let ok_a = a.estimate <= a.bound + CONTRACTION_SE_MULTIPLE * a.std_error && per_path <= CONTRACTION_EXACT;

    let b = flow_contraction_estimate(
        &linear("-2 * x1", "0.5 * x1"),
        &[1.0],
        &[0.0],
        &hi,
        &none,
        dt,
        1.0,
        10_000,
        8,
    )
    .unwrap();
    let ok_b = b.estimate <= b.bound + CONTRACTION_SE_MULTIPLE * b.std_error && b.flagged == 0;
    (
        ok_a && ok_b,
        format!(
            "b = -x, sigma = 0: {:.6e} vs bound {:.6e}, per-path deviation from Euler flow {per_path:.1e}; \
             b = -2x, sigma = x/2: {:.4e} (se {:.1e}) vs bound {:.4e}",
            a.estimate, a.bound, b.estimate, b.std_error, b.bound
        ),
    )
}

fn criterion_9(fine: &Solved) -> (bool, String) {
    let coarse = solve_example(201);
    let a = fit_growth_lipschitz(&coarse.field).unwrap();
    let b = fit_growth_lipschitz(&fine.field).unwrap();
    let change = (a.c_lip - b.c_lip).abs() / b.c_lip;
    let finite = [a.c_growth, a.c_lip, b.c_growth, b.c_lip].iter().all(|v| v.is_finite());
    (
        finite && change < LIPSCHITZ_CHANGE,
        format!(
            "C_growth {:.4} / {:.4}, C_lip {:.4} / {:.4} on 201 / 401 nodes, change {:.2}% (< {:.0}%)",
            a.c_growth,
            b.c_growth,
            a.c_lip,
            b.c_lip,
            100.0 * change,
            100.0 * LIPSCHITZ_CHANGE
        ),
    )
}

fn criterion_10() -> (bool, String) {
    let lambda = 1.0;
    let spec = ProblemSpec::example57(lambda).unwrap();
    let field = ValueField::from_fn(example_grid(401), |x| example57_oracle(lambda, x[0]).unwrap().0).unwrap();
    let gradient = |_: &[f64]| vec![1.0 / (lambda + 1.0)];
    let hessian = |_: &[f64]| DMatrix::zeros(1, 1);
    let run = |u: f64| {
        let source = DerivativeSource::Analytic {
            gradient: &gradient,
            hessian: &hessian,
        };
        verify_control_residual(&spec, &field, &ControlPolicy::Constant(vec![u]), source, ANALYTIC_TOL).unwrap()
    };
    let optimal = run(1.0);
    let lazy = run(0.0);
    let off = lazy.pointwise.iter().map(|r| (r - 0.5).abs()).fold(0.0, f64::max);
    (
        optimal.sup <= ANALYTIC_TOL && off <= ANALYTIC_TOL,
        format!(
            "u = 1: sup residual {:.1e}; u = 0: max |residual - 0.5| = {off:.1e} over {} nodes (<= {ANALYTIC_TOL:.0e})",
            optimal.sup,
            lazy.nodes.len()
        ),
    )
}

const DETERMINISM_PROBLEM: &str = "\
[dimensions]
n = 1
d = 1
m = 1
[dynamics]
b_1 = -x1 + u1
sigma_11 = x1 + u1
[cost]
psi = x1 - u1
lambda = 1
[uncertainty]
sigma_lo2 = 0.25
sigma_hi2 = 1
[control]
lower = 0
upper = 1
points = 33
[solver]
bounds = -5 5
counts = 101
tol = 1e-6
[mc]
dt = 1e-3
t_cut = 15
n_paths = 2000
sim_paths = 100
x0 = -2; 0; 3
control = 1
";

fn run_cli(dir: &Path, problem: &Path, threads: &str) -> Result<Vec<Vec<u8>>, String> {
    for cmd in ["solve", "simulate", "cost"] {
        let out = Command::new(env!("CARGO_BIN_EXE_hjbi"))
            .args([cmd, "--problem"])
            .arg(problem)
            .args(["--threads", threads, "--out-dir"])
            .arg(dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    [
        "value.csv",
        "solve_report.json",
        "paths.csv",
        "simulate_summary.json",
        "cost.json",
    ]
    .iter()
    .map(|f| std::fs::read(dir.join(f)).map_err(|e| e.to_string()))
    .collect()
}

fn criterion_11() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("problem.txt");
    std::fs::write(&problem, DETERMINISM_PROBLEM).unwrap();
    let one = run_cli(&dir.path().join("t1"), &problem, "1");
    let four = run_cli(&dir.path().join("t4"), &problem, "4");
    match (one, four) {
        (Ok(a), Ok(b)) => {
            let same = a == b;
            let bytes: usize = a.iter().map(Vec::len).sum();
            (
                same,
                format!("solve, simulate and cost outputs ({bytes} bytes) identical for --threads 1 and 4: {same}"),
            )
        }
        (Err(e), _) | (_, Err(e)) => (false, format!("command failed: {e}")),
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, (pass, detail): (bool, String)| {
        println!("criterion {n:>2}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failures += 1;
        }
    };
    let solved = solve_example(401);
    report(1, criterion_1(&solved));
    report(2, criterion_2());
    report(3, criterion_3(&solved));
    report(4, criterion_4());
    report(5, criterion_5(&solved));
    report(6, criterion_6());
    report(7, criterion_7());
    report(8, criterion_8());
    report(9, criterion_9(&solved));
    report(10, criterion_10());
    report(11, criterion_11());
    if failures == 0 {
        println!("acceptance: all 11 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 11 criteria fail");
        ExitCode::FAILURE
    }
}
