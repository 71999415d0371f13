use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hjbi_core::hjbi::{dpp_residual, solve_elliptic_with, Grid, Scheme, SolveOptions, ValueField};
use hjbi_core::montecarlo::{discounted_costs, simulate_gsde, ControlPolicy, CostEstimate, VolatilityPolicy};
use hjbi_core::verification::{
    example57_oracle, fit_growth_lipschitz, verify_control_residual, DerivativeSource, RESIDUAL_TOLERANCE_FACTOR,
};
use hjbi_core::{check_assumptions, to_record, ProblemSpec, SampleBox};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::problem_file::{load_problem, LoadError, ProblemFile};
use crate::OUT_DIR_ENV;

#[derive(Debug, Parser)]
#[command(name = "hjbi", version, about = "HJBI solver and G-SDE simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Problem file, or `example57` for the built-in example.
    #[arg(long, global = true)]
    pub problem: Option<String>,

    /// Discount rate of the built-in example.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,

    /// Overrides the seed of the `[mc]` section.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; defaults to `$HJBI_OUT_DIR`, then `.`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// Worker threads (all cores by default).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the HJBI equation; writes value.csv and solve_report.json.
    Solve {
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Simulate paths; writes paths.csv and simulate_summary.json.
    Simulate {
        /// Initial state, components separated by commas.
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        /// Constant control, components separated by commas.
        #[arg(long, allow_hyphen_values = true)]
        control: Option<String>,
        /// `lo`, `hi`, a number (d = 1), or `feedback` (needs --field).
        #[arg(long, default_value = "hi")]
        scenario: String,
        /// Solved field used by the feedback scenario.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Discounted cost under the constant scenarios at the ends of Γ, its
    /// candidate matrices and, with --field, the feedback scenario; writes
    /// cost.json.
    Cost {
        /// Initial states separated by `;`, components by commas.
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        control: Option<String>,
        /// Solved field; adds its feedback volatility scenario and supplies
        /// the control when none is given.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_cut: Option<f64>,
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Optimality residual of a control on a field; writes verify.json.
    Verify {
        /// Field CSV; the problem is solved when absent.
        #[arg(long)]
        field: Option<PathBuf>,
        /// Constant control; the field's policy is used when absent.
        #[arg(long, allow_hyphen_values = true)]
        control: Option<String>,
        /// Closed-form value and derivatives (built-in example only).
        #[arg(long)]
        analytic: bool,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Sampled assumption constants; writes check.json.
    Check {
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Dynamic programming residual `sup |V − S_s V|`; writes dpp.json.
    Dpp {
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        s: f64,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Load(#[from] LoadError),

    #[error(transparent)]
    Core(#[from] hjbi_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Load(LoadError::Invalid(e)) if e.is_numerical() => 3,
            CliError::NotConverged(_) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Executes one invocation.
pub fn run(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let source = cli
        .problem
        .as_deref()
        .ok_or_else(|| CliError::Usage("--problem is required".into()))?;
    let problem = load_problem(source, cli.lambda)?;
    let out = Output::new(cli.out_dir.clone());
    let seed = cli.seed.unwrap_or(problem.mc.seed);
    match &cli.command {
        Command::Solve { tol } => solve(&problem, *tol, &out),
        Command::Simulate {
            x0,
            control,
            scenario,
            field,
            dt,
            horizon,
            paths,
        } => {
            let x0 = match x0 {
                Some(t) => parse_list(t, problem.spec.n(), "--x0")?,
                None => problem.mc.x0[0].clone(),
            };
            let field = field.as_deref().map(|p| read_field(&problem, p)).transpose()?;
            let ctrl = control_policy(&problem, control.as_deref(), field.as_ref())?;
            let vol = scenario_policy(&problem.spec, scenario, field.as_ref())?;
            let bundle = simulate_gsde(
                &problem.spec,
                &x0,
                &ctrl,
                &vol,
                dt.unwrap_or(problem.mc.dt),
                horizon.unwrap_or(problem.mc.horizon),
                paths.unwrap_or(problem.mc.sim_paths),
                seed,
            )?;
            out.write("paths.csv", &bundle.to_csv())?;
            out.write("simulate_summary.json", &to_record(&bundle.summary())?)?;
            if bundle.flagged_count() > 0 {
                eprintln!("warning: {} paths overflowed and were flagged", bundle.flagged_count());
            }
            Ok(())
        }
        Command::Cost {
            x0,
            control,
            field,
            dt,
            t_cut,
            paths,
        } => {
            let starts = match x0 {
                Some(t) => t
                    .split(';')
                    .map(|p| parse_list(p, problem.spec.n(), "--x0"))
                    .collect::<Result<Vec<_>>>()?,
                None => problem.mc.x0.clone(),
            };
            let field = field.as_deref().map(|p| read_field(&problem, p)).transpose()?;
            let ctrl = control_policy(&problem, control.as_deref(), field.as_ref())?;
            let mut scenarios = constant_scenarios(&problem.spec);
            if let Some(f) = &field {
                scenarios.push(VolatilityPolicy::Feedback(f.clone()));
            }
            let lambda = problem
                .spec
                .discount()
                .map(|d| d.lambda)
                .ok_or_else(|| CliError::Usage("cost needs a problem given by psi and lambda".into()))?;
            let t_cut = t_cut.or(problem.mc.t_cut).unwrap_or(15.0 / lambda);
            let estimates = discounted_costs(
                &problem.spec,
                &starts,
                &ctrl,
                &scenarios,
                dt.unwrap_or(problem.mc.dt),
                t_cut,
                paths.unwrap_or(problem.mc.n_paths),
                seed,
            )?;
            let record: Vec<StartCost> = starts
                .into_iter()
                .zip(estimates)
                .map(|(x0, estimate)| StartCost { x0, estimate })
                .collect();
            out.write("cost.json", &to_record(&record)?)
        }
        Command::Verify {
            field,
            control,
            analytic,
            tol,
        } => verify(&problem, field.as_deref(), control.as_deref(), *analytic, *tol, &out),
        Command::Check { samples } => {
            let sample_box = SampleBox::new(problem.solver.bounds.clone(), problem.spec.d());
            let report = check_assumptions(&problem.spec, &sample_box, *samples, seed)?;
            out.write("check.json", &to_record(&report)?)
        }
        Command::Dpp { field, s } => {
            let field = match field {
                Some(p) => read_field(&problem, p)?,
                None => solve_field(&problem, None)?.0,
            };
            let scheme = Scheme::new(&problem.spec, field.grid())?;
            if !(*s > 0.0 && s.is_finite()) {
                return Err(CliError::Usage(format!("--s must be positive, got {s}")));
            }
            let steps = (s / scheme.dt_max()).ceil().max(1.0);
            let dt = s / steps;
            let residual = dpp_residual(&problem.spec, &field, *s, dt)?;
            let record = DppRecord {
                s: *s,
                dt,
                residual,
                tol: problem.solver.tol,
                ratio_to_tol: residual / problem.solver.tol,
            };
            out.write("dpp.json", &to_record(&record)?)
        }
    }
}

#[derive(Serialize)]
struct StartCost {
    x0: Vec<f64>,
    #[serde(flatten)]
    estimate: CostEstimate,
}

#[derive(Serialize)]
struct DppRecord {
    s: f64,
    dt: f64,
    residual: f64,
    tol: f64,
    ratio_to_tol: f64,
}

#[derive(Serialize)]
struct VerifyRecord<'a> {
    derivatives: &'static str,
    #[serde(flatten)]
    report: &'a hjbi_core::verification::VerificationReport,
    c_growth: f64,
    c_lip: f64,
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn new(dir: Option<PathBuf>) -> Self {
        let dir = dir
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        Self { dir }
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::create_dir_all(&self.dir)
            .and_then(|()| std::fs::write(&path, contents))
            .map_err(|source| CliError::Write {
                path: path.clone(),
                source,
            })?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

fn grid_of(problem: &ProblemFile) -> Result<Grid> {
    Ok(Grid::new(&problem.solver.bounds, &problem.solver.counts)?.with_margin(problem.solver.margin)?)
}

fn solve_field(problem: &ProblemFile, tol: Option<f64>) -> Result<(ValueField, hjbi_core::hjbi::SolveReport)> {
    let grid = grid_of(problem)?;
    let options = SolveOptions {
        max_horizon: problem.solver.max_horizon,
        window: problem.solver.window,
        ..SolveOptions::default()
    };
    Ok(solve_elliptic_with(
        &problem.spec,
        &grid,
        tol.unwrap_or(problem.solver.tol),
        None,
        &options,
    )?)
}

fn solve(problem: &ProblemFile, tol: Option<f64>, out: &Output) -> Result<()> {
    let (field, report) = solve_field(problem, tol)?;
    out.write("value.csv", &field.to_csv(problem.spec.controls()))?;
    out.write("solve_report.json", &to_record(&report)?)?;
    if !report.converged {
        return Err(CliError::NotConverged(format!(
            "no convergence by horizon {} (last change {:e})",
            report.horizon,
            report.history.last().copied().unwrap_or(f64::NAN)
        )));
    }
    if !report.growth_ok {
        return Err(CliError::NotConverged(format!(
            "growth constant {:e} exceeds the budget",
            report.growth_constant
        )));
    }
    Ok(())
}

fn verify(
    problem: &ProblemFile,
    field_path: Option<&Path>,
    control: Option<&str>,
    analytic: bool,
    tol: Option<f64>,
    out: &Output,
) -> Result<()> {
    let spec = &problem.spec;
    let tol = tol.unwrap_or(RESIDUAL_TOLERANCE_FACTOR * problem.solver.tol);
    let record = if analytic {
        let lambda = problem
            .builtin_lambda
            .ok_or_else(|| CliError::Usage("--analytic needs the built-in example".into()))?;
        if field_path.is_some() {
            return Err(CliError::Usage(
                "--analytic uses the closed-form value; omit --field".into(),
            ));
        }
        let field = ValueField::from_fn(grid_of(problem)?, |x| {
            example57_oracle(lambda, x[0]).map_or(f64::NAN, |(v, _)| v)
        })?;
        let u_star = example57_oracle(lambda, 0.0)?.1;
        let ctrl = match control {
            Some(t) => ControlPolicy::Constant(parse_list(t, spec.m(), "--control")?),
            None => ControlPolicy::Constant(vec![u_star]),
        };
        let slope = 1.0 / (lambda + 1.0);
        let gradient = move |_: &[f64]| vec![slope];
        let hessian = |_: &[f64]| DMatrix::zeros(1, 1);
        let report = verify_control_residual(
            spec,
            &field,
            &ctrl,
            DerivativeSource::Analytic {
                gradient: &gradient,
                hessian: &hessian,
            },
            tol,
        )?;
        let fit = fit_growth_lipschitz(&field)?;
        to_record(&VerifyRecord {
            derivatives: "analytic",
            report: &report,
            c_growth: fit.c_growth,
            c_lip: fit.c_lip,
        })?
    } else {
        let field = match field_path {
            Some(p) => read_field(problem, p)?,
            None => solve_field(problem, None)?.0,
        };
        let ctrl = control_policy(problem, control, Some(&field))?;
        let report = verify_control_residual(spec, &field, &ctrl, DerivativeSource::Stencil, tol)?;
        let fit = fit_growth_lipschitz(&field)?;
        to_record(&VerifyRecord {
            derivatives: "stencil",
            report: &report,
            c_growth: fit.c_growth,
            c_lip: fit.c_lip,
        })?
    };
    out.write("verify.json", &record)
}

fn read_field(problem: &ProblemFile, path: &Path) -> Result<ValueField> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let field = ValueField::from_csv(&text, problem.spec.controls())?;
    let grid = field.grid().clone().with_margin(problem.solver.margin)?;
    let rebuilt = ValueField::new(grid, field.values().to_vec())?;
    Ok(match field.policy() {
        Some(p) => rebuilt.with_policy(p.to_vec())?,
        None => rebuilt,
    })
}

/// `--control`, then the `[mc]` control, then the field's policy.
fn control_policy(problem: &ProblemFile, control: Option<&str>, field: Option<&ValueField>) -> Result<ControlPolicy> {
    if let Some(t) = control {
        return Ok(ControlPolicy::Constant(parse_list(t, problem.spec.m(), "--control")?));
    }
    if let Some(u) = &problem.mc.control {
        return Ok(ControlPolicy::Constant(u.clone()));
    }
    match field {
        Some(f) if f.policy().is_some() => Ok(ControlPolicy::Feedback(f.clone())),
        _ => Err(CliError::Usage(
            "no control: pass --control, set control in [mc], or give a field with a policy".into(),
        )),
    }
}

fn constant_scenarios(spec: &ProblemSpec) -> Vec<VolatilityPolicy> {
    let gamma = spec.gamma();
    let d = spec.d();
    let mut out = vec![
        VolatilityPolicy::Constant(DMatrix::identity(d, d) * gamma.sigma_lo2()),
        VolatilityPolicy::Constant(DMatrix::identity(d, d) * gamma.sigma_hi2()),
    ];
    out.extend(
        gamma
            .explicit_candidates()
            .iter()
            .map(|q| VolatilityPolicy::Constant(q.clone())),
    );
    out
}

fn scenario_policy(spec: &ProblemSpec, name: &str, field: Option<&ValueField>) -> Result<VolatilityPolicy> {
    let d = spec.d();
    let gamma = spec.gamma();
    Ok(match name {
        "lo" => VolatilityPolicy::Constant(DMatrix::identity(d, d) * gamma.sigma_lo2()),
        "hi" => VolatilityPolicy::Constant(DMatrix::identity(d, d) * gamma.sigma_hi2()),
        "feedback" => VolatilityPolicy::Feedback(
            field
                .cloned()
                .ok_or_else(|| CliError::Usage("the feedback scenario needs --field".into()))?,
        ),
        other => {
            let q: f64 = other
                .parse()
                .map_err(|_| CliError::Usage(format!("unknown scenario `{other}`")))?;
            if d != 1 {
                return Err(CliError::Usage("a numeric scenario needs d = 1".into()));
            }
            VolatilityPolicy::constant_scalar(q)
        }
    })
}

fn parse_list(text: &str, len: usize, flag: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("{flag}: cannot parse `{s}`")))
        })
        .collect::<Result<_>>()?;
    if v.len() != len {
        return Err(CliError::Usage(format!(
            "{flag}: expected {len} values, got {}",
            v.len()
        )));
    }
    Ok(v)
}
