use serde::Serialize;

use super::field::ValueField;
use super::grid::Grid;
use super::scheme::Scheme;
use crate::assumptions::{check_assumptions, SampleBox};
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;

/// Samples used to estimate μ when the problem does not supply it.
pub const MU_SAMPLES: usize = 2000;

/// Tuning knobs of [`solve_elliptic_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    /// Stop after this much parabolic time; defaults to `40/μ`.
    pub max_horizon: Option<f64>,
    /// Length of the time window over which the stopping change is measured.
    pub window: f64,
    /// Largest acceptable `max |V|/(1 + |x|²)` on the trusted subgrid.
    pub growth_budget: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_horizon: None,
            window: 1.0,
            growth_budget: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    /// Number of explicit steps taken.
    pub iterations: usize,
    pub dt: f64,
    pub dt_max: f64,
    /// Parabolic time reached.
    pub horizon: f64,
    pub max_horizon: f64,
    pub mu: f64,
    pub tol: f64,
    /// Sup-norm change on the trusted subgrid over each window.
    pub history: Vec<f64>,
    /// Exponential decay rate fitted to `history`.
    pub fitted_rate: Option<f64>,
    /// Sup of the discrete HJBI residual on the trusted subgrid.
    pub residual_norm: f64,
    pub growth_constant: f64,
    pub growth_ok: bool,
    pub converged: bool,
}

/// Number of steps per window and the step size `window / steps ≤ dt_max`.
pub fn window_steps(dt_max: f64, window: f64) -> (f64, usize) {
    let steps = if dt_max.is_finite() {
        (window / dt_max).ceil().max(1.0) as usize
    } else {
        1
    };
    (window / steps as f64, steps)
}

fn interior_sup(nodes: &[usize], a: &[f64], b: &[f64]) -> f64 {
    nodes.iter().map(|&k| (a[k] - b[k]).abs()).fold(0.0, f64::max)
}

/// μ from the problem, or the sampled `mu_hat` over the grid box.
pub fn resolve_mu(spec: &ProblemSpec, grid: &Grid) -> Result<f64> {
    if let Some(mu) = spec.mu() {
        return Ok(mu);
    }
    let report = check_assumptions(spec, &SampleBox::new(grid.bounds(), spec.d()), MU_SAMPLES, 0)?;
    if report.mu_hat > 0.0 && report.mu_hat.is_finite() {
        Ok(report.mu_hat)
    } else {
        Err(Error::InvalidInput(format!(
            "no mu supplied and the sampled mu_hat = {} is not positive",
            report.mu_hat
        )))
    }
}

/// Least-squares rate `r` in `values ≈ C·exp(−r·t)`, ignoring non-positive
/// entries. `None` with fewer than two usable points.
pub fn fit_exponential_rate(times: &[f64], values: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    (sxx > 0.0).then(|| -sxy / sxx)
}

pub fn solve_elliptic(
    spec: &ProblemSpec,
    grid: &Grid,
    tol: f64,
    initial: Option<&ValueField>,
) -> Result<(ValueField, SolveReport)> {
    solve_elliptic_with(spec, grid, tol, initial, &SolveOptions::default())
}

/// Runs the parabolic flow from `initial` (zero by default) until the change
/// over one window on the trusted subgrid drops below `tol`, or the maximum
/// horizon is reached. A run that does not converge still returns its field,
/// with `converged = false`.
pub fn solve_elliptic_with(
    spec: &ProblemSpec,
    grid: &Grid,
    tol: f64,
    initial: Option<&ValueField>,
    options: &SolveOptions,
) -> Result<(ValueField, SolveReport)> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidInput(format!("tol must be positive, got {tol}")));
    }
    if !(options.window > 0.0 && options.window.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "window must be positive, got {}",
            options.window
        )));
    }
    let scheme = Scheme::new(spec, grid)?;
    let mu = resolve_mu(spec, grid)?;
    let max_horizon = options.max_horizon.unwrap_or(40.0 / mu);
    if !(max_horizon > 0.0) {
        return Err(Error::InvalidInput(format!(
            "max horizon must be positive, got {max_horizon}"
        )));
    }
    let mut values = match initial {
        Some(f) => {
            scheme.check_grid(f)?;
            f.values().to_vec()
        }
        None => vec![0.0; grid.len()],
    };
    let (dt, steps) = window_steps(scheme.dt_max(), options.window);
    let interior = grid.interior_nodes();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut policy;
    loop {
        let (next, pol) = scheme.evolve(&values, dt, steps)?;
        iterations += steps;
        let change = interior_sup(&interior, &next, &values);
        history.push(change);
        values = next;
        policy = pol;
        if change < tol {
            converged = true;
            break;
        }
        if history.len() as f64 * options.window >= max_horizon - 1e-12 {
            break;
        }
    }
    let horizon = history.len() as f64 * options.window;

    let (integrand, _) = scheme.integrand(&values)?;
    let residual_norm = interior.iter().map(|&k| integrand[k].abs()).fold(0.0, f64::max);
    let times: Vec<f64> = (1..=history.len()).map(|k| k as f64 * options.window).collect();
    let burn_in = usize::from(history.len() > 2);
    let fitted_rate = fit_exponential_rate(&times[burn_in..], &history[burn_in..]);
    let field = ValueField::new(grid.clone(), values)?.with_policy(policy)?;
    let growth_constant = field.growth_constant();
    Ok((
        field,
        SolveReport {
            iterations,
            dt,
            dt_max: scheme.dt_max(),
            horizon,
            max_horizon,
            mu,
            tol,
            history,
            fitted_rate,
            residual_norm,
            growth_constant,
            growth_ok: growth_constant <= options.growth_budget,
            converged,
        },
    ))
}

/// Value fields at the given horizons (ascending) of the parabolic flow
/// started from `initial` (zero by default), with unit windows. Every horizon
/// must be a whole number of steps.
pub fn horizon_fields(
    spec: &ProblemSpec,
    grid: &Grid,
    horizons: &[f64],
    initial: Option<&ValueField>,
) -> Result<Vec<ValueField>> {
    let scheme = Scheme::new(spec, grid)?;
    let (dt, _) = window_steps(scheme.dt_max(), 1.0);
    let mut values = match initial {
        Some(f) => {
            scheme.check_grid(f)?;
            f.values().to_vec()
        }
        None => vec![0.0; grid.len()],
    };
    let mut done = 0usize;
    let mut out = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let steps = whole_steps(t, dt)?;
        if steps < done {
            return Err(Error::InvalidInput("horizons must be ascending".into()));
        }
        let (next, policy) = scheme.evolve(&values, dt, steps - done)?;
        values = next;
        done = steps;
        out.push(ValueField::new(grid.clone(), values.clone())?.with_policy(policy)?);
    }
    Ok(out)
}

fn whole_steps(s: f64, dt: f64) -> Result<usize> {
    if !(s >= 0.0 && dt > 0.0) {
        return Err(Error::InvalidInput(format!(
            "need s >= 0 and dt > 0, got s = {s}, dt = {dt}"
        )));
    }
    let k = (s / dt).round();
    if (k * dt - s).abs() > 1e-9 * s.max(dt) {
        return Err(Error::InvalidInput(format!("dt = {dt} does not divide s = {s}")));
    }
    Ok(k as usize)
}

impl Scheme {
    /// Flow of the inf-over-controls parabolic equation over a window `s`.
    pub fn semigroup(&self, terminal: &ValueField, s: f64, dt: f64) -> Result<ValueField> {
        self.check_grid(terminal)?;
        if !(s > 0.0) {
            return Err(Error::InvalidInput(format!("window s must be positive, got {s}")));
        }
        let steps = whole_steps(s, dt)?;
        let (values, policy) = self.evolve(terminal.values(), dt, steps)?;
        ValueField::new(self.grid().clone(), values)?.with_policy(policy)
    }

    /// `sup |V − S_s V|` over the trusted subgrid.
    pub fn dpp_residual(&self, field: &ValueField, s: f64, dt: f64) -> Result<f64> {
        let out = self.semigroup(field, s, dt)?;
        Ok(interior_sup(
            &self.grid().interior_nodes(),
            field.values(),
            out.values(),
        ))
    }
}

/// The backward semigroup over `[0, s]` applied to `terminal`.
pub fn backward_semigroup(spec: &ProblemSpec, s: f64, terminal: &ValueField, dt: f64) -> Result<ValueField> {
    Scheme::new(spec, terminal.grid())?.semigroup(terminal, s, dt)
}

/// Per-node minimising lattice index of the discrete HJBI integrand.
pub fn extract_policy(spec: &ProblemSpec, field: &ValueField) -> Result<Vec<usize>> {
    Ok(Scheme::new(spec, field.grid())?.integrand(field.values())?.1)
}

/// Dynamic programming residual `sup |V − S_s V|` on the trusted subgrid.
pub fn dpp_residual(spec: &ProblemSpec, field: &ValueField, s: f64, dt: f64) -> Result<f64> {
    Scheme::new(spec, field.grid())?.dpp_residual(field, s, dt)
}
