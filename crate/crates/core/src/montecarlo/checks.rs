use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::engine::{path_rng, Engine, PathVisitor};
use super::policy::{ControlPolicy, VolatilityPolicy};
use super::stats::mean_and_error;
use crate::assumptions::{check_assumptions, SampleBox};
use crate::error::{Error, Result};
use crate::gfunc::UncertaintySet;
use crate::problem::ProblemSpec;

/// Sample size of the dissipativity estimate used by
/// [`flow_contraction_estimate`].
pub const CONTRACTION_SAMPLES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentEstimate {
    /// Monte Carlo mean of `Γ_t^p`.
    pub estimate: f64,
    pub std_error: f64,
    /// `exp(C_G (p² − p) α₂² t)`.
    pub bound: f64,
    /// `exp(½ p (p − 1) β² q t)` under the simulated scenario.
    pub exact: f64,
    pub n_paths: usize,
}

/// p-th moment of `Γ_t = exp(β B_t − ½ β² q t)` with `β = alpha2` under the
/// constant scalar scenario `q`, where `B_t ~ N(0, q t)`.
///
/// `B_t` is sampled exactly, one normal per path.
pub fn exp_martingale_moment(
    gamma: &UncertaintySet,
    alpha2: f64,
    q: f64,
    p: f64,
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidInput(format!("moment order must be at least 1, got {p}")));
    }
    if !(alpha2 >= 0.0 && alpha2.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "alpha2 must be non-negative, got {alpha2}"
        )));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("time must be non-negative, got {t}")));
    }
    if gamma.dim() != 1 {
        return Err(Error::DimensionMismatch(
            "moment check uses a one-dimensional scenario".into(),
        ));
    }
    gamma.check_member(&nalgebra::DMatrix::from_element(1, 1, q))?;
    if n_paths == 0 {
        return Err(Error::InvalidInput("path count must be at least 1".into()));
    }
    let beta = alpha2;
    let scale = (q * t).sqrt();
    let values: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let z: f64 = path_rng(seed, path).sample(StandardNormal);
            let gamma_t = (beta * scale * z - 0.5 * beta * beta * q * t).exp();
            gamma_t.powf(p)
        })
        .collect();
    let (estimate, std_error) = mean_and_error(&values);
    Ok(MomentEstimate {
        estimate,
        std_error,
        bound: (gamma.moment_constant() * (p * p - p) * alpha2 * alpha2 * t).exp(),
        exact: (0.5 * p * (p - 1.0) * beta * beta * q * t).exp(),
        n_paths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionEstimate {
    /// Monte Carlo mean of `|X_t^x − X_t^y|²`.
    pub estimate: f64,
    pub std_error: f64,
    /// `e^{−2η̂t}|x − y|²`.
    pub bound: f64,
    pub eta_hat: f64,
    /// Smallest and largest per-path value of `|X_t^x − X_t^y|²`.
    pub min_sample: f64,
    pub max_sample: f64,
    /// `estimate ≤ bound + 3·std_error`.
    pub pass: bool,
    pub flagged: usize,
    pub n_paths: usize,
}

struct Terminal {
    steps: usize,
    n: usize,
    x: Vec<f64>,
    flagged: bool,
}

impl PathVisitor for Terminal {
    fn state(&mut self, lane: usize, k: usize, x: &[f64], _u: &[f64]) {
        if k == self.steps {
            self.x[lane * self.n..(lane + 1) * self.n].copy_from_slice(x);
        }
    }

    fn overflow(&mut self, _lane: usize, _k: usize) {
        self.flagged = true;
    }
}

/// Synchronously coupled flows from `x` and `y` under one volatility
/// scenario: the mean squared distance at `t` against `e^{−2η̂t}|x − y|²`.
///
/// `η̂` is the sampled dissipativity constant of [`check_assumptions`] over
/// the box `[−R, R]^n`, `R = 1 + 2·max(|x|∞, |y|∞)`, with
/// [`CONTRACTION_SAMPLES`] pairs drawn from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn flow_contraction_estimate(
    spec: &ProblemSpec,
    x: &[f64],
    y: &[f64],
    vol: &VolatilityPolicy,
    ctrl: &ControlPolicy,
    dt: f64,
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ContractionEstimate> {
    let n = spec.n();
    let engine = Engine::new(spec, ctrl, &[(x.to_vec(), vol), (y.to_vec(), vol)], dt, t)?;
    let steps = engine.steps();
    let r = 1.0 + 2.0 * x.iter().chain(y).fold(0.0_f64, |m, v| m.max(v.abs()));
    let report = check_assumptions(
        spec,
        &SampleBox::new(vec![(-r, r); n], spec.d()),
        CONTRACTION_SAMPLES,
        seed,
    )?;
    let eta_hat = report.eta_hat;

    let paths = engine.run(n_paths, seed, || Terminal {
        steps,
        n,
        x: vec![0.0; 2 * n],
        flagged: false,
    })?;
    let samples: Vec<f64> = paths
        .iter()
        .filter(|p| !p.flagged)
        .map(|p| (0..n).map(|i| (p.x[i] - p.x[n + i]).powi(2)).sum())
        .collect();
    if samples.is_empty() {
        return Err(Error::Numerical("every coupled path overflowed".into()));
    }
    let (estimate, std_error) = mean_and_error(&samples);
    let dist2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let bound = (-2.0 * eta_hat * steps as f64 * dt).exp() * dist2;
    Ok(ContractionEstimate {
        estimate,
        std_error,
        bound,
        eta_hat,
        min_sample: samples.iter().copied().fold(f64::INFINITY, f64::min),
        max_sample: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        pass: estimate <= bound + 3.0 * std_error,
        flagged: n_paths - samples.len(),
        n_paths,
    })
}
