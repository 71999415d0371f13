use std::fmt::Write as _;

use serde::Serialize;

use super::engine::{Engine, PathVisitor};
use super::policy::{ControlPolicy, VolatilityPolicy};
use super::stats::mean_and_error;
use crate::error::Result;
use crate::hjbi::fmt17;
use crate::problem::ProblemSpec;

/// Simulated paths of the controlled G-SDE under one volatility policy.
///
/// States are stored for steps `0..=steps`; Brownian increments and
/// quadratic-variation increments `Q_k·dt` for steps `0..steps`. After an
/// overflow the remaining states of that path are NaN and the path is
/// flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub dt: f64,
    pub horizon: f64,
    pub steps: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub scenario: String,
    states: Vec<f64>,
    increments: Vec<f64>,
    qv: Vec<f64>,
    flagged: Vec<bool>,
}

/// Mean and standard error of the terminal state over unflagged paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub scenario: String,
    pub flagged: usize,
}

struct Recorder {
    n: usize,
    d: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
    qv: Vec<f64>,
    flagged: bool,
}

impl PathVisitor for Recorder {
    fn state(&mut self, _lane: usize, k: usize, x: &[f64], _u: &[f64]) {
        self.states[k * self.n..(k + 1) * self.n].copy_from_slice(x);
    }

    fn increment(&mut self, _lane: usize, k: usize, dw: &[f64], qdt: &[f64]) {
        let (d, dd) = (self.d, self.d * self.d);
        self.increments[k * d..(k + 1) * d].copy_from_slice(dw);
        self.qv[k * dd..(k + 1) * dd].copy_from_slice(qdt);
    }

    fn overflow(&mut self, _lane: usize, k: usize) {
        self.flagged = true;
        self.states[k * self.n..].fill(f64::NAN);
    }
}

/// Euler–Maruyama paths `X_{k+1} = X_k + b·dt + Σ h_ij·Q_ij·dt + σ·Q^{1/2}·ΔW`
/// with `ΔW ~ N(0, dt·I)` and `Q` from `vol` at `(t_k, X_k)`.
///
/// Path `p` draws from ChaCha8 stream `p` of `seed`, so the bundle does not
/// depend on the number of worker threads. The horizon is rounded to a whole
/// number of steps.
#[allow(clippy::too_many_arguments)]
pub fn simulate_gsde(
    spec: &ProblemSpec,
    x0: &[f64],
    ctrl: &ControlPolicy,
    vol: &VolatilityPolicy,
    dt: f64,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    let engine = Engine::new(spec, ctrl, &[(x0.to_vec(), vol)], dt, horizon)?;
    let (n, d, steps) = (spec.n(), spec.d(), engine.steps());
    let paths = engine.run(n_paths, seed, || Recorder {
        n,
        d,
        states: vec![0.0; (steps + 1) * n],
        increments: vec![0.0; steps * d],
        qv: vec![0.0; steps * d * d],
        flagged: false,
    })?;
    let mut bundle = PathBundle {
        dt,
        horizon: steps as f64 * dt,
        steps,
        n,
        d,
        seed,
        scenario: vol.label(),
        states: Vec::with_capacity(n_paths * (steps + 1) * n),
        increments: Vec::with_capacity(n_paths * steps * d),
        qv: Vec::with_capacity(n_paths * steps * d * d),
        flagged: Vec::with_capacity(n_paths),
    };
    for p in paths {
        bundle.states.extend(p.states);
        bundle.increments.extend(p.increments);
        bundle.qv.extend(p.qv);
        bundle.flagged.push(p.flagged);
    }
    Ok(bundle)
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.flagged.len()
    }

    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let at = (path * (self.steps + 1) + k) * self.n;
        &self.states[at..at + self.n]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.steps)
    }

    /// `ΔW` between steps `k` and `k + 1`.
    pub fn increment(&self, path: usize, k: usize) -> &[f64] {
        let at = (path * self.steps + k) * self.d;
        &self.increments[at..at + self.d]
    }

    /// `Q_k·dt` (row-major) between steps `k` and `k + 1`.
    pub fn qv_increment(&self, path: usize, k: usize) -> &[f64] {
        let dd = self.d * self.d;
        let at = (path * self.steps + k) * dd;
        &self.qv[at..at + dd]
    }

    pub fn is_flagged(&self, path: usize) -> bool {
        self.flagged[path]
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }

    pub fn summary(&self) -> SimulationSummary {
        let live: Vec<usize> = (0..self.n_paths()).filter(|&p| !self.flagged[p]).collect();
        let mut mean = Vec::with_capacity(self.n);
        let mut std_error = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let xs: Vec<f64> = live.iter().map(|&p| self.terminal(p)[i]).collect();
            let (m, se) = mean_and_error(&xs);
            mean.push(m);
            std_error.push(se);
        }
        SimulationSummary {
            mean,
            std_error,
            n_paths: self.n_paths(),
            dt: self.dt,
            scenario: self.scenario.clone(),
            flagged: self.flagged_count(),
        }
    }

    /// CSV `path,step,t,x1..xn,q11..qdd`; the `q` cells hold `Q_k·dt` for the
    /// step that starts at the row and are empty on the final row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,step,t");
        for i in 1..=self.n {
            let _ = write!(out, ",x{i}");
        }
        for i in 1..=self.d {
            for j in 1..=self.d {
                let _ = write!(out, ",q{i}{j}");
            }
        }
        out.push('\n');
        for p in 0..self.n_paths() {
            for k in 0..=self.steps {
                let _ = write!(out, "{p},{k},{}", fmt17(k as f64 * self.dt));
                for x in self.state(p, k) {
                    let _ = write!(out, ",{}", fmt17(*x));
                }
                if k < self.steps {
                    for q in self.qv_increment(p, k) {
                        let _ = write!(out, ",{}", fmt17(*q));
                    }
                } else {
                    out.push_str(&",".repeat(self.d * self.d));
                }
                out.push('\n');
            }
        }
        out
    }
}
