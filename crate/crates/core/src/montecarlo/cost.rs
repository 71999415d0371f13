use serde::Serialize;

use super::engine::{Engine, PathVisitor};
use super::policy::{ControlPolicy, VolatilityPolicy};
use super::stats::mean_and_error;
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;

/// Largest scenario mean. This is a lower bound on the robust expectation,
/// which takes the supremum over all admissible volatility measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RobustEstimate {
    pub value: f64,
    /// Index of the attaining scenario (the first on ties).
    pub index: usize,
    /// Standard error of the attaining scenario.
    pub std_error: f64,
}

/// Maximum of `(mean, std_error)` pairs over a finite scenario family.
pub fn robust_expectation(estimates: &[(f64, f64)]) -> Result<RobustEstimate> {
    if estimates.is_empty() {
        return Err(Error::InvalidInput(
            "robust expectation needs at least one scenario".into(),
        ));
    }
    if let Some(k) = estimates.iter().position(|(m, s)| !m.is_finite() || !(*s >= 0.0)) {
        return Err(Error::InvalidInput(format!("scenario {k} has an invalid estimate")));
    }
    let mut best = 0;
    for (k, e) in estimates.iter().enumerate().skip(1) {
        if e.0 > estimates[best].0 {
            best = k;
        }
    }
    Ok(RobustEstimate {
        value: estimates[best].0,
        index: best,
        std_error: estimates[best].1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioEstimate {
    pub scenario: String,
    pub mean: f64,
    pub std_error: f64,
    /// Paths excluded after leaving the floating-point range.
    pub flagged: usize,
}

/// Monte Carlo estimate of `J(x0, u) = Ê[∫₀^∞ e^{−λs} ψ(X_s, u_s) ds]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    /// Largest scenario estimate, a lower bound on the robust cost.
    pub value: f64,
    pub std_error: f64,
    pub attaining: usize,
    pub scenarios: Vec<ScenarioEstimate>,
    /// `e^{−λT}/λ` times the largest `|ψ|` over the box spanned by the
    /// simulated states; bounds the truncated tail when `|ψ|` stays within
    /// that range after `T` (exact for ψ affine in x).
    pub tail_bound: f64,
    pub max_abs_state: f64,
    pub lambda: f64,
    pub t_cut: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// `ψ` evaluator: affine coefficients when available, the compiled
/// expression otherwise.
enum Psi {
    Affine { c0: f64, c: Vec<f64> },
    Program,
}

struct CostVisitor<'a> {
    spec: &'a ProblemSpec,
    psi: &'a Psi,
    weights: &'a [f64],
    integral: Vec<f64>,
    flagged: Vec<bool>,
    max_abs: Vec<f64>,
    slots: Vec<f64>,
    error: Option<Error>,
}

impl PathVisitor for CostVisitor<'_> {
    #[inline]
    fn state(&mut self, lane: usize, k: usize, x: &[f64], u: &[f64]) {
        let value = match self.psi {
            Psi::Affine { c0, c } => {
                let mut s = *c0;
                for (ci, xi) in c.iter().zip(x) {
                    s += ci * xi;
                }
                s
            }
            Psi::Program => {
                let d = self.spec.d();
                self.spec.fill_slots(&mut self.slots, x, u, 0.0, &vec![0.0; d]);
                match self.spec.eval_psi(&self.slots).expect("discounted form") {
                    Ok(v) => v,
                    Err(Error::NonFinite) => {
                        self.overflow(lane, k);
                        return;
                    }
                    Err(e) => {
                        self.error.get_or_insert(e);
                        return;
                    }
                }
            }
        };
        if self.flagged[lane] {
            return;
        }
        self.integral[lane] += self.weights[k] * value;
        for xi in x {
            self.max_abs[lane] = self.max_abs[lane].max(xi.abs());
        }
    }

    #[inline]
    fn scalar_states(&mut self, k: usize, xs: &[f64], u: &[f64]) {
        let Psi::Affine { c0, c } = self.psi else {
            for (l, x) in xs.iter().enumerate() {
                self.state(l, k, std::slice::from_ref(x), u);
            }
            return;
        };
        let (c0, c1, w) = (*c0, c[0], self.weights[k]);
        for ((acc, m), x) in self.integral.iter_mut().zip(self.max_abs.iter_mut()).zip(xs) {
            *acc += w * (c0 + c1 * x);
            *m = m.max(x.abs());
        }
    }

    fn overflow(&mut self, lane: usize, _k: usize) {
        self.flagged[lane] = true;
    }
}

/// Per-scenario trapezoidal estimate of `∫₀^{T_cut} e^{−λs} ψ(X_s, u_s) ds`
/// averaged over paths, combined by [`robust_expectation`].
///
/// All scenarios are driven by the same Brownian increments, path by path.
/// Requires the discounted form `f = −λy + ψ` and `T_cut ≥ 5/λ`.
#[allow(clippy::too_many_arguments)]
pub fn discounted_cost(
    spec: &ProblemSpec,
    x0: &[f64],
    ctrl: &ControlPolicy,
    scenarios: &[VolatilityPolicy],
    dt: f64,
    t_cut: f64,
    n_paths: usize,
    seed: u64,
) -> Result<CostEstimate> {
    let mut all = discounted_costs(spec, &[x0.to_vec()], ctrl, scenarios, dt, t_cut, n_paths, seed)?;
    Ok(all.remove(0))
}

/// [`discounted_cost`] for several starting points at once.
///
/// Path `p` uses the same Brownian increments for every start, so each
/// entry equals the corresponding single-start call.
#[allow(clippy::too_many_arguments)]
pub fn discounted_costs(
    spec: &ProblemSpec,
    starts: &[Vec<f64>],
    ctrl: &ControlPolicy,
    scenarios: &[VolatilityPolicy],
    dt: f64,
    t_cut: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<CostEstimate>> {
    let discount = spec
        .discount()
        .ok_or_else(|| Error::InvalidInput("discounted cost needs a problem given by psi and lambda".into()))?;
    let lambda = discount.lambda;
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    if !(t_cut >= 5.0 / lambda) {
        return Err(Error::InvalidInput(format!(
            "T_cut = {t_cut} is below 5/lambda = {}",
            5.0 / lambda
        )));
    }
    if scenarios.is_empty() {
        return Err(Error::InvalidInput("scenario family is empty".into()));
    }
    if starts.is_empty() {
        return Err(Error::InvalidInput("no starting point given".into()));
    }
    let lanes: Vec<(Vec<f64>, &VolatilityPolicy)> = starts
        .iter()
        .flat_map(|x0| scenarios.iter().map(move |v| (x0.clone(), v)))
        .collect();
    let engine = Engine::new(spec, ctrl, &lanes, dt, t_cut)?;
    let steps = engine.steps();
    let weights: Vec<f64> = (0..=steps)
        .map(|k| {
            let end = if k == 0 || k == steps { 0.5 } else { 1.0 };
            end * dt * (-lambda * k as f64 * dt).exp()
        })
        .collect();
    let psi = psi_evaluator(spec, ctrl)?;
    let n_lanes = lanes.len();
    let paths = engine.run(n_paths, seed, || CostVisitor {
        spec,
        psi: &psi,
        weights: &weights,
        integral: vec![0.0; n_lanes],
        flagged: vec![false; n_lanes],
        max_abs: vec![0.0; n_lanes],
        slots: vec![0.0; spec.slot_count()],
        error: None,
    })?;
    if let Some(e) = paths.iter().find_map(|p| p.error.clone()) {
        return Err(e);
    }

    let mut out = Vec::with_capacity(starts.len());
    for s in 0..starts.len() {
        let lane_range = s * scenarios.len()..(s + 1) * scenarios.len();
        let mut estimates = Vec::with_capacity(scenarios.len());
        for (l, vol) in lane_range.clone().zip(scenarios) {
            let values: Vec<f64> = paths.iter().filter(|p| !p.flagged[l]).map(|p| p.integral[l]).collect();
            let flagged = n_paths - values.len();
            if values.is_empty() {
                return Err(Error::Numerical(format!(
                    "every path overflowed under scenario {}",
                    l - lane_range.start
                )));
            }
            let (mean, std_error) = mean_and_error(&values);
            estimates.push(ScenarioEstimate {
                scenario: vol.label(),
                mean,
                std_error,
                flagged,
            });
        }
        let robust = robust_expectation(&estimates.iter().map(|e| (e.mean, e.std_error)).collect::<Vec<_>>())?;
        let max_abs_state = paths
            .iter()
            .flat_map(|p| p.max_abs[lane_range.clone()].iter().copied())
            .fold(0.0, f64::max);
        let tail_bound = (-lambda * steps as f64 * dt).exp() / lambda * psi_bound(spec, ctrl, max_abs_state)?;
        out.push(CostEstimate {
            value: robust.value,
            std_error: robust.std_error,
            attaining: robust.index,
            scenarios: estimates,
            tail_bound,
            max_abs_state,
            lambda,
            t_cut: steps as f64 * dt,
            dt,
            n_paths,
            seed,
        });
    }
    Ok(out)
}

fn psi_evaluator(spec: &ProblemSpec, ctrl: &ControlPolicy) -> Result<Psi> {
    let discount = spec.discount().expect("checked by caller");
    let ControlPolicy::Constant(u) = ctrl else {
        return Ok(Psi::Program);
    };
    let affine = discount
        .psi
        .degree_in(&|name: &str| name.starts_with('x'))
        .is_some_and(|k| k <= 1);
    if !affine {
        return Ok(Psi::Program);
    }
    let n = spec.n();
    let d = spec.d();
    let at = |x: &[f64]| -> Result<f64> {
        spec.eval_psi(&spec.slots(x, u, 0.0, &vec![0.0; d]))
            .expect("discounted form")
    };
    let c0 = at(&vec![0.0; n])?;
    let c = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            Ok(at(&e)? - c0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Psi::Affine { c0, c })
}

/// Largest `|ψ|` over the corners and centre of `[−r, r]^n` and the
/// controls the policy can apply.
fn psi_bound(spec: &ProblemSpec, ctrl: &ControlPolicy, r: f64) -> Result<f64> {
    let n = spec.n();
    let d = spec.d();
    let controls: Vec<Vec<f64>> = match ctrl {
        ControlPolicy::Constant(u) => vec![u.clone()],
        ControlPolicy::Feedback(_) => (0..spec.controls().len())
            .map(|k| spec.controls().point(k).to_vec())
            .collect(),
    };
    let mut points = vec![vec![0.0; n]];
    for mask in 0..(1usize << n.min(16)) {
        points.push((0..n).map(|i| if mask >> i & 1 == 1 { r } else { -r }).collect());
    }
    let mut sup = 0.0_f64;
    for u in &controls {
        for x in &points {
            match spec
                .eval_psi(&spec.slots(x, u, 0.0, &vec![0.0; d]))
                .expect("discounted form")
            {
                Ok(v) => sup = sup.max(v.abs()),
                Err(Error::NonFinite) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(sup)
}
