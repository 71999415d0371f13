//! Cross-checks of computed value fields: optimality residuals of a given
//! feedback control, the closed-form solution of a one-dimensional example
//! with `b = −x + u`, `σ = x + u` and `ψ = x − u`, and growth and Lipschitz
//! constants of a field.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hjbi::{hjbi_integrand, EvaluationPoint, Scheme, ValueField};
use crate::montecarlo::ControlPolicy;
use crate::problem::ProblemSpec;

/// Multiple of the solver's stopping tolerance that the stencil residual of
/// a solved field and its extracted policy is expected to stay below.
pub const RESIDUAL_TOLERANCE_FACTOR: f64 = 5.0;

/// Largest number of node pairs examined by [`fit_growth_lipschitz`].
pub const MAX_LIPSCHITZ_PAIRS: usize = 100_000;

/// Where the derivatives entering the residual come from.
pub enum DerivativeSource<'a> {
    /// The finite differences and upwinding of the grid solver.
    Stencil,
    /// Exact gradient and Hessian supplied by the caller; the value is taken
    /// from the field.
    Analytic {
        gradient: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
        hessian: &'a (dyn Fn(&[f64]) -> DMatrix<f64> + Sync),
    },
}

/// Pointwise `G(H) + ⟨∂V, b⟩ + f` at `u = ctrl(x)` over the trusted subgrid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    /// Largest absolute residual.
    pub sup: f64,
    /// Mean absolute residual.
    pub mean: f64,
    pub worst_node: usize,
    pub worst_x: Vec<f64>,
    pub tolerance: f64,
    /// `sup ≤ tolerance`.
    pub pass: bool,
    /// Interior node indices, in grid order.
    pub nodes: Vec<usize>,
    /// Signed residual at each entry of `nodes`.
    pub pointwise: Vec<f64>,
}

/// Evaluates the optimality condition of `ctrl` at every interior node of
/// `field`.
pub fn verify_control_residual(
    spec: &ProblemSpec,
    field: &ValueField,
    ctrl: &ControlPolicy,
    source: DerivativeSource<'_>,
    tol: f64,
) -> Result<VerificationReport> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "tolerance must be non-negative, got {tol}"
        )));
    }
    ctrl.validate(spec)?;
    let grid = field.grid();
    if grid.dim() != spec.n() {
        return Err(Error::DimensionMismatch(format!(
            "field has {} axes, problem has {} states",
            grid.dim(),
            spec.n()
        )));
    }
    let nodes = grid.interior_nodes();
    if nodes.is_empty() {
        return Err(Error::InvalidInput("field has no interior nodes".into()));
    }
    let scheme = match source {
        DerivativeSource::Stencil => Some(Scheme::new(spec, grid)?),
        DerivativeSource::Analytic { .. } => None,
    };
    let mut pointwise = Vec::with_capacity(nodes.len());
    for &node in &nodes {
        let x = grid.coords(node);
        let u = ctrl.at(spec, &x);
        let r = match (&source, &scheme) {
            (DerivativeSource::Analytic { gradient, hessian }, _) => {
                let pt = EvaluationPoint::new(x.clone(), field.value(node), gradient(&x), hessian(&x), u.to_vec());
                hjbi_integrand(spec, &pt)?
            }
            (DerivativeSource::Stencil, Some(s)) => s.integrand_at_control(node, field.values(), u)?,
            (DerivativeSource::Stencil, None) => unreachable!("scheme is built for stencil derivatives"),
        };
        if !r.is_finite() {
            return Err(Error::NonFinite);
        }
        pointwise.push(r);
    }
    let mut worst = 0;
    for (i, r) in pointwise.iter().enumerate() {
        if r.abs() > pointwise[worst].abs() {
            worst = i;
        }
    }
    let sup = pointwise[worst].abs();
    let mean = pointwise.iter().map(|r| r.abs()).sum::<f64>() / pointwise.len() as f64;
    Ok(VerificationReport {
        sup,
        mean,
        worst_node: nodes[worst],
        worst_x: grid.coords(nodes[worst]),
        tolerance: tol,
        pass: sup <= tol,
        nodes,
        pointwise,
    })
}

/// Value and optimal control of the example problem with `b = −x + u`,
/// `σ = x + u`, `f = −λy + x − u` and `U = [0, 1]`:
/// `V(x) = (x − 1)/(λ + 1)`, `u* = 1`.
pub fn example57_oracle(lambda: f64, x: f64) -> Result<(f64, f64)> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    Ok(((x - 1.0) / (lambda + 1.0), 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthLipschitz {
    /// `max |V(x)| / (1 + |x|²)`.
    pub c_growth: f64,
    /// `max |V(x) − V(y)| / ((1 + |x| + |y|)|x − y|)` over node pairs.
    pub c_lip: f64,
    pub pairs: usize,
}

/// Growth and local Lipschitz constants of `field` over its trusted
/// subgrid.
///
/// Every pair of interior nodes is used when there are at most
/// [`MAX_LIPSCHITZ_PAIRS`]; otherwise that many pairs are drawn without
/// replacement from ChaCha8 seed 0.
pub fn fit_growth_lipschitz(field: &ValueField) -> Result<GrowthLipschitz> {
    let grid = field.grid();
    let nodes = grid.interior_nodes();
    let k = nodes.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 interior nodes, found {k}"
        )));
    }
    let coords: Vec<Vec<f64>> = nodes.iter().map(|&n| grid.coords(n)).collect();
    let norms: Vec<f64> = coords
        .iter()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let values: Vec<f64> = nodes.iter().map(|&n| field.value(n)).collect();

    let c_growth = values
        .iter()
        .zip(&norms)
        .map(|(v, r)| v.abs() / (1.0 + r * r))
        .fold(0.0, f64::max);

    let ratio = |i: usize, j: usize| -> f64 {
        let dist: f64 = coords[i]
            .iter()
            .zip(&coords[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        (values[i] - values[j]).abs() / ((1.0 + norms[i] + norms[j]) * dist)
    };
    let total = k * (k - 1) / 2;
    let mut c_lip = 0.0_f64;
    let pairs = if total <= MAX_LIPSCHITZ_PAIRS {
        for i in 0..k {
            for j in i + 1..k {
                c_lip = c_lip.max(ratio(i, j));
            }
        }
        total
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for flat in sample(&mut rng, total, MAX_LIPSCHITZ_PAIRS) {
            let (i, j) = unrank_pair(flat, k);
            c_lip = c_lip.max(ratio(i, j));
        }
        MAX_LIPSCHITZ_PAIRS
    };
    Ok(GrowthLipschitz { c_growth, c_lip, pairs })
}

/// The `flat`-th pair `(i, j)`, `i < j`, in row order of the strict upper
/// triangle of a `k × k` matrix.
fn unrank_pair(mut flat: usize, k: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = k - 1 - i;
        if flat < row {
            return (i, i + 1 + flat);
        }
        flat -= row;
        i += 1;
    }
}
