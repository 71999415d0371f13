use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::gfunc::trace_product;
use crate::hjbi::{Grid, ValueField};
use crate::problem::ProblemSpec;

/// How the quadratic-variation density `Q` of the canonical process is
/// chosen along a path. Each variant realises one probability measure of the
/// volatility-uncertainty family.
#[derive(Debug, Clone, PartialEq)]
pub enum VolatilityPolicy {
    /// The same `Q` at all times.
    Constant(DMatrix<f64>),
    /// `(start time, Q)` pairs with strictly increasing times, the first at
    /// or before zero; `Q` at time `t` is the last entry starting at or before `t`.
    Schedule(Vec<(f64, DMatrix<f64>)>),
    /// At state `x`, the candidate of the uncertainty set maximising
    /// `tr[Q·σᵀ D²V σ]`, with `D²V` from central second differences of the
    /// field at the nearest grid node. Ties go to the first candidate.
    Feedback(ValueField),
}

impl VolatilityPolicy {
    /// Constant scalar scenario for `d = 1`.
    pub fn constant_scalar(q: f64) -> Self {
        VolatilityPolicy::Constant(DMatrix::from_element(1, 1, q))
    }

    /// Short human-readable description used in summaries.
    pub fn label(&self) -> String {
        let mat = |q: &DMatrix<f64>| {
            let rows: Vec<String> = (0..q.nrows())
                .map(|i| {
                    (0..q.ncols())
                        .map(|j| format!("{}", q[(i, j)]))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            format!("[{}]", rows.join("; "))
        };
        match self {
            VolatilityPolicy::Constant(q) => format!("constant {}", mat(q)),
            VolatilityPolicy::Schedule(s) => {
                let parts: Vec<String> = s.iter().map(|(t, q)| format!("{t}:{}", mat(q))).collect();
                format!("schedule {}", parts.join(", "))
            }
            VolatilityPolicy::Feedback(_) => "feedback".to_string(),
        }
    }

    pub(crate) fn resolve(&self, spec: &ProblemSpec, dt: f64, steps: usize) -> Result<ResolvedVolatility> {
        let gamma = spec.gamma();
        let d = spec.d();
        let check = |q: &DMatrix<f64>| -> Result<()> {
            if q.nrows() != d || q.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "volatility scenario is {}x{}, noise dimension is {d}",
                    q.nrows(),
                    q.ncols()
                )));
            }
            gamma.check_member(q)
        };
        let (mats, rule) = match self {
            VolatilityPolicy::Constant(q) => {
                check(q)?;
                (vec![q.clone()], Rule::Fixed)
            }
            VolatilityPolicy::Schedule(entries) => {
                if entries.is_empty() {
                    return Err(Error::InvalidInput("volatility schedule is empty".into()));
                }
                if entries[0].0 > 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "volatility schedule starts at t = {}, after time zero",
                        entries[0].0
                    )));
                }
                for w in entries.windows(2) {
                    if !(w[1].0 > w[0].0) {
                        return Err(Error::InvalidInput(
                            "volatility schedule times must increase strictly".into(),
                        ));
                    }
                }
                for (_, q) in entries {
                    check(q)?;
                }
                let index = (0..steps)
                    .map(|k| {
                        let t = k as f64 * dt;
                        entries.iter().rposition(|(s, _)| *s <= t).unwrap_or(0)
                    })
                    .collect();
                (entries.iter().map(|(_, q)| q.clone()).collect(), Rule::Schedule(index))
            }
            VolatilityPolicy::Feedback(field) => {
                if field.grid().dim() != spec.n() {
                    return Err(Error::DimensionMismatch(format!(
                        "feedback field has dimension {}, problem has n = {}",
                        field.grid().dim(),
                        spec.n()
                    )));
                }
                let mats = gamma.candidates();
                for q in &mats {
                    check(q)?;
                }
                (mats, Rule::Feedback(Box::new(Curvature::new(field))))
            }
        };
        let roots = mats.iter().map(sqrt_psd).collect::<Result<Vec<_>>>()?;
        let qdt = mats
            .iter()
            .map(|q| q.transpose().iter().map(|v| v * dt).collect())
            .collect();
        Ok(ResolvedVolatility { mats, roots, qdt, rule })
    }
}

/// Row-major symmetric square root by eigendecomposition.
pub(crate) fn sqrt_psd(q: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = SymmetricEigen::new(q.clone());
    let scale = q.amax().max(1.0);
    if let Some(&l) = eig.eigenvalues.iter().find(|&&l| l < -1e-12 * scale) {
        return Err(Error::InvalidInput(format!(
            "volatility matrix is not positive semidefinite (eigenvalue {l:e})"
        )));
    }
    let root_l = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&root_l) * eig.eigenvectors.transpose();
    Ok(root.transpose().iter().copied().collect())
}

#[derive(Debug, Clone)]
pub(crate) enum Rule {
    Fixed,
    /// Matrix index per time step.
    Schedule(Vec<usize>),
    Feedback(Box<Curvature>),
}

/// Scenario matrices with their square roots and `Q·dt`, both row-major.
#[derive(Debug, Clone)]
pub(crate) struct ResolvedVolatility {
    pub mats: Vec<DMatrix<f64>>,
    pub roots: Vec<Vec<f64>>,
    pub qdt: Vec<Vec<f64>>,
    pub rule: Rule,
}

impl ResolvedVolatility {
    /// Index of the matrix in force at step `k`, state `x`, volatility `sigma`
    /// (row-major n×d).
    #[inline]
    pub fn choose(&self, k: usize, x: &[f64], sigma: &[f64], d: usize) -> usize {
        match &self.rule {
            Rule::Fixed => 0,
            Rule::Schedule(index) => index[k],
            Rule::Feedback(c) => c.worst(x, sigma, d, &self.mats),
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.rule, Rule::Fixed)
    }

    pub fn is_state_free(&self) -> bool {
        !matches!(self.rule, Rule::Feedback(_))
    }
}

/// Grid Hessians of a value field, one n×n block per node.
#[derive(Debug, Clone)]
pub(crate) struct Curvature {
    grid: Grid,
    hess: Vec<f64>,
}

impl Curvature {
    fn new(field: &ValueField) -> Self {
        let grid = field.grid().clone();
        let n = grid.dim();
        let v = field.values();
        let mut hess = vec![0.0; grid.len() * n * n];
        for node in 0..grid.len() {
            // Shift to the nearest node where every central difference exists.
            let mut idx = grid.multi_index(node);
            for (a, i) in idx.iter_mut().enumerate() {
                *i = (*i).clamp(1, grid.axes()[a].count - 2);
            }
            let at = |shift: &[(usize, isize)]| {
                let mut j = idx.clone();
                for &(a, s) in shift {
                    j[a] = (j[a] as isize + s) as usize;
                }
                v[grid.node_index(&j)]
            };
            let block = &mut hess[node * n * n..(node + 1) * n * n];
            for a in 0..n {
                let h = grid.spacing(a);
                block[a * n + a] = (at(&[(a, 1)]) - 2.0 * at(&[]) + at(&[(a, -1)])) / (h * h);
                for b in a + 1..n {
                    let hh = 4.0 * h * grid.spacing(b);
                    let c = (at(&[(a, 1), (b, 1)]) - at(&[(a, 1), (b, -1)]) - at(&[(a, -1), (b, 1)])
                        + at(&[(a, -1), (b, -1)]))
                        / hh;
                    block[a * n + b] = c;
                    block[b * n + a] = c;
                }
            }
        }
        Self { grid, hess }
    }

    fn worst(&self, x: &[f64], sigma: &[f64], d: usize, mats: &[DMatrix<f64>]) -> usize {
        let n = self.grid.dim();
        let node = self.grid.nearest_node(x);
        let h = &self.hess[node * n * n..(node + 1) * n * n];
        let a = DMatrix::from_fn(d, d, |i, j| {
            let mut s = 0.0;
            for r in 0..n {
                for c in 0..n {
                    s += sigma[r * d + i] * h[r * n + c] * sigma[c * d + j];
                }
            }
            s
        });
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, q) in mats.iter().enumerate() {
            let v = trace_product(&a, q);
            if v > best.0 {
                best = (v, k);
            }
        }
        best.1
    }
}

/// The control applied along a path.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlPolicy {
    /// A fixed point of the control set.
    Constant(Vec<f64>),
    /// The field's per-node policy, read at the grid node nearest the state.
    Feedback(ValueField),
}

impl ControlPolicy {
    pub(crate) fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        match self {
            ControlPolicy::Constant(u) => {
                if u.len() != spec.m() {
                    return Err(Error::DimensionMismatch(format!(
                        "control has {} components, expected {}",
                        u.len(),
                        spec.m()
                    )));
                }
                if !spec.controls().contains(u) {
                    return Err(Error::InvalidInput(format!("control {u:?} lies outside U")));
                }
            }
            ControlPolicy::Feedback(field) => {
                if field.grid().dim() != spec.n() {
                    return Err(Error::DimensionMismatch(format!(
                        "feedback field has dimension {}, problem has n = {}",
                        field.grid().dim(),
                        spec.n()
                    )));
                }
                let policy = field
                    .policy()
                    .ok_or_else(|| Error::InvalidInput("feedback field carries no policy".into()))?;
                if policy.iter().any(|&k| k >= spec.controls().len()) {
                    return Err(Error::InvalidInput(
                        "feedback policy index outside the control lattice".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Control in force at state `x`.
    #[inline]
    pub fn at<'a>(&'a self, spec: &'a ProblemSpec, x: &[f64]) -> &'a [f64] {
        match self {
            ControlPolicy::Constant(u) => u,
            ControlPolicy::Feedback(field) => {
                let node = field.grid().nearest_node(x);
                let k = field.policy().map_or(0, |p| p[node]);
                spec.controls().point(k)
            }
        }
    }
}
