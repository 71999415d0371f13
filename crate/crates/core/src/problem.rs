//! Control problem data: coefficients, control set, uncertainty set.
//!
//! Expressions range over the variables `x1..xn` (state), `u1..um` (control),
//! `y` (value) and `z1..zd` (value gradient times volatility). Every
//! coefficient is compiled once into a slot program laid out in that order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::expr::{parse_with, BinaryOp, Expr, Program, UnaryOp};
use crate::gfunc::UncertaintySet;

/// Rectangular box `U` discretised into a product lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
    points_per_axis: usize,
    axes: Vec<Vec<f64>>,
    lattice: Vec<f64>,
}

pub const DEFAULT_CONTROL_POINTS: usize = 33;

impl ControlSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points_per_axis: usize) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch(format!(
                "control bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if points_per_axis == 0 {
            return Err(Error::InvalidInput("points_per_axis must be positive".into()));
        }
        for (a, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidInput(format!(
                    "control axis {}: need finite lower <= upper, got [{lo}, {hi}]",
                    a + 1
                )));
            }
        }
        let axes: Vec<Vec<f64>> = lower
            .iter()
            .zip(&upper)
            .map(|(&lo, &hi)| {
                if hi == lo || points_per_axis == 1 {
                    vec![lo]
                } else {
                    let step = (hi - lo) / (points_per_axis - 1) as f64;
                    (0..points_per_axis)
                        .map(|i| {
                            if i + 1 == points_per_axis {
                                hi
                            } else {
                                lo + i as f64 * step
                            }
                        })
                        .collect()
                }
            })
            .collect();
        let m = lower.len();
        let count: usize = axes.iter().map(Vec::len).product();
        let mut lattice = Vec::with_capacity(count * m);
        for idx in 0..count {
            let mut rem = idx;
            let mut point = vec![0.0; m];
            for a in (0..m).rev() {
                let len = axes[a].len();
                point[a] = axes[a][rem % len];
                rem /= len;
            }
            lattice.extend(point);
        }
        Ok(Self {
            lower,
            upper,
            points_per_axis,
            axes,
            lattice,
        })
    }

    /// Interval `[lower, upper]` with the default 33 lattice points.
    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower], vec![upper], DEFAULT_CONTROL_POINTS)
    }

    /// Control set of a problem with no control variable.
    pub fn empty() -> Self {
        Self::new(Vec::new(), Vec::new(), 1).expect("empty control set is valid")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    /// Number of lattice points.
    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lattice point `index`, first axis varying slowest.
    pub fn point(&self, index: usize) -> &[f64] {
        let m = self.dim();
        &self.lattice[index * m..(index + 1) * m]
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim()
            && u.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Lattice index closest to `u` in Euclidean distance (lowest index on ties).
    pub fn nearest_index(&self, u: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for k in 0..self.len() {
            let dist: f64 = self.point(k).iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best = k;
                best_dist = dist;
            }
        }
        best
    }
}

/// Discounted-cost data: `f(x, y, u) = −λ·y + ψ(x, u)`, `g = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discount {
    pub lambda: f64,
    pub psi: Expr,
}

/// Variable names in slot order: `x1..xn, u1..um, y, z1..zd`.
pub fn variable_names(n: usize, m: usize, d: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    names.extend((1..=m).map(|i| format!("u{i}")));
    names.push("y".into());
    names.extend((1..=d).map(|i| format!("z{i}")));
    names
}

#[derive(Debug, Clone)]
struct Compiled {
    drift: Vec<Program>,
    h: Vec<Program>,
    sigma: Vec<Program>,
    f: Program,
    g: Vec<Program>,
    psi: Option<Program>,
}

/// A fully validated control problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    n: usize,
    d: usize,
    m: usize,
    drift: Vec<Expr>,
    h: Vec<Expr>,
    sigma: Vec<Expr>,
    f: Expr,
    g: Vec<Expr>,
    controls: ControlSet,
    gamma: UncertaintySet,
    mu: Option<f64>,
    discount: Option<Discount>,
    compiled: Compiled,
}

impl ProblemSpec {
    pub fn builder(n: usize, d: usize, m: usize) -> ProblemBuilder {
        ProblemBuilder::new(n, d, m)
    }

    /// The linear discounted model `b = −x + u`, `h = 0`, `σ = x + u`,
    /// `U = [0, 1]`, `ψ = x − u`, with `Γ = [0.25, 1]` and `μ = λ`.
    pub fn example57(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
        }
        ProblemSpec::builder(1, 1, 1)
            .drift(0, "-x1 + u1")
            .sigma(0, 0, "x1 + u1")
            .discounted(lambda, "x1 - u1")
            .controls(ControlSet::interval(0.0, 1.0)?)
            .gamma(UncertaintySet::interval(0.25, 1.0)?)
            .mu(lambda)
            .build()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn drift_expr(&self, i: usize) -> &Expr {
        &self.drift[i]
    }

    pub fn sigma_expr(&self, i: usize, k: usize) -> &Expr {
        &self.sigma[i * self.d + k]
    }

    pub fn h_expr(&self, i: usize, j: usize, k: usize) -> &Expr {
        &self.h[(i * self.d + j) * self.n + k]
    }

    pub fn f_expr(&self) -> &Expr {
        &self.f
    }

    pub fn g_expr(&self, i: usize, j: usize) -> &Expr {
        &self.g[i * self.d + j]
    }

    pub fn controls(&self) -> &ControlSet {
        &self.controls
    }

    pub fn gamma(&self) -> &UncertaintySet {
        &self.gamma
    }

    pub fn mu(&self) -> Option<f64> {
        self.mu
    }

    pub fn discount(&self) -> Option<&Discount> {
        self.discount.as_ref()
    }

    pub fn with_mu(mut self, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidInput(format!("mu must be positive, got {mu}")));
        }
        self.mu = Some(mu);
        Ok(self)
    }

    pub fn with_gamma(mut self, gamma: UncertaintySet) -> Result<Self> {
        if gamma.dim() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "uncertainty set has dimension {}, problem has d = {}",
                gamma.dim(),
                self.d
            )));
        }
        self.gamma = gamma;
        Ok(self)
    }

    /// Length of the slot vector `[x, u, y, z]`.
    pub fn slot_count(&self) -> usize {
        self.n + self.m + 1 + self.d
    }

    pub fn variable_names(&self) -> Vec<String> {
        variable_names(self.n, self.m, self.d)
    }

    /// Writes `(x, u, y, z)` into a slot vector.
    pub fn fill_slots(&self, slots: &mut [f64], x: &[f64], u: &[f64], y: f64, z: &[f64]) {
        let (n, m) = (self.n, self.m);
        slots[..n].copy_from_slice(x);
        slots[n..n + m].copy_from_slice(u);
        slots[n + m] = y;
        slots[n + m + 1..].copy_from_slice(z);
    }

    pub fn slots(&self, x: &[f64], u: &[f64], y: f64, z: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.slot_count()];
        self.fill_slots(&mut s, x, u, y, z);
        s
    }

    /// `b(x, u)` into `out` (length n).
    pub fn eval_drift(&self, slots: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, p) in out.iter_mut().zip(&self.compiled.drift) {
            *o = p.eval(slots)?;
        }
        Ok(())
    }

    /// `σ(x, u)` into `out`, row-major n×d.
    pub fn eval_sigma(&self, slots: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, p) in out.iter_mut().zip(&self.compiled.sigma) {
            *o = p.eval(slots)?;
        }
        Ok(())
    }

    /// `h_ij(x, u)` into `out`, indexed `(i·d + j)·n + k`.
    pub fn eval_h(&self, slots: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, p) in out.iter_mut().zip(&self.compiled.h) {
            *o = p.eval(slots)?;
        }
        Ok(())
    }

    pub fn eval_f(&self, slots: &[f64]) -> Result<f64> {
        self.compiled.f.eval(slots)
    }

    /// `g_ij(x, y, z, u)` into `out`, row-major d×d.
    pub fn eval_g(&self, slots: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, p) in out.iter_mut().zip(&self.compiled.g) {
            *o = p.eval(slots)?;
        }
        Ok(())
    }

    /// `ψ(x, u)` of the discounted form, when present.
    pub fn eval_psi(&self, slots: &[f64]) -> Option<Result<f64>> {
        self.compiled.psi.as_ref().map(|p| p.eval(slots))
    }

    /// True when every `h_ij` is the literal constant zero.
    pub fn h_is_zero(&self) -> bool {
        self.h.iter().all(Expr::is_zero)
    }

    /// True when every `g_ij` is the literal constant zero.
    pub fn g_is_zero(&self) -> bool {
        self.g.iter().all(Expr::is_zero)
    }

    /// Structural symmetry `h_ij = h_ji`, `g_ij = g_ji`.
    pub fn is_structurally_symmetric(&self) -> bool {
        let d = self.d;
        (0..d).all(|i| {
            (0..d).all(|j| {
                self.g_expr(i, j) == self.g_expr(j, i)
                    && (0..self.n).all(|k| self.h_expr(i, j, k) == self.h_expr(j, i, k))
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Drift(usize),
    Sigma(usize, usize),
    H(usize, usize, usize),
    G(usize, usize),
    F,
}

/// Collects coefficient strings and validates them on [`ProblemBuilder::build`].
///
/// Indices are zero-based. An `h`/`g` entry given only for `(i, j)` is used
/// for `(j, i)` too; entries given for both must agree structurally.
#[derive(Debug, Clone)]
pub struct ProblemBuilder {
    n: usize,
    d: usize,
    m: usize,
    entries: BTreeMap<Slot, String>,
    discount: Option<(f64, String)>,
    controls: Option<ControlSet>,
    gamma: Option<UncertaintySet>,
    mu: Option<f64>,
}

impl ProblemBuilder {
    fn new(n: usize, d: usize, m: usize) -> Self {
        Self {
            n,
            d,
            m,
            entries: BTreeMap::new(),
            discount: None,
            controls: None,
            gamma: None,
            mu: None,
        }
    }

    pub fn drift(mut self, i: usize, text: &str) -> Self {
        self.entries.insert(Slot::Drift(i), text.into());
        self
    }

    pub fn sigma(mut self, i: usize, k: usize, text: &str) -> Self {
        self.entries.insert(Slot::Sigma(i, k), text.into());
        self
    }

    pub fn h(mut self, i: usize, j: usize, k: usize, text: &str) -> Self {
        self.entries.insert(Slot::H(i, j, k), text.into());
        self
    }

    pub fn f(mut self, text: &str) -> Self {
        self.entries.insert(Slot::F, text.into());
        self
    }

    pub fn g(mut self, i: usize, j: usize, text: &str) -> Self {
        self.entries.insert(Slot::G(i, j), text.into());
        self
    }

    /// Sets `f = −λ·y + ψ` and `g = 0`.
    pub fn discounted(mut self, lambda: f64, psi: &str) -> Self {
        self.discount = Some((lambda, psi.into()));
        self
    }

    pub fn controls(mut self, controls: ControlSet) -> Self {
        self.controls = Some(controls);
        self
    }

    pub fn gamma(mut self, gamma: UncertaintySet) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn mu(mut self, mu: f64) -> Self {
        self.mu = Some(mu);
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        let (n, d, m) = (self.n, self.d, self.m);
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput("n and d must be positive".into()));
        }
        let names = variable_names(n, m, d);
        let x_u: Vec<&str> = names[..n + m].iter().map(String::as_str).collect();
        let all: Vec<&str> = names.iter().map(String::as_str).collect();

        for slot in self.entries.keys() {
            let ok = match *slot {
                Slot::Drift(i) => i < n,
                Slot::Sigma(i, k) => i < n && k < d,
                Slot::H(i, j, k) => i < d && j < d && k < n,
                Slot::G(i, j) => i < d && j < d,
                Slot::F => true,
            };
            if !ok {
                return Err(Error::DimensionMismatch(format!(
                    "coefficient {} is out of range for n={n}, d={d}",
                    slot_name(*slot)
                )));
            }
        }

        let parse = |slot: Slot, vars: &[&str]| -> Result<Expr> {
            match self.entries.get(&slot) {
                None => Ok(Expr::zero()),
                Some(text) => parse_with(text, &|v| vars.contains(&v))
                    .map_err(|e| Error::InvalidInput(format!("{}: {e}", slot_name(slot)))),
            }
        };
        // (i, j) falls back to (j, i) when only one of them was given.
        let symmetric = |a: Slot, b: Slot, vars: &[&str]| -> Result<Expr> {
            if self.entries.contains_key(&a) {
                let ea = parse(a, vars)?;
                if self.entries.contains_key(&b) && parse(b, vars)? != ea {
                    return Err(Error::InvalidInput(format!(
                        "{} and {} differ; h_ij and g_ij must be symmetric in (i, j)",
                        slot_name(a),
                        slot_name(b)
                    )));
                }
                Ok(ea)
            } else {
                parse(b, vars)
            }
        };

        let drift = (0..n)
            .map(|i| parse(Slot::Drift(i), &x_u))
            .collect::<Result<Vec<_>>>()?;
        let sigma = (0..n)
            .flat_map(|i| (0..d).map(move |k| (i, k)))
            .map(|(i, k)| parse(Slot::Sigma(i, k), &x_u))
            .collect::<Result<Vec<_>>>()?;
        let mut h = Vec::with_capacity(d * d * n);
        for i in 0..d {
            for j in 0..d {
                for k in 0..n {
                    h.push(symmetric(Slot::H(i, j, k), Slot::H(j, i, k), &x_u)?);
                }
            }
        }

        let has_explicit_cost =
            self.entries.contains_key(&Slot::F) || self.entries.keys().any(|s| matches!(s, Slot::G(..)));
        let (f, g, discount) = match &self.discount {
            Some(_) if has_explicit_cost => {
                return Err(Error::InvalidInput(
                    "the discounted shorthand (psi, lambda) excludes explicit f and g".into(),
                ))
            }
            Some((lambda, psi_text)) => {
                if !(*lambda > 0.0 && lambda.is_finite()) {
                    return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
                }
                let psi = parse_with(psi_text, &|v| x_u.contains(&v))
                    .map_err(|e| Error::InvalidInput(format!("psi: {e}")))?;
                let f = Expr::binary(
                    BinaryOp::Add,
                    Expr::unary(
                        UnaryOp::Neg,
                        Expr::binary(BinaryOp::Mul, Expr::Const(*lambda), Expr::var("y")),
                    ),
                    psi.clone(),
                );
                let g = vec![Expr::zero(); d * d];
                (f, g, Some(Discount { lambda: *lambda, psi }))
            }
            None => {
                let f = parse(Slot::F, &all)?;
                let mut g = Vec::with_capacity(d * d);
                for i in 0..d {
                    for j in 0..d {
                        g.push(symmetric(Slot::G(i, j), Slot::G(j, i), &all)?);
                    }
                }
                (f, g, None)
            }
        };

        let controls = match self.controls {
            Some(c) => c,
            None if m == 0 => ControlSet::empty(),
            None => return Err(Error::InvalidInput("a control set is required when m > 0".into())),
        };
        if controls.dim() != m {
            return Err(Error::DimensionMismatch(format!(
                "control set has dimension {}, problem has m = {m}",
                controls.dim()
            )));
        }
        let gamma = self
            .gamma
            .ok_or_else(|| Error::InvalidInput("an uncertainty set is required".into()))?;
        if gamma.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "uncertainty set has dimension {}, problem has d = {d}",
                gamma.dim()
            )));
        }
        if let Some(mu) = self.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::InvalidInput(format!("mu must be positive, got {mu}")));
            }
        }

        let slot_of = |name: &str| names.iter().position(|v| v == name);
        let compile_all = |es: &[Expr]| es.iter().map(|e| e.compile(&slot_of)).collect::<Result<Vec<_>>>();
        let compiled = Compiled {
            drift: compile_all(&drift)?,
            h: compile_all(&h)?,
            sigma: compile_all(&sigma)?,
            f: f.compile(&slot_of)?,
            g: compile_all(&g)?,
            psi: discount.as_ref().map(|dc| dc.psi.compile(&slot_of)).transpose()?,
        };

        Ok(ProblemSpec {
            n,
            d,
            m,
            drift,
            h,
            sigma,
            f,
            g,
            controls,
            gamma,
            mu: self.mu,
            discount,
            compiled,
        })
    }
}

fn slot_name(slot: Slot) -> String {
    match slot {
        Slot::Drift(i) => format!("b_{}", i + 1),
        Slot::Sigma(i, k) => format!("sigma_{}{}", i + 1, k + 1),
        Slot::H(i, j, k) => format!("h_{}{}_{}", i + 1, j + 1, k + 1),
        Slot::G(i, j) => format!("g_{}{}", i + 1, j + 1),
        Slot::F => "f".into(),
    }
}
