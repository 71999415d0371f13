//! Lock-step Euler–Maruyama integration of several lanes sharing one
//! Brownian path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::policy::{ControlPolicy, ResolvedVolatility, VolatilityPolicy};
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;

/// Receives the simulated states of one path.
pub(crate) trait PathVisitor {
    /// State `x` and control `u` of `lane` at step `k` (time `k·dt`).
    fn state(&mut self, lane: usize, k: usize, x: &[f64], u: &[f64]);

    /// Brownian increment `ΔW ~ N(0, dt·I)` and `Q·dt` (row-major) applied
    /// to `lane` between steps `k` and `k + 1`.
    fn increment(&mut self, _lane: usize, _k: usize, _dw: &[f64], _qdt: &[f64]) {}

    /// `lane` left the floating-point range at step `k`; no further calls
    /// for it follow.
    fn overflow(&mut self, _lane: usize, _k: usize) {}

    /// States of every lane at step `k` for a one-dimensional model in
    /// which all lanes are still finite.
    #[inline]
    fn scalar_states(&mut self, k: usize, xs: &[f64], u: &[f64]) {
        for (l, x) in xs.iter().enumerate() {
            self.state(l, k, std::slice::from_ref(x), u);
        }
    }
}

/// Number of Euler steps covering `horizon`, rounded to the nearest whole
/// step and at least one.
pub(crate) fn step_count(dt: f64, horizon: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    if !(horizon >= dt && horizon.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "horizon {horizon} must be finite and at least the time step {dt}"
        )));
    }
    Ok(((horizon / dt).round() as usize).max(1))
}

/// Per-path generator: the ChaCha8 stream `path` under key `seed`.
pub(crate) fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// `c0 + C·x` for every coefficient output, valid when the control is
/// constant and `b`, `σ`, `h` are affine in the state.
#[derive(Debug, Clone)]
struct AffineCoefficients {
    c0: Vec<f64>,
    /// Row-major, outputs × n.
    c: Vec<f64>,
}

impl AffineCoefficients {
    fn build(spec: &ProblemSpec, u: &[f64]) -> Result<Option<Self>> {
        let n = spec.n();
        let d = spec.d();
        let is_x = |name: &str| name.starts_with('x');
        let affine = |e: &crate::expr::Expr| e.degree_in(&is_x).is_some_and(|k| k <= 1);
        let all_affine = (0..n).all(|i| affine(spec.drift_expr(i)))
            && (0..n).all(|i| (0..d).all(|k| affine(spec.sigma_expr(i, k))))
            && (0..d).all(|i| (0..d).all(|j| (0..n).all(|k| affine(spec.h_expr(i, j, k)))));
        if !all_affine {
            return Ok(None);
        }
        let eval = |x: &[f64]| -> Result<Vec<f64>> {
            let slots = spec.slots(x, u, 0.0, &vec![0.0; d]);
            let mut out = vec![0.0; n + n * d + d * d * n];
            let (b, rest) = out.split_at_mut(n);
            let (s, h) = rest.split_at_mut(n * d);
            spec.eval_drift(&slots, b)?;
            spec.eval_sigma(&slots, s)?;
            spec.eval_h(&slots, h)?;
            Ok(out)
        };
        let c0 = eval(&vec![0.0; n])?;
        let outputs = c0.len();
        let mut c = vec![0.0; outputs * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let v = eval(&e)?;
            for o in 0..outputs {
                c[o * n + j] = v[o] - c0[o];
            }
        }
        Ok(Some(Self { c0, c }))
    }

    #[inline]
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for (o, v) in out.iter_mut().enumerate() {
            let row = &self.c[o * n..(o + 1) * n];
            let mut s = self.c0[o];
            for (c, xj) in row.iter().zip(x) {
                s += c * xj;
            }
            *v = s;
        }
    }
}

/// Scalar `n = d = 1` model with fixed control: `b = b0 + b1·x`, etc.
#[derive(Debug, Clone, Copy)]
struct Scalar {
    b: (f64, f64),
    s: (f64, f64),
    h: Option<(f64, f64)>,
}

pub(crate) struct Engine<'a> {
    spec: &'a ProblemSpec,
    ctrl: &'a ControlPolicy,
    x0: Vec<Vec<f64>>,
    vols: Vec<ResolvedVolatility>,
    dt: f64,
    sqrt_dt: f64,
    steps: usize,
    affine: Option<AffineCoefficients>,
    scalar: Option<Scalar>,
}

struct Work {
    coef: Vec<f64>,
    slots: Vec<f64>,
    noise: Vec<f64>,
}

impl<'a> Engine<'a> {
    /// One lane per `(x0, vol)` pair.
    pub fn new(
        spec: &'a ProblemSpec,
        ctrl: &'a ControlPolicy,
        lanes: &[(Vec<f64>, &VolatilityPolicy)],
        dt: f64,
        horizon: f64,
    ) -> Result<Self> {
        let steps = step_count(dt, horizon)?;
        ctrl.validate(spec)?;
        if lanes.is_empty() {
            return Err(Error::InvalidInput("no lanes to simulate".into()));
        }
        let mut x0 = Vec::with_capacity(lanes.len());
        let mut vols = Vec::with_capacity(lanes.len());
        for (x, vol) in lanes {
            if x.len() != spec.n() {
                return Err(Error::DimensionMismatch(format!(
                    "initial state has {} components, expected {}",
                    x.len(),
                    spec.n()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("initial state is not finite".into()));
            }
            x0.push(x.clone());
            vols.push(vol.resolve(spec, dt, steps)?);
        }
        let affine = match ctrl {
            ControlPolicy::Constant(u) => AffineCoefficients::build(spec, u)?,
            ControlPolicy::Feedback(_) => None,
        };
        let scalar = match &affine {
            Some(a) if spec.n() == 1 && spec.d() == 1 && vols.iter().all(|v| v.is_state_free()) => Some(Scalar {
                b: (a.c0[0], a.c[0]),
                s: (a.c0[1], a.c[1]),
                h: (!spec.h_is_zero()).then_some((a.c0[2], a.c[2])),
            }),
            _ => None,
        };
        Ok(Self {
            spec,
            ctrl,
            x0,
            vols,
            dt,
            sqrt_dt: dt.sqrt(),
            steps,
            affine,
            scalar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lanes(&self) -> usize {
        self.x0.len()
    }

    #[cfg(test)]
    fn without_fast_paths(mut self) -> Self {
        self.affine = None;
        self.scalar = None;
        self
    }

    /// Runs every path in parallel and returns the per-path results in
    /// path order.
    pub fn run<V, F>(&self, n_paths: usize, seed: u64, make: F) -> Result<Vec<V>>
    where
        V: PathVisitor + Send,
        F: Fn() -> V + Sync,
    {
        if n_paths == 0 {
            return Err(Error::InvalidInput("path count must be at least 1".into()));
        }
        (0..n_paths as u64)
            .into_par_iter()
            .map(|p| {
                let mut v = make();
                self.run_path(p, seed, &mut v)?;
                Ok(v)
            })
            .collect()
    }

    pub fn run_path<V: PathVisitor>(&self, path: u64, seed: u64, v: &mut V) -> Result<()> {
        let mut rng = path_rng(seed, path);
        match self.scalar {
            Some(s) => self.run_scalar(s, &mut rng, v),
            None => self.run_general(&mut rng, v),
        }
    }

    fn run_scalar<V: PathVisitor>(&self, m: Scalar, rng: &mut ChaCha8Rng, v: &mut V) -> Result<()> {
        let lanes = self.lanes();
        let u = self.ctrl.at(self.spec, &self.x0[0]);
        let mut x: Vec<f64> = self.x0.iter().map(|x| x[0]).collect();
        let mut next = vec![0.0; lanes];
        let mut alive = vec![true; lanes];
        let mut all_alive = true;
        let mut choice = vec![0usize; lanes];
        let mut qdt = vec![0.0; lanes];
        let mut root = vec![0.0; lanes];
        let fixed = self.vols.iter().all(|vol| vol.is_fixed());
        let refresh = |k: usize, choice: &mut [usize], qdt: &mut [f64], root: &mut [f64]| {
            for (l, vol) in self.vols.iter().enumerate() {
                let c = vol.choose(k, &[], &[], 1);
                choice[l] = c;
                qdt[l] = vol.qdt[c][0];
                root[l] = vol.roots[c][0];
            }
        };
        refresh(0, &mut choice, &mut qdt, &mut root);
        v.scalar_states(0, &x, u);
        let dt = self.dt;
        for k in 0..self.steps {
            let z: f64 = rng.sample(StandardNormal);
            let dw = self.sqrt_dt * z;
            if !fixed && k > 0 {
                refresh(k, &mut choice, &mut qdt, &mut root);
            }
            match m.h {
                Some(h) => {
                    for l in 0..lanes {
                        let xl = x[l];
                        let mut inc = (m.b.0 + m.b.1 * xl) * dt;
                        inc += (h.0 + h.1 * xl) * qdt[l];
                        inc += (m.s.0 + m.s.1 * xl) * (root[l] * dw);
                        next[l] = xl + inc;
                    }
                }
                None => {
                    for l in 0..lanes {
                        let xl = x[l];
                        let mut inc = (m.b.0 + m.b.1 * xl) * dt;
                        inc += (m.s.0 + m.s.1 * xl) * (root[l] * dw);
                        next[l] = xl + inc;
                    }
                }
            }
            for l in 0..lanes {
                if alive[l] {
                    v.increment(l, k, &[dw], &self.vols[l].qdt[choice[l]]);
                }
            }
            if all_alive && next.iter().all(|x| x.is_finite()) {
                std::mem::swap(&mut x, &mut next);
                v.scalar_states(k + 1, &x, u);
                continue;
            }
            for l in 0..lanes {
                if !alive[l] {
                    continue;
                }
                if !next[l].is_finite() {
                    alive[l] = false;
                    all_alive = false;
                    v.overflow(l, k + 1);
                    continue;
                }
                x[l] = next[l];
                v.state(l, k + 1, std::slice::from_ref(&x[l]), u);
            }
        }
        Ok(())
    }

    fn coefficients(&self, x: &[f64], u: &[f64], w: &mut Work) -> Result<()> {
        match &self.affine {
            Some(a) => {
                a.eval(x, &mut w.coef);
                Ok(())
            }
            None => {
                let (n, d) = (self.spec.n(), self.spec.d());
                self.spec.fill_slots(&mut w.slots, x, u, 0.0, &vec![0.0; d]);
                let (b, rest) = w.coef.split_at_mut(n);
                let (s, h) = rest.split_at_mut(n * d);
                self.spec.eval_drift(&w.slots, b)?;
                self.spec.eval_sigma(&w.slots, s)?;
                if !self.spec.h_is_zero() {
                    self.spec.eval_h(&w.slots, h)?;
                }
                Ok(())
            }
        }
    }

    fn run_general<V: PathVisitor>(&self, rng: &mut ChaCha8Rng, v: &mut V) -> Result<()> {
        let (n, d) = (self.spec.n(), self.spec.d());
        let lanes = self.lanes();
        let mut x: Vec<f64> = self.x0.concat();
        let mut alive = vec![true; lanes];
        let mut w = Work {
            coef: vec![0.0; n + n * d + d * d * n],
            slots: vec![0.0; self.spec.slot_count()],
            noise: vec![0.0; d],
        };
        let mut dw = vec![0.0; d];
        let mut next = vec![0.0; n];
        let h_zero = self.spec.h_is_zero();
        for l in 0..lanes {
            let xl = &x[l * n..(l + 1) * n];
            v.state(l, 0, xl, self.ctrl.at(self.spec, xl));
        }
        for k in 0..self.steps {
            for w in dw.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *w = self.sqrt_dt * z;
            }
            for l in 0..lanes {
                if !alive[l] {
                    continue;
                }
                let xl = &x[l * n..(l + 1) * n];
                let u = self.ctrl.at(self.spec, xl);
                match self.coefficients(xl, u, &mut w) {
                    Ok(()) => {}
                    Err(Error::NonFinite) => {
                        alive[l] = false;
                        v.overflow(l, k + 1);
                        continue;
                    }
                    Err(e) => return Err(e),
                }
                let (b, rest) = w.coef.split_at(n);
                let (sigma, h) = rest.split_at(n * d);
                let vol = &self.vols[l];
                let c = vol.choose(k, xl, sigma, d);
                let (root, qdt) = (&vol.roots[c], &vol.qdt[c]);
                for (kk, nz) in w.noise.iter_mut().enumerate() {
                    let mut s = root[kk * d] * dw[0];
                    for j in 1..d {
                        s += root[kk * d + j] * dw[j];
                    }
                    *nz = s;
                }
                let mut finite = true;
                for i in 0..n {
                    let mut inc = b[i] * self.dt;
                    if !h_zero {
                        for (ij, q) in qdt.iter().enumerate() {
                            inc += h[ij * n + i] * q;
                        }
                    }
                    for (kk, nz) in w.noise.iter().enumerate() {
                        inc += sigma[i * d + kk] * nz;
                    }
                    next[i] = xl[i] + inc;
                    finite &= next[i].is_finite();
                }
                v.increment(l, k, &dw, qdt);
                if !finite {
                    alive[l] = false;
                    v.overflow(l, k + 1);
                    continue;
                }
                x[l * n..(l + 1) * n].copy_from_slice(&next);
                let xl = &x[l * n..(l + 1) * n];
                v.state(l, k + 1, xl, self.ctrl.at(self.spec, xl));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Trace(Vec<Vec<f64>>);

    impl PathVisitor for Trace {
        fn state(&mut self, lane: usize, _k: usize, x: &[f64], _u: &[f64]) {
            self.0[lane].extend_from_slice(x);
        }
    }

    #[test]
    fn scalar_and_general_paths_agree_bitwise() {
        let spec = ProblemSpec::example57(1.0).unwrap();
        let ctrl = ControlPolicy::Constant(vec![1.0]);
        let lo = VolatilityPolicy::constant_scalar(0.25);
        let hi = VolatilityPolicy::constant_scalar(1.0);
        let lanes = [(vec![0.5], &lo), (vec![-1.0], &hi)];
        let fast = Engine::new(&spec, &ctrl, &lanes, 0.01, 1.0).unwrap();
        assert!(fast.scalar.is_some());
        let slow = Engine::new(&spec, &ctrl, &lanes, 0.01, 1.0)
            .unwrap()
            .without_fast_paths();
        let a = fast.run(4, 9, || Trace(vec![Vec::new(); 2])).unwrap();
        let b = slow.run(4, 9, || Trace(vec![Vec::new(); 2])).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.0, q.0);
        }
    }

    #[test]
    fn affine_extraction_matches_expressions() {
        let spec = ProblemSpec::builder(2, 1, 1)
            .drift(0, "-x1 + 2 * x2 * u1")
            .drift(1, "3 - x2")
            .sigma(0, 0, "x1 + u1")
            .sigma(1, 0, "0.5")
            .f("-y")
            .controls(crate::ControlSet::interval(0.0, 1.0).unwrap())
            .gamma(crate::UncertaintySet::interval(0.25, 1.0).unwrap())
            .build()
            .unwrap();
        let a = AffineCoefficients::build(&spec, &[0.5]).unwrap().unwrap();
        let mut out = vec![0.0; a.c0.len()];
        a.eval(&[1.5, -2.0], &mut out);
        assert_eq!(&out[..4], &[-1.5 - 2.0, 5.0, 2.0, 0.5]);
        let nonlinear = ProblemSpec::builder(1, 1, 0)
            .drift(0, "-x1^3")
            .f("-y")
            .gamma(crate::UncertaintySet::interval(0.25, 1.0).unwrap())
            .build()
            .unwrap();
        assert!(AffineCoefficients::build(&nonlinear, &[]).unwrap().is_none());
    }

    #[test]
    fn step_count_rounds() {
        assert_eq!(step_count(1e-3, 15.0).unwrap(), 15000);
        assert!(step_count(0.0, 1.0).is_err());
        assert!(step_count(0.5, 0.1).is_err());
    }
}
