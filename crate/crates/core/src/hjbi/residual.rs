use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gfunc::g_of;
use crate::problem::ProblemSpec;

/// Asymmetry of the H matrix above which [`HMatrix::asymmetric`] is set.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Arguments `(x, v, p, A, u)` of the Hamiltonian. `z = p·σ(x, u)` is always
/// recomputed from `p` via [`EvaluationPoint::z`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationPoint {
    pub x: Vec<f64>,
    pub v: f64,
    pub p: Vec<f64>,
    pub a: DMatrix<f64>,
    pub u: Vec<f64>,
}

impl EvaluationPoint {
    pub fn new(x: Vec<f64>, v: f64, p: Vec<f64>, a: DMatrix<f64>, u: Vec<f64>) -> Self {
        Self { x, v, p, a, u }
    }

    fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        let n = spec.n();
        if self.x.len() != n || self.p.len() != n || self.a.nrows() != n || self.a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "evaluation point does not match state dimension {n}"
            )));
        }
        if self.u.len() != spec.m() {
            return Err(Error::DimensionMismatch(format!(
                "control has {} components, expected {}",
                self.u.len(),
                spec.m()
            )));
        }
        let asym = (&self.a - self.a.transpose()).amax();
        if asym > SYMMETRY_TOL * (1.0 + self.a.amax()) {
            return Err(Error::InvalidInput(format!("A is not symmetric (deviation {asym:e})")));
        }
        Ok(())
    }

    /// Row vector `z = p·σ(x, u)` of length d.
    pub fn z(&self, spec: &ProblemSpec) -> Result<Vec<f64>> {
        let sigma = sigma_at(spec, &self.x, &self.u)?;
        Ok(p_times_sigma(&self.p, &sigma, spec.d()))
    }
}

/// Result of [`compute_h`].
#[derive(Debug, Clone, PartialEq)]
pub struct HMatrix {
    /// Symmetrised matrix `(H + Hᵀ)/2`.
    pub matrix: DMatrix<f64>,
    pub max_asymmetry: f64,
    /// Set when the raw matrix deviated from symmetry by more than [`SYMMETRY_TOL`].
    pub asymmetric: bool,
}

fn sigma_at(spec: &ProblemSpec, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let slots = spec.slots(x, u, 0.0, &vec![0.0; spec.d()]);
    let mut sigma = vec![0.0; spec.n() * spec.d()];
    spec.eval_sigma(&slots, &mut sigma)?;
    Ok(sigma)
}

fn p_times_sigma(p: &[f64], sigma: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| p.iter().enumerate().map(|(a, pa)| pa * sigma[a * d + k]).sum())
        .collect()
}

/// `H_ij = (σᵀAσ)_ij + 2⟨p, h_ij⟩ + 2 g_ij(x, v, pσ, u)`.
pub fn compute_h(spec: &ProblemSpec, pt: &EvaluationPoint) -> Result<HMatrix> {
    pt.validate(spec)?;
    let (n, d) = (spec.n(), spec.d());
    let sigma = sigma_at(spec, &pt.x, &pt.u)?;
    let z = p_times_sigma(&pt.p, &sigma, d);
    let slots = spec.slots(&pt.x, &pt.u, pt.v, &z);
    let mut h = vec![0.0; d * d * n];
    spec.eval_h(&slots, &mut h)?;
    let mut g = vec![0.0; d * d];
    spec.eval_g(&slots, &mut g)?;

    let s = DMatrix::from_row_slice(n, d, &sigma);
    let quad = s.transpose() * &pt.a * &s;
    let mut raw = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let ph: f64 = (0..n).map(|k| pt.p[k] * h[(i * d + j) * n + k]).sum();
            raw[(i, j)] = quad[(i, j)] + 2.0 * ph + 2.0 * g[i * d + j];
        }
    }
    let max_asymmetry = (&raw - raw.transpose()).amax();
    let matrix = (&raw + raw.transpose()) * 0.5;
    Ok(HMatrix {
        matrix,
        max_asymmetry,
        asymmetric: max_asymmetry > SYMMETRY_TOL,
    })
}

/// `G(H) + ⟨p, b⟩ + f` at the control of `pt`.
pub fn hjbi_integrand(spec: &ProblemSpec, pt: &EvaluationPoint) -> Result<f64> {
    let h = compute_h(spec, pt)?;
    let z = pt.z(spec)?;
    let slots = spec.slots(&pt.x, &pt.u, pt.v, &z);
    let mut b = vec![0.0; spec.n()];
    spec.eval_drift(&slots, &mut b)?;
    let pb: f64 = pt.p.iter().zip(&b).map(|(p, b)| p * b).sum();
    Ok(g_of(spec.gamma(), &h.matrix)? + pb + spec.eval_f(&slots)?)
}

/// Minimum of the integrand over the control lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct PointResidual {
    pub residual: f64,
    pub control_index: usize,
    pub control: Vec<f64>,
}

/// `inf_u [G(H) + ⟨p, b⟩ + f]` over the control lattice, lowest index on ties.
pub fn hjbi_residual_at(spec: &ProblemSpec, x: &[f64], v: f64, p: &[f64], a: &DMatrix<f64>) -> Result<PointResidual> {
    let controls = spec.controls();
    let mut best: Option<(f64, usize)> = None;
    for k in 0..controls.len() {
        let pt = EvaluationPoint::new(x.to_vec(), v, p.to_vec(), a.clone(), controls.point(k).to_vec());
        let val = hjbi_integrand(spec, &pt)?;
        if best.is_none_or(|(b, _)| val < b) {
            best = Some((val, k));
        }
    }
    let (residual, k) = best.expect("control lattice is never empty");
    Ok(PointResidual {
        residual,
        control_index: k,
        control: controls.point(k).to_vec(),
    })
}
