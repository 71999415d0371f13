//! The sublinear generator `G(A) = ½ sup_{Q∈Γ} tr[AQ]` of volatility uncertainty.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

const MEMBERSHIP_TOL: f64 = 1e-12;

/// Bounded set Γ of admissible quadratic-variation densities.
///
/// For `d = 1` Γ is the interval `[sigma_lo2, sigma_hi2]` and G is evaluated
/// in closed form. For `d ≥ 2` Γ is represented by a finite list of candidate
/// matrices, so [`g_of`] is a lower approximation of the generator of any
/// larger convex set.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySet {
    dim: usize,
    sigma_lo2: f64,
    sigma_hi2: f64,
    candidates: Vec<DMatrix<f64>>,
}

impl UncertaintySet {
    pub fn new(dim: usize, sigma_lo2: f64, sigma_hi2: f64, candidates: Vec<DMatrix<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("noise dimension must be positive".into()));
        }
        if !(sigma_lo2 > 0.0 && sigma_lo2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sigma_lo2 must be positive (G non-degenerate), got {sigma_lo2}"
            )));
        }
        if !(sigma_hi2 >= sigma_lo2 && sigma_hi2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sigma_hi2 = {sigma_hi2} must be finite and at least sigma_lo2 = {sigma_lo2}"
            )));
        }
        let set = Self {
            dim,
            sigma_lo2,
            sigma_hi2,
            candidates,
        };
        for q in &set.candidates {
            set.check_member(q)?;
        }
        if dim >= 2 && set.candidates.is_empty() {
            return Err(Error::EmptyCandidates(dim));
        }
        Ok(set)
    }

    /// One-dimensional interval `[sigma_lo2, sigma_hi2]`.
    pub fn interval(sigma_lo2: f64, sigma_hi2: f64) -> Result<Self> {
        Self::new(1, sigma_lo2, sigma_hi2, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma_lo2(&self) -> f64 {
        self.sigma_lo2
    }

    pub fn sigma_hi2(&self) -> f64 {
        self.sigma_hi2
    }

    /// `C_G = 1 + ½(σ̄² + 1/σ̲²)`, the moment constant of the exponential martingale bound.
    pub fn moment_constant(&self) -> f64 {
        1.0 + 0.5 * (self.sigma_hi2 + 1.0 / self.sigma_lo2)
    }

    /// Checks symmetry and `σ̲²·I ⪯ Q ⪯ σ̄²·I`.
    pub fn check_member(&self, q: &DMatrix<f64>) -> Result<()> {
        if q.nrows() != self.dim || q.ncols() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "candidate is {}x{}, expected {d}x{d}",
                q.nrows(),
                q.ncols(),
                d = self.dim
            )));
        }
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("candidate has non-finite entries".into()));
        }
        let asym = (q - q.transpose()).amax();
        if asym > MEMBERSHIP_TOL {
            return Err(Error::InvalidInput(format!(
                "candidate is not symmetric (deviation {asym:e})"
            )));
        }
        let eig = SymmetricEigen::new(q.clone());
        let lo = eig.eigenvalues.min();
        let hi = eig.eigenvalues.max();
        let scale = 1.0 + self.sigma_hi2;
        if lo < self.sigma_lo2 - MEMBERSHIP_TOL * scale || hi > self.sigma_hi2 + MEMBERSHIP_TOL * scale {
            return Err(Error::InvalidInput(format!(
                "candidate eigenvalues [{lo}, {hi}] outside [{}, {}]",
                self.sigma_lo2, self.sigma_hi2
            )));
        }
        Ok(())
    }

    /// Matrices enumerated by the solver and the Monte Carlo scenarios: the two
    /// interval endpoints for `d = 1` (one when they coincide), the candidate
    /// list otherwise.
    pub fn candidates(&self) -> Vec<DMatrix<f64>> {
        if self.dim == 1 && self.candidates.is_empty() {
            let mut out = vec![DMatrix::from_element(1, 1, self.sigma_lo2)];
            if self.sigma_hi2 > self.sigma_lo2 {
                out.push(DMatrix::from_element(1, 1, self.sigma_hi2));
            }
            out
        } else {
            self.candidates.clone()
        }
    }

    /// Explicit candidates as supplied (empty for an implied 1-d interval).
    pub fn explicit_candidates(&self) -> &[DMatrix<f64>] {
        &self.candidates
    }
}

/// `G(A) = ½ sup_{Q∈Γ} tr[AQ]`.
///
/// Exact for `d = 1`: `½(σ̄²·a⁺ − σ̲²·a⁻)`. For `d ≥ 2`, the maximum over the
/// candidate list.
pub fn g_of(gamma: &UncertaintySet, a: &DMatrix<f64>) -> Result<f64> {
    let d = gamma.dim;
    if a.nrows() != d || a.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "G expects a {d}x{d} matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if d == 1 {
        return Ok(g_scalar(gamma, a[(0, 0)]));
    }
    if gamma.candidates.is_empty() {
        return Err(Error::EmptyCandidates(d));
    }
    Ok(0.5
        * gamma
            .candidates
            .iter()
            .map(|q| trace_product(a, q))
            .fold(f64::NEG_INFINITY, f64::max))
}

/// Scalar form for `d = 1`.
pub fn g_scalar(gamma: &UncertaintySet, a: f64) -> f64 {
    0.5 * (gamma.sigma_hi2 * a.max(0.0) - gamma.sigma_lo2 * (-a).max(0.0))
}

/// `tr[A Q]` for square matrices of equal size.
pub fn trace_product(a: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    a.iter().zip(q.transpose().iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gamma() -> UncertaintySet {
        UncertaintySet::interval(0.25, 1.0).unwrap()
    }

    // Brute-force: ½·max over the interval endpoints of a·q.
    fn endpoint_oracle(a: f64, lo: f64, hi: f64) -> f64 {
        [lo, hi].iter().map(|q| 0.5 * a * q).fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn scalar_examples() {
        let g = gamma();
        let one = |a: f64| g_of(&g, &DMatrix::from_element(1, 1, a)).unwrap();
        assert_eq!(endpoint_oracle(2.0, 0.25, 1.0), 1.0);
        assert_eq!(endpoint_oracle(-2.0, 0.25, 1.0), -0.25);
        assert_eq!(one(2.0), 1.0);
        assert_eq!(one(-2.0), -0.25);
        assert_eq!(one(0.0), 0.0);
    }

    #[test]
    fn zero_matrix_in_two_dimensions() {
        let q1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let g = UncertaintySet::new(2, 0.25, 1.5, vec![q1]).unwrap();
        assert_eq!(g_of(&g, &DMatrix::zeros(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_sets() {
        assert!(UncertaintySet::interval(0.0, 1.0).is_err());
        assert!(UncertaintySet::interval(1.0, 0.5).is_err());
        assert_eq!(
            UncertaintySet::new(2, 0.25, 1.0, vec![]),
            Err(Error::EmptyCandidates(2))
        );
        let too_big = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        assert!(UncertaintySet::new(2, 0.25, 1.0, vec![too_big]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.5]);
        assert!(UncertaintySet::new(2, 0.25, 1.0, vec![asym]).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            g_of(&gamma(), &DMatrix::zeros(2, 2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn implied_endpoints() {
        assert_eq!(gamma().candidates().len(), 2);
        assert_eq!(UncertaintySet::interval(0.5, 0.5).unwrap().candidates().len(), 1);
        assert_eq!(gamma().moment_constant(), 1.0 + 0.5 * (1.0 + 4.0));
    }
}
