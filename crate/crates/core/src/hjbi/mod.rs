//! Grid solver for the elliptic HJBI equation by parabolic horizon truncation.
//!
//! The parabolic equation `∂_t v + inf_u [G(H) + ⟨∂v, b⟩ + f] = 0` is marched
//! with an explicit monotone scheme from a zero terminal guess; the elliptic
//! solution is the long-time limit, reached at rate `exp(−μt)`.

mod field;
mod grid;
mod residual;
mod scheme;
mod solve;

pub use field::{fmt17, ValueField};
pub use grid::{build_grid, Axis, Grid, DEFAULT_MARGIN, MAX_DIM};
pub use residual::{
    compute_h, hjbi_integrand, hjbi_residual_at, EvaluationPoint, HMatrix, PointResidual, SYMMETRY_TOL,
};
pub use scheme::{parabolic_step, Scheme, CFL_SAFETY, MAX_CACHED_COEFFICIENTS};
pub use solve::{
    backward_semigroup, dpp_residual, extract_policy, fit_exponential_rate, horizon_fields, resolve_mu, solve_elliptic,
    solve_elliptic_with, window_steps, SolveOptions, SolveReport, MU_SAMPLES,
};
