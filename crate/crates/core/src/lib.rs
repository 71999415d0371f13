//! Value functions and optimal feedback controls of infinite-horizon
//! stochastic control problems under volatility uncertainty.
//!
//! [`problem`] describes a problem, [`hjbi`] solves its HJBI equation on a
//! grid, [`montecarlo`] simulates the controlled G-SDE under volatility
//! scenarios, and [`verification`] cross-checks computed fields.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assumptions;
pub mod error;
pub mod expr;
pub mod gfunc;
pub mod hjbi;
pub mod montecarlo;
pub mod problem;
pub mod record;
pub mod verification;

pub use assumptions::{check_assumptions, AssumptionReport, SampleBox, Verdict, Witness};
pub use error::{Error, Result};
pub use expr::{eval_expression, parse_expression, Expr, Program};
pub use gfunc::{g_of, UncertaintySet};
pub use problem::{ControlSet, Discount, ProblemBuilder, ProblemSpec};
pub use record::to_record;
