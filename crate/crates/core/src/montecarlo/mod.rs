//! Simulation of the controlled G-SDE under volatility scenarios.
//!
//! A scenario fixes one probability measure of the uncertainty family by
//! choosing the quadratic-variation density `Q` along each path. Estimates
//! taken as a maximum over a finite family of scenarios are lower bounds on
//! the corresponding sublinear expectation.

mod bundle;
mod checks;
mod cost;
mod engine;
mod policy;
mod stats;

pub use bundle::{simulate_gsde, PathBundle, SimulationSummary};
pub use checks::{
    exp_martingale_moment, flow_contraction_estimate, ContractionEstimate, MomentEstimate, CONTRACTION_SAMPLES,
};
pub use cost::{discounted_cost, discounted_costs, robust_expectation, CostEstimate, RobustEstimate, ScenarioEstimate};
pub use policy::{ControlPolicy, VolatilityPolicy};
