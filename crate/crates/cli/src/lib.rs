//! Command-line front end: loads a problem file and writes solver,
//! simulation and verification results to an output directory.
//!
//! Exit codes: 0 on success, 2 on invalid input, 3 on numerical failure.
//! Diagnostics go to standard error; data only to files.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod problem_file;

pub use commands::{run, Cli, CliError, Command};
pub use problem_file::{load_problem, parse_problem, LoadError, McSettings, ProblemFile, SolverSettings};

/// Environment variable that supplies the default `--out-dir`.
pub const OUT_DIR_ENV: &str = "HJBI_OUT_DIR";
