use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("no binding for variable `{0}`")]
    MissingBinding(String),

    #[error("division by zero")]
    DivisionByZero,

    #[error("square root of negative number {0}")]
    SqrtOfNegative(f64),

    #[error("expression produced a non-finite value")]
    NonFinite,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("uncertainty set has no candidate matrices for d = {0}")]
    EmptyCandidates(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time step {dt:e} exceeds the admissible bound {admissible:e}")]
    Cfl { dt: f64, admissible: f64 },

    #[error("cross-derivative stencil is not diagonally dominant at node {node}")]
    NotDiagonallyDominant { node: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed data: {0}")]
    Format(String),
}

impl Error {
    /// True for failures that arise while computing, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DivisionByZero
                | Error::SqrtOfNegative(_)
                | Error::NonFinite
                | Error::Cfl { .. }
                | Error::NotDiagonallyDominant { .. }
                | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
