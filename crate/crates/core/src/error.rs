use thiserror::Error;

/// Errors raised by the solvers, the splitting, and the analytic layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuenchError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value at node {index}")]
    NonFinite { index: usize },

    #[error("function is not even-symmetric (node {index})")]
    NotEven { index: usize },

    #[error("quench crossing: step of size {dt:e} drives the solution through zero at node {index}")]
    QuenchCrossing { dt: f64, index: usize },

    #[error("non-positive value {value:e} at node {index}")]
    NonPositive { index: usize, value: f64 },

    #[error("fixed-point iteration is not contracting (residual {previous:e} -> {current:e} at iteration {iteration})")]
    NotContracting {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("outside the contraction regime: t = {t} exceeds the guard {limit}")]
    OutsideContraction { t: f64, limit: f64 },

    #[error("splitting failed (left U_eps0): {0}")]
    SplittingFailed(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("infeasible initial data: {0}")]
    Infeasible(String),

    #[error("solver aborted at t = {t}: {reason}")]
    SolverAbort { t: f64, reason: String },
}

pub type Result<T> = std::result::Result<T, QuenchError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> QuenchError {
    QuenchError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
