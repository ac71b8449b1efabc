use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EigError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("forward model returned a non-finite value at theta={theta:?}, phi={phi:?}")]
    NonFiniteForward { theta: Vec<f64>, phi: Vec<f64> },

    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: &'static str },

    #[error("{what} did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        grad_norm: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("allocation infeasible: {0}")]
    Infeasible(String),

    #[error("{skipped} of {total} outer samples were degenerate")]
    TooManyDegenerate { skipped: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, EigError>;
