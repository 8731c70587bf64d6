use thiserror::Error;

/// Errors raised by estimation, simulation and analytics routines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("negative outcome {value} at row {row}")]
    NegativeOutcome { row: usize, value: f64 },

    #[error("non-finite value at row {row}, column {column}")]
    NonFiniteCovariate { row: usize, column: usize },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("non-finite parameter vector {theta:?}")]
    NonFiniteParameter { theta: Vec<f64> },

    #[error("estimating equations are not finite at theta = {theta:?}")]
    NonFiniteEvaluation { theta: Vec<f64> },

    #[error("exponential overflow at draw {index}")]
    Overflow { index: usize },

    #[error("design matrix is rank deficient (singular value ratio {ratio:e}); null-space direction {direction:?}")]
    RankDeficient { ratio: f64, direction: Vec<f64> },

    #[error("singular {context} (condition number {condition:e})")]
    Singular { context: &'static str, condition: f64 },

    #[error("{context} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        context: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("{failed} of {total} resampled fits failed to converge")]
    ExcessiveFailures { failed: usize, total: usize },

    #[error("every candidate kappa failed to fit")]
    AllCandidatesFailed,
}

pub type Result<T> = std::result::Result<T, Error>;
