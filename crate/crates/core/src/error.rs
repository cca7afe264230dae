use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("{solver} did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    Convergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("dense eigensolver failed: {0}")]
    Eigen(String),

    #[error("negative eigenvalue {0:.3e} where a nonnegative one was expected")]
    NegativeEigenvalue(f64),

    #[error("dense oracle refused: dimension {dim} exceeds cap {cap}")]
    OracleCap { dim: usize, cap: usize },
}

impl Error {
    pub(crate) fn mismatch(expected: (usize, usize), got: (usize, usize)) -> Self {
        Error::DimensionMismatch { expected, got }
    }
}
