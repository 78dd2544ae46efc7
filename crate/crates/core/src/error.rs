use thiserror::Error;

/// Errors shared by all modules in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix expected to be positive semidefinite could not be factored,
    /// even after diagonal jitter.
    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),

    /// A covariance or precision matrix required to be invertible was not.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// An argument violated a precondition.
    #[error("bad parameter: {0}")]
    BadParam(String),

    /// An iterative solver exhausted its iteration budget.
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),

    /// An iterate left the finite floating-point range. Surfaced, not masked:
    /// the score-guided baseline is expected to fail this way on long runs.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file had the wrong structure or version.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
