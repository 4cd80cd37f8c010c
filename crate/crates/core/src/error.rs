use thiserror::Error;

/// Errors surfaced by every engine in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("quadrature dimension {0} exceeds the tensor-product ceiling of {max}; use Monte Carlo", max = crate::hermite::MAX_TENSOR_DIM)]
    DimensionTooLarge(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot parse target spec {spec:?} at byte {pos}: {msg}")]
    Parse { spec: String, pos: usize, msg: String },

    #[error("no Hermite coefficient above {tol:e} up to degree {max_j}")]
    NotFound { max_j: usize, tol: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for failures caused by the numbers rather than by the input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
