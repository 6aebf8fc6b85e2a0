use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: String, index: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Wraps the error with the sampling step it occurred at.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::NonFinite { what, index } => Error::NonFinite {
                what: format!("{what} (sampling step {step})"),
                index,
            },
            Error::Numeric(m) => Error::Numeric(format!("sampling step {step}: {m}")),
            Error::Parameter(m) => Error::Parameter(format!("sampling step {step}: {m}")),
            Error::Contract(m) => Error::Contract(format!("sampling step {step}: {m}")),
            other => other,
        }
    }
}
