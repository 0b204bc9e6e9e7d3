use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value lies outside the declared support: {0}")]
    OffSupport(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("zero-probability event: {0}")]
    ZeroProbability(String),

    #[error("rejection sampler exhausted after {0} attempts")]
    RejectionExhausted(usize),

    #[error("loss node is not a scalar (shape {rows}x{cols})")]
    NotScalar { rows: usize, cols: usize },

    #[error("tape replay mismatch at node {0}")]
    ReplayMismatch(usize),

    #[error("loss function is not deterministic: {0} != {1}")]
    NonDeterministic(f64, f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
