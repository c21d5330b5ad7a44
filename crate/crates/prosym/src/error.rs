use thiserror::Error;

/// Errors surfaced by fallible operations across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-facing precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Input is numerically degenerate (e.g. rank-deficient Gram-Schmidt pivot).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// An oracle or generator refused an input above its size cap.
    #[error("refused: {0}")]
    Refused(String),
    /// Training produced non-finite values.
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed data: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
