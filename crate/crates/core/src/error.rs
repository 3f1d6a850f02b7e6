use thiserror::Error;

#[derive(Debug, Error)]
pub enum FairgenError {
    /// Input outside the operation's domain (bad prompt id, empty batch, K < 2, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// Non-finite loss or parameters during training.
    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FairgenError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(FairgenError::Domain(msg.into()))
}
