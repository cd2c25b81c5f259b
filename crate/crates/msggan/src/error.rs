//! Error vocabulary shared across the crate.

/// All fallible operations in this crate return this error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Configuration that can never describe a valid experiment.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// A call violated an operation's preconditions at runtime.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A loss or parameter became non-finite during training.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    /// Numerical routine left its supported regime (e.g. covariance far from
    /// positive semi-definite).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Checkpoint exists but cannot be used by this build.
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
