use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's preconditions.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A data file could not be ingested.
    #[error("ingestion error at row {row}, column {col}: {msg}")]
    Ingestion { row: usize, col: usize, msg: String },

    /// A numeric computation produced non-finite values or underflowed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An experiment configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was requested outside its supported regime.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}
