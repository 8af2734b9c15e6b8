//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named op.
    #[error("shape mismatch in `{op}`: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// An index (token id, class id, node id) is out of range.
    #[error("{what} out of range: got {got}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    /// A numeric argument violates its domain (nonpositive probability,
    /// zero-variance samples, budget outside (0, 100], ...).
    #[error("invalid value for {what}: {details}")]
    InvalidValue { what: &'static str, details: String },

    /// Training produced a non-finite loss or weight.
    #[error("non-finite number during {context}: {details}")]
    NonFinite { context: &'static str, details: String },

    /// A run-level configuration problem (exit code 2 territory).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion rejected one or more lines.
    #[error("malformed dataset {path}: {details}")]
    Ingest { path: String, details: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// One or more seeds of an experiment failed.
    #[error("run failure: {0}")]
    Run(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code per the CLI contract: 2 for configuration problems,
    /// 1 for everything else that aborts a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidValue { .. } => 2,
            _ => 1,
        }
    }
}
