use std::path::PathBuf;

/// Error type shared across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum UkieError {
    /// Bad or inconsistent configuration (unknown dataset name, invalid
    /// layout, weight out of range, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A dataset file was missing or unreadable.
    #[error("ingestion error at {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// Tensor shape did not match what an operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A loss or parameter became non-finite during training.
    #[error("numeric abort: {0}")]
    Numeric(String),

    /// Semantic-memory lookup for a class that was never stored.
    #[error("cold start: class {0} has no prototype in semantic memory")]
    ColdStart(usize),

    /// A checkpoint, report or other run artifact was not found.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UkieError>;
