//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration or usage (maps to exit code 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape violates a contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Frame ingestion failed (missing/duplicate/undecodable frames).
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// Hiding schedule cannot be satisfied.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Degenerate or invalid channel signal.
    #[error("channel error: {0}")]
    Channel(String),

    /// Checkpoint container is malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Runtime failure during training or evaluation (maps to exit code 3).
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code for the CLI: 2 for config/usage problems, 3 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Schedule(_) => 2,
            _ => 3,
        }
    }
}
