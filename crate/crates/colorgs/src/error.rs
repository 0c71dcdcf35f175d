use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the engine. Validation problems (bad config, bad
/// dataset) are distinguished from runtime failures (numeric blow-up) so the
/// CLI can map them to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter on primitive {primitive}: {detail}")]
    InvalidParameter { primitive: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error at {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("render error at pixel ({x}, {y}) primitive {primitive}: {detail}")]
    Render {
        x: usize,
        y: usize,
        primitive: usize,
        detail: String,
    },

    #[error("non-finite gradient for primitive {primitive} in {field}")]
    NonFiniteGradient { primitive: usize, field: String },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    /// True when the error is a user-input problem rather than an engine
    /// failure. Drives the CLI exit code (1 vs 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Dataset { .. } | Error::Format { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
