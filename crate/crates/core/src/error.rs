use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched layouts, shapes, or an engine invariant broken by the caller.
    #[error("structural error: {0}")]
    Structural(String),

    /// A gradient or parameter update produced a non-finite value.
    #[error("adaptation step failed: {0}")]
    AdaptationStep(String),

    /// Invalid caller input (out-of-bounds click, bad image size, empty list).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The click protocol was asked to act on a finished sample.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed model file.
    #[error("model format error: {0}")]
    Format(String),

    #[error("dataset error in {}: {message}", path.display())]
    Dataset { path: PathBuf, message: String },

    #[error("pretraining diverged at epoch {epoch}: {message}")]
    Pretrain { epoch: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
