use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("incompatible masks: {0}x{1} vs {2}x{3}")]
    IncompatibleMask(u32, u32, u32, u32),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("invalid mask encoding: {0}")]
    MaskEncoding(String),

    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("record {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("quota shortfall: {0}")]
    Quota(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("backend error: {0}")]
    Backend(#[from] crate::agent::BackendError),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
