use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("framing error: view {view} touches the image border (apparent size too large)")]
    Framing { view: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("truncated or malformed file: {0}")]
    Truncated(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("dataset schema error in {file}: field `{field}`: {msg}")]
    Schema { file: PathBuf, field: String, msg: String },

    #[error("instance cannot be posed: empty scene cloud and empty mask")]
    Unposeable,

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
