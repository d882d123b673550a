use std::path::PathBuf;

/// Errors raised by the library. The CLI maps these onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape { context: String, expected: Vec<usize>, actual: Vec<usize> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("occurrence regularizer needs region masks; its weight must be 0 when masks are absent")]
    MasksAbsent,

    #[error("non-finite loss part `{part}` ({value})")]
    NonFinite { part: String, value: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("pretrained weights: tensor `{name}` {reason}")]
    Pretrained { name: String, reason: String },

    #[error("video decode failed for {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Npz(#[from] NpzError),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Wrapper so that the npz reader/writer error types share one variant.
#[derive(Debug, thiserror::Error)]
#[error("npz: {0}")]
pub struct NpzError(pub String);

impl From<ndarray_npy::ReadNpzError> for Error {
    fn from(e: ndarray_npy::ReadNpzError) -> Self {
        Error::Npz(NpzError(e.to_string()))
    }
}

impl From<ndarray_npy::WriteNpzError> for Error {
    fn from(e: ndarray_npy::WriteNpzError) -> Self {
        Error::Npz(NpzError(e.to_string()))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
