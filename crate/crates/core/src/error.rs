use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch: file is corrupt")]
    Checksum,

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("non-finite loss at step {step} (seed {seed}): {detail}")]
    NonFinite { step: u64, seed: u64, detail: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("dataset validation failed with {} problem(s):\n{}", .0.len(), .0.join("\n"))]
    Dataset(Vec<String>),

    #[error("benchmark lock {0} is held by another run")]
    Locked(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
