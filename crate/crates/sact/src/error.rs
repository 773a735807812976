use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: no such file", path.display())]
    Missing { path: PathBuf },
    #[error("{}: malformed header: {reason}", path.display())]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{}: malformed payload: {reason}", path.display())]
    MalformedData { path: PathBuf, reason: String },
    #[error("clip {clip_id}: appearance stream has {u} frames, motion stream has {v}")]
    StreamMismatch { clip_id: String, u: usize, v: usize },
    #[error("clip id {0:?} cannot be used as a file name")]
    InvalidClipId(String),
    #[error("{}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] sact_core::Error),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> IoError {
    let path = path.into();
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::Missing { path }
        } else {
            IoError::Io { path, source }
        }
    }
}
