use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("invalid record `{clip_id}`: {message}")]
    InvalidRecord { clip_id: String, message: String },

    #[error("missing frames for `{clip_id}` at {path}")]
    MissingFrames { clip_id: String, path: PathBuf },

    #[error("tensor container: {0}")]
    Container(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("flow estimation: {0}")]
    Flow(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("subject leakage: clip `{clip_id}` of held-out subject `{subject}` reached training")]
    Leakage { clip_id: String, subject: String },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
