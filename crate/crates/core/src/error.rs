use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("padding frame at slot {slot} carries nonzero pixels")]
    PadInconsistency { slot: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("video `{0}` not found")]
    MissingVideo(String),

    #[error("video `{video}` has {count} annotated frames, expected {expected}")]
    AnnotationCount {
        video: String,
        count: usize,
        expected: usize,
    },

    #[error("video `{video}`: {frames} frames but {masks} masks")]
    FrameCountMismatch {
        video: String,
        frames: usize,
        masks: usize,
    },

    #[error("source frame {frame} appears at more than one clip slot")]
    IndexAlignment { frame: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
