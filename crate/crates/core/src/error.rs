use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("missing directory: {}", .0.display())]
    MissingDirectory(PathBuf),

    #[error("no image/mask pairs found in {}", .0.display())]
    EmptyDataset(PathBuf),

    #[error("unmatched files in {}: {}", .dir.display(), .orphans.join(", "))]
    Orphans { dir: PathBuf, orphans: Vec<String> },

    #[error("{dataset}: expected at least {expected} records, found {found}")]
    Cardinality {
        dataset: String,
        expected: usize,
        found: usize,
    },

    #[error("cannot decode image {}: {reason}", .path.display())]
    Decode { path: PathBuf, reason: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("non-finite loss at step {step} (epoch {epoch}); last good checkpoint: {last_good}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        last_good: String,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image encode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
