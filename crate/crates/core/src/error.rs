use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("unknown fusion strategy `{0}`")]
    UnknownStrategy(String),

    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),

    #[error("unknown question kind `{0}`")]
    UnknownQuestionKind(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (sample indices {samples:?}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        samples: Vec<usize>,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
