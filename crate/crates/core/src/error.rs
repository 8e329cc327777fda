use std::path::PathBuf;

use crate::losses::LossReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("registry entry {attribute}/{value} is empty")]
    NotReady { attribute: String, value: String },

    #[error("training diverged at iteration {iteration} on value {value_key}: {report:?}")]
    Divergence {
        iteration: u64,
        value_key: usize,
        report: LossReport,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation void: {0}")]
    EvaluationVoid(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than by a failure at run time.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Lookup(_)
                | Error::Shape(_)
                | Error::MalformedRecord { .. }
                | Error::SchemaMismatch(_)
        )
    }
}
