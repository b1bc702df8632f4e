use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A required column is absent from the input header.
    #[error("schema error: missing column \"{0}\"")]
    Schema(String),

    /// A malformed row; `row` is 1-based and counts data rows (header excluded).
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("cell table error: {0}")]
    CellTable(String),

    #[error("model spec error: {0}")]
    Spec(String),

    #[error("index error: {0}")]
    Index(String),

    /// Inputs with inconsistent dimensions or mismatched layouts.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("optimization failed: {message}")]
    Optimization { message: String, trace: Vec<f64> },

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("query error: {0}")]
    Query(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("staging error: {0}")]
    Staging(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    /// An error raised inside a pipeline stage, tagged with the stage name.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
