use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: row {row}, column '{column}': cannot parse '{value}' as a finite number", path.display())]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("column '{0}' not found")]
    MissingColumn(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("need at least {required} rows, got {actual}")]
    TooFewRows { required: usize, actual: usize },

    #[error("normal equations are singular even after ridge fallback")]
    Singular,

    #[error("model file: {0}")]
    Artifact(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Errors caused by bad user input (as opposed to a failure while running).
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Singular | Error::Write { .. })
    }
}
