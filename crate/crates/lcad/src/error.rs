use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("scene generation: {0}")]
    Generation(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("missing prerequisite checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("text: {0}")]
    Text(String),
}

impl Error {
    pub fn io(path: &Path, message: impl ToString) -> Self {
        Error::Io { path: path.display().to_string(), message: message.to_string() }
    }

    /// Errors that come from bad user input / configuration rather than a
    /// runtime failure; the CLI maps these to exit status 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Validation(_))
    }
}

impl From<lcad_grad::store::StoreError> for Error {
    fn from(e: lcad_grad::store::StoreError) -> Self {
        Error::Checkpoint(e.to_string())
    }
}
