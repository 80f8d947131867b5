use std::path::PathBuf;

/// Errors surfaced by the engine.
///
/// Execution failures of candidate SQL are not errors; they are reported
/// inside [`crate::executor::ExecutionOutcome`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("transport error after {retries} retries: {message}")]
    Transport { retries: u32, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("script exhausted after {consumed} responses")]
    ScriptExhausted { consumed: usize },
    #[error("database error: {0}")]
    Database(#[from] rusqlite::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
