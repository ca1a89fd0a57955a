use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DemoError>;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("state error: {0}")]
    State(String),

    #[error("export error: {0}")]
    Export(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite loss at step {step} (batch seed {batch_seed}): {detail}")]
    NonFiniteLoss {
        step: usize,
        batch_seed: u64,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DemoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DemoError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DemoError::Config(_) | DemoError::Parse { .. } => 2,
            DemoError::Ingestion(_) | DemoError::Io { .. } => 3,
            DemoError::Checkpoint(_) => 5,
            _ => 4,
        }
    }
}
