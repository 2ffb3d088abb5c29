use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unbalanced structure: {message} at position {position}")]
    Balance { position: usize, message: &'static str },

    #[error("illegal character {found:?} at position {position} (expected one of {expected})")]
    Alphabet {
        position: usize,
        found: char,
        expected: &'static str,
    },

    #[error("record {id}: {message}")]
    Record { id: String, message: String },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("config error in [{section}] {key}: {message}")]
    Config {
        section: String,
        key: String,
        message: String,
    },

    #[error("{0}")]
    Usage(String),

    #[error("bad checkpoint header")]
    BadCheckpointHeader,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("modality absent: {0}")]
    ModalityAbsent(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(section: &str, key: &str, message: impl Into<String>) -> Self {
        Error::Config {
            section: section.to_string(),
            key: key.to_string(),
            message: message.into(),
        }
    }

    /// Usage/validation problems map to 1, runtime or numeric failures to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_)
            | Error::Config { .. }
            | Error::Spec(_)
            | Error::ModalityAbsent(_) => 1,
            _ => 2,
        }
    }
}
