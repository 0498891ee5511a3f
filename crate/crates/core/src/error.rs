use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed text file (roll, label, index, offset or checkpoint).
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("MIDI parse error at byte {offset}: {message}")]
    Midi { offset: usize, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("label error: {0}")]
    Labels(String),

    #[error("empty performance: no notes after quantization")]
    EmptyPerformance,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
