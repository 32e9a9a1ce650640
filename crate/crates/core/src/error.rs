use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("partition error: sizes sum to {sum}, tensor has {channels} channels")]
    Partition { sum: usize, channels: usize },

    #[error("tape error: unknown node {id} (tape holds {len} nodes)")]
    UnknownNode { id: usize, len: usize },

    #[error("invalid configuration: `{field}` {reason}")]
    Config { field: String, reason: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("support of {group} touches the input border ({height}x{width}); enlarge the input")]
    SupportClipped {
        group: String,
        height: usize,
        width: usize,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
