use std::io;

use thiserror::Error;

/// Errors produced by every module of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at byte offset {offset}: {source}")]
    IoAt {
        offset: u64,
        #[source]
        source: io::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported EBF version {0} (expected 1)")]
    UnsupportedVersion(u8),

    #[error("truncated input: expected at least {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("validation error at line {line}: {message}")]
    Line { line: usize, message: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("conflicting labels for id {id:?}")]
    LabelConflict { id: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("degenerate affinities at row {row}: {message}")]
    DegenerateAffinity { row: usize, message: String },

    #[error("repeat {index}: {source}")]
    Repeat {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed user input or configuration,
    /// as opposed to failures while running a module.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Format(_)
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::Validation(_)
            | Error::Line { .. }
            | Error::Config(_) => true,
            Error::Repeat { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
