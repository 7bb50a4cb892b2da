//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI reports them: usage and config
//! problems, file problems, data validation problems, and numeric faults.
//! `exit_code` defines the mapping used by the `sounder` binary.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("sequence too short: {utterance} has {got} frames, front-end needs at least {min}")]
    SequenceTooShort {
        utterance: String,
        got: usize,
        min: usize,
    },

    #[error("sequence too long: {utterance} needs {got} positions but the encoder allows {max}")]
    SequenceTooLong {
        utterance: String,
        got: usize,
        max: usize,
    },

    #[error("word error rate undefined: reference transcript is empty")]
    UndefinedWer,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    #[error("id coverage mismatch: {context} is missing {}", missing.join(", "))]
    MissingIds {
        context: String,
        missing: Vec<String>,
    },

    #[error("fingerprint mismatch: index was built by {index}, model is {model}")]
    FingerprintMismatch { index: String, model: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI; the table is documented in the README.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Dim(_)
            | Error::EmptyInput(_)
            | Error::SequenceTooShort { .. }
            | Error::SequenceTooLong { .. }
            | Error::UndefinedWer
            | Error::MissingIds { .. } => 4,
            Error::NonFinite(_) | Error::Diverged { .. } => 5,
            Error::FingerprintMismatch { .. } => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
