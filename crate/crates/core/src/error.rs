use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {0} is not in the class bank")]
    UnknownLabel(u32),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid parameter layout: {0}")]
    Layout(String),
    #[error("non-finite gradient for example {example}")]
    NonFiniteGradient { example: usize },
    #[error("training diverged at step {step} (last good step: {last_good_step:?})")]
    Divergence { step: usize, last_good_step: Option<usize> },
    #[error("could not place {classes} prototypes with separation {separation} in dimension {dim}")]
    InfeasiblePacking {
        classes: usize,
        dim: usize,
        separation: f64,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checksum mismatch in {path}: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { path: PathBuf, stored: u64, computed: u64 },
    #[error("{0} already exists (pass --force to overwrite)")]
    AlreadyExists(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 config, 3 numeric divergence, 4 IO/format, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Divergence { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Autodiff(AutodiffError::NumericOverflow { .. }) => 3,
            Error::Format { .. } | Error::Checksum { .. } | Error::Io { .. } | Error::AlreadyExists(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
