use std::path::PathBuf;

use thiserror::Error;

/// Reasons a checkpoint file is rejected on load.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found:?} (expected {expected:?})")]
    Version { found: char, expected: char },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("length mismatch: shape wants {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("probability row {row} sums to {sum}, expected 1")]
    NotNormalized { row: usize, sum: f64 },

    #[error("backward called without a cached forward pass")]
    NoForwardCache,

    #[error("parameter {0} has no gradient; run a backward pass before stepping")]
    MissingGradient(usize),

    #[error("image decode failed: {0}")]
    Decode(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_file(path: impl Into<PathBuf>, err: Error) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(err),
        }
    }

    /// True for failures caused by input files rather than by the computation.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Decode(_)
            | Error::Dataset(_)
            | Error::Io { .. }
            | Error::Checkpoint(_)
            | Error::LabelOutOfRange { .. }
            | Error::File { .. } => true,
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
