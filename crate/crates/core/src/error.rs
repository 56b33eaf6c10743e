//! Crate-wide error type.
//!
//! Validation-style errors (bad inputs, bad config, degenerate data)
//! are distinguished from runtime errors (I/O, corrupt files, diverged
//! numerics) so callers can map them to distinct exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    #[error("validation: {0}")]
    Validation(String),

    /// Inputs were structurally legal but degenerate (e.g. all
    /// waypoints identical after deduplication).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Depth must be strictly positive to unproject a pixel.
    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),

    /// An operation was called in the wrong lifecycle state (backward
    /// without a fresh recording, fine-tuning a non-pretrained
    /// checkpoint, ...).
    #[error("state: {0}")]
    State(String),

    /// The ancestral sampler produced a non-finite intermediate.
    #[error("diffusion sampler diverged at step {step}")]
    DivergedSampler { step: usize },

    /// No task-feasible scene could be produced.
    #[error("infeasible scene: {0}")]
    Infeasible(String),

    /// Dataset construction produced no samples.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// A persisted container failed validation. `position` names the
    /// first violating section (file section, line, or byte offset).
    #[error("corrupt file {path}: {kind} at {position}")]
    Corrupt {
        path: String,
        kind: CorruptKind,
        position: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// What kind of violation a reader found first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptKind {
    VersionMismatch,
    Truncated,
    ChecksumMismatch,
    Malformed,
}

impl std::fmt::Display for CorruptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CorruptKind::VersionMismatch => write!(f, "version mismatch"),
            CorruptKind::Truncated => write!(f, "truncated"),
            CorruptKind::ChecksumMismatch => write!(f, "checksum mismatch"),
            CorruptKind::Malformed => write!(f, "malformed record"),
        }
    }
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate bad inputs rather than a failure
    /// while doing otherwise-valid work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::DegenerateInput(_)
                | Error::InvalidDepth(_)
                | Error::EmptyDataset(_)
        )
    }
}
