use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("corrupt file {path}: {detail}")]
    CorruptFile { path: PathBuf, detail: String },

    #[error("missing files in {dir}: expected {expected:?}")]
    NotFound { dir: PathBuf, expected: Vec<String> },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint shape mismatch for `{name}`: file has {file:?}, network has {network:?}")]
    CheckpointShape {
        name: String,
        file: Vec<usize>,
        network: Vec<usize>,
    },

    #[error("checkpoint entry `{0}` has no counterpart in the network")]
    CheckpointUnknown(String),

    #[error("decision log coverage: {0}")]
    Coverage(String),

    #[error("training diverged at step {step} (lr {lr}): loss = {loss}")]
    Diverged { step: usize, lr: f64, loss: f64 },

    #[error("phase `{phase}` needs {what} at {path}")]
    MissingPrerequisite {
        phase: &'static str,
        what: &'static str,
        path: PathBuf,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-parsable category, used by the CLI's one-line error report.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::NonFinite { .. } => "non-finite",
            Error::Invariant(_) => "invariant",
            Error::CorruptFile { .. } => "corrupt-file",
            Error::NotFound { .. } => "not-found",
            Error::CheckpointVersion { .. } => "checkpoint-version",
            Error::CheckpointTruncated(_) => "checkpoint-truncated",
            Error::CheckpointShape { .. } => "checkpoint-shape",
            Error::CheckpointUnknown(_) => "checkpoint-unknown",
            Error::Coverage(_) => "coverage",
            Error::Diverged { .. } => "diverged",
            Error::MissingPrerequisite { .. } => "missing-prerequisite",
            Error::Io(_) => "io",
        }
    }
}
