use std::path::PathBuf;

use crate::model::Stage;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("diverged at {phase} iteration {iteration}, step {step}")]
    Divergence {
        phase: &'static str,
        iteration: usize,
        step: usize,
        /// Parameters before the failing update, when the caller has them.
        last_state: Option<Box<crate::model::ParamSet>>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mask/parameter alignment error: {0}")]
    Alignment(String),

    #[error("pipeline order error: expected stage {expected}, found {found}")]
    PipelineOrder { expected: String, found: Stage },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("config hash mismatch: checkpoint {checkpoint}, current {current}")]
    HashMismatch { checkpoint: String, current: String },

    #[error("malformed checkpoint: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Usage(_)
            | Error::Alignment(_)
            | Error::PipelineOrder { .. }
            | Error::HashMismatch { .. } => 1,
            Error::Dimension { .. } | Error::Label { .. } | Error::NonFinite { .. } | Error::Divergence { .. } => 2,
            Error::Io { .. } | Error::VersionMismatch { .. } | Error::Truncated { .. } | Error::Format(_) => 3,
        }
    }
}
