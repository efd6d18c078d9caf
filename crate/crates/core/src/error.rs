use std::path::PathBuf;

use crate::tensorlab::TensorError;

pub type Result<T, E = DcfmError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DcfmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing predictions for: {}", .0.join(", "))]
    MissingPairs(Vec<String>),
    #[error("{0} self-test suite(s) failed")]
    SelfTest(usize),
}

impl DcfmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DcfmError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        DcfmError::Format { path: path.into(), reason: reason.into() }
    }

    /// Usage errors exit with 1, runtime failures with 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            DcfmError::Config(_) => 1,
            _ => 2,
        }
    }
}
