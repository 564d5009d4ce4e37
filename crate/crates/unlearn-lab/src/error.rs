//! Error type for the IO and orchestration layer, with process exit codes.

use std::path::PathBuf;

use thiserror::Error;
use unlearn_core::CoreError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("load error at {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unsupported checkpoint version {found}, this build reads version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("store integrity error: {0}")]
    StoreIntegrity(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Core(CoreError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 diverged, 4 store integrity, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Core(CoreError::Config(_)) => 2,
            LabError::Diverged(_) | LabError::Core(CoreError::Diverged(_)) => 3,
            LabError::StoreIntegrity(_)
            | LabError::Corrupt { .. }
            | LabError::UnsupportedVersion { .. } => 4,
            _ => 1,
        }
    }
}

impl From<CoreError> for LabError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Diverged(m) => LabError::Diverged(m),
            other => LabError::Core(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
