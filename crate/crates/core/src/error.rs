use std::path::PathBuf;

/// Errors surfaced by the lab.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// A configuration value is out of its valid range.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A task prompt could not be parsed back into a problem.
    #[error("malformed instance: {0}")]
    MalformedInstance(String),
    /// A dataset or checkpoint file is structurally broken.
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),
    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    /// Training produced a NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// True for errors that stem from bad user input rather than a runtime
    /// failure. The CLI maps these to exit status 2.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            LabError::Config(_) | LabError::VocabMismatch { .. } | LabError::Version { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
