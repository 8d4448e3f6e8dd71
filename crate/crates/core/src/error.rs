use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants map one-to-one onto the CLI exit codes: validation problems
/// exit with 2, integrity problems with 3, numeric failures with 4.
#[derive(Debug, Error)]
pub enum KpeError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration failed at step {step}: {reason}")]
    Integration { step: usize, reason: String },

    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<KpeError>,
    },

    #[error("schema version mismatch: {0}")]
    Schema(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl KpeError {
    pub fn validation(msg: impl Into<String>) -> Self {
        KpeError::Validation(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        KpeError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            KpeError::Validation(_) | KpeError::Parse(_) | KpeError::Schema(_) => 2,
            KpeError::Io { .. } => 2,
            KpeError::Integrity(_) => 3,
            KpeError::Domain(_) | KpeError::Integration { .. } | KpeError::Training { .. } => 4,
            KpeError::Trajectory { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T, E = KpeError> = std::result::Result<T, E>;
