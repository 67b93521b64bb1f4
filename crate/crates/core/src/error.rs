use thiserror::Error;

/// Error type shared across the crate.
///
/// The CLI maps variants onto exit codes: invariant violations exit 1,
/// configuration and I/O problems exit 2.
#[derive(Debug, Error)]
pub enum UmcError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("fully masked attention row {row}: every key position is masked")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },

    #[error("invalid argument for {what}: {detail}")]
    InvalidArgument { what: &'static str, detail: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl UmcError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        UmcError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn non_finite(context: &'static str, detail: impl Into<String>) -> Self {
        UmcError::NonFinite { context, detail: detail.into() }
    }

    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        UmcError::InvalidArgument { what, detail: detail.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        UmcError::Io { path: path.into(), source }
    }

    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            UmcError::Config(_) | UmcError::Io { .. } | UmcError::Checkpoint(_) => 2,
            _ => 1,
        }
    }
}
