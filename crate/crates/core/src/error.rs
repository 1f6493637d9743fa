use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can surface.
///
/// Variants are grouped by how an operator should react: input and
/// configuration problems (exit code 2) versus runtime and backend failures
/// (exit code 1). See [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {source_name}: field `{field}`: {message}")]
    Format {
        source_name: String,
        field: String,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("shape error: expected dimension {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("could not parse structured response: {raw:?}")]
    Parse { raw: String },

    #[error("backend `{backend}` failed after {} attempt(s): {}", attempts.len(), attempts.join(" | "))]
    Backend { backend: String, attempts: Vec<String> },

    #[error("coverage error: missing {}", missing.join(", "))]
    Coverage { missing: Vec<String> },

    #[error("completeness error: missing {}", missing.join(", "))]
    Completeness { missing: Vec<String> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("partial run: {completed} of {total} tasks finished; rerun to resume ({cause})")]
    PartialRun {
        completed: usize,
        total: usize,
        cause: String,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(source_name: impl Into<String>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            source_name: source_name.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn backend(backend: impl Into<String>, attempt: impl Into<String>) -> Self {
        Error::Backend {
            backend: backend.into(),
            attempts: vec![attempt.into()],
        }
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend { .. })
    }

    /// Process exit code: 2 for configuration or input errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. }
            | Error::Integrity(_)
            | Error::Io { .. }
            | Error::Config(_)
            | Error::Coverage { .. }
            | Error::Completeness { .. } => 2,
            Error::Lookup(_)
            | Error::Shape { .. }
            | Error::Parse { .. }
            | Error::Backend { .. }
            | Error::Precondition(_)
            | Error::PartialRun { .. } => 1,
        }
    }
}
