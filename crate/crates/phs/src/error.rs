//! Errors of the std layer: everything the core can raise plus IO and
//! file-format failures.

use std::path::PathBuf;

use phs_core::retrieval::Fingerprint;

#[derive(Debug, thiserror::Error)]
pub enum PhsError {
    #[error(transparent)]
    Core(#[from] phs_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("store built with model {found:?}, loaded model is {expected:?}")]
    FingerprintMismatch {
        expected: Fingerprint,
        found: Fingerprint,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image decode: {0}")]
    Image(String),
    #[error("{0}")]
    Usage(String),
    #[error("index build failed for: {}", .0.join(", "))]
    Build(Vec<String>),
}

impl PhsError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            PhsError::Core(e) => e.code(),
            PhsError::Io { .. } => "io_error",
            PhsError::Format(_) => "format_error",
            PhsError::FingerprintMismatch { .. } => "fingerprint_mismatch",
            PhsError::Json(_) | PhsError::Usage(_) => "bad_param",
            PhsError::Image(_) => "format_error",
            PhsError::Build(_) => "io_error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PhsError::Io {
            path: path.into(),
            source,
        }
    }

    /// `{"error": code, "message": text}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.code(), "message": self.to_string() })
    }
}

pub type Result<T, E = PhsError> = std::result::Result<T, E>;
