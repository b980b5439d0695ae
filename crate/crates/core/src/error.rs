// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the core crate.

use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric kernel, the model, prompt handling, head
/// selection, retrieval, and metric aggregation.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A value that must be finite was NaN or infinite.
    NonFinite(&'static str),
    /// Image or mask geometry is incompatible with the patch grid.
    BadGeometry(String),
    /// A visual prompt cannot be rasterized.
    BadPrompt(String),
    /// The prompt selects no patch token.
    EmptyMask,
    /// A scalar parameter is out of its valid range.
    BadParam(String),
    /// Retrieval over a store without records.
    EmptyStore,
    /// Query-DB selection needs cached attention states the store does not hold.
    MissingCache(String),
    /// An image id is not known to the annotation index.
    UnknownImage(String),
    /// Metric aggregation received no outcomes.
    EmptyEvaluation,
}

impl Error {
    /// Stable machine-readable code used by the CLI and the HTTP service.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::BadGeometry(_) => "bad_geometry",
            Error::BadPrompt(_) => "bad_prompt",
            Error::EmptyMask => "empty_mask",
            Error::BadParam(_) => "bad_param",
            Error::EmptyStore => "empty_store",
            Error::MissingCache(_) => "missing_cache",
            Error::UnknownImage(_) => "unknown_image",
            Error::EmptyEvaluation => "empty_evaluation",
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                context,
                expected,
                actual,
            } => write!(
                f,
                "dimension mismatch in {context}: expected {expected}, got {actual}"
            ),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::BadGeometry(msg) => write!(f, "bad geometry: {msg}"),
            Error::BadPrompt(msg) => write!(f, "bad prompt: {msg}"),
            Error::EmptyMask => f.write_str("prompt selects no patch token"),
            Error::BadParam(msg) => write!(f, "bad parameter: {msg}"),
            Error::EmptyStore => f.write_str("feature store is empty"),
            Error::MissingCache(id) => {
                write!(f, "record {id:?} has no cached attention state")
            }
            Error::UnknownImage(id) => write!(f, "unknown image {id:?}"),
            Error::EmptyEvaluation => f.write_str("no outcomes to aggregate"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;
