//! Crate error type.

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// The CLI maps these onto its exit-code contract: [`Error::Io`] and
/// [`Error::Format`] are I/O failures (exit 3), [`Error::RankDeficient`] and
/// [`Error::NonFinite`] are numeric failures (exit 4), everything else is a
/// usage error (exit 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("empty aperture: disk lies entirely outside the image")]
    EmptyAperture,

    #[error("infeasible phantom placement: {0}")]
    InfeasiblePlacement(String),

    #[error("rank deficient; increase lambda or use truncated_svd")]
    RankDeficient,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("file format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
