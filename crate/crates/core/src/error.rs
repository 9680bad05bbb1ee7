//! Error codes shared by every module.
//!
//! Each failure carries a stable kebab-case [`ErrorCode`]. The HTTP layer maps
//! codes to status lines but always echoes the code itself, so no information
//! is lost at the service boundary.

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::prelude::*;

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! error_codes {
    ($($variant:ident => $text:literal),+ $(,)?) => {
        /// Stable identifiers for every failure the engine can report.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum ErrorCode {
            $(
                #[serde(rename = $text)]
                $variant,
            )+
        }

        impl ErrorCode {
            pub const ALL: &'static [ErrorCode] = &[$(ErrorCode::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(ErrorCode::$variant => $text,)+
                }
            }

            pub fn parse(text: &str) -> Option<ErrorCode> {
                match text {
                    $($text => Some(ErrorCode::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

error_codes! {
    InvalidArgument => "invalid-argument",
    SkillNotFound => "skill-not-found",
    ParseError => "parse-error",
    LayerInvalid => "layer-invalid",
    InvalidProvenance => "invalid-provenance",
    NotFound => "not-found",
    ProvenanceImmutable => "provenance-immutable",
    StorageError => "storage-error",
    CompressionError => "compression-error",
    DependencyUnsatisfied => "dependency-unsatisfied",
    GraphInvalid => "graph-invalid",
    BudgetExceeded => "budget-exceeded",
    CassetteMiss => "cassette-miss",
    BackendUnavailable => "backend-unavailable",
    ConfigurationError => "configuration-error",
    ToolNotFound => "tool-not-found",
    InvalidArguments => "invalid-arguments",
    ToolForbidden => "tool-forbidden",
    ToolUnavailable => "tool-unavailable",
    SectionFailed => "section-failed",
    StateCorrupt => "state-corrupt",
    SequentialViolation => "sequential-violation",
    UnsupportedMedia => "unsupported-media",
    AssessmentIncomplete => "assessment-incomplete",
    ValidationFailed => "validation-failed",
}

impl ErrorCode {
    /// Transient failures the caller may retry unchanged.
    pub fn is_retryable(self) -> bool {
        matches!(self, ErrorCode::ToolUnavailable | ErrorCode::BackendUnavailable)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A coded failure.
///
/// `cause` holds the underlying code when one failure wraps another, e.g. a
/// `section-failed` error whose cause is `hallucinated-citation` or
/// `budget-exceeded`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub struct Error {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.cause {
            Some(cause) => write!(f, "{} ({}): {}", self.code, cause, self.message),
            None => write!(f, "{}: {}", self.code, self.message),
        }
    }
}

impl Error {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Error { code, message: message.into(), cause: None }
    }

    pub fn with_cause(mut self, cause: impl Into<String>) -> Self {
        self.cause = Some(cause.into());
        self
    }

    /// The most specific code available: the cause when present, else the code.
    pub fn specific_code(&self) -> &str {
        self.cause.as_deref().unwrap_or(self.code.as_str())
    }

    pub fn invalid_argument(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InvalidArgument, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn storage(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::StorageError, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ConfigurationError, message)
    }

    pub fn tool_unavailable(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ToolUnavailable, message)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::new(ErrorCode::ParseError, err.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip_through_text() {
        for code in ErrorCode::ALL {
            assert_eq!(ErrorCode::parse(code.as_str()), Some(*code));
            let json = serde_json::to_string(code).unwrap();
            assert_eq!(json, format!("\"{}\"", code.as_str()));
        }
    }

    #[test]
    fn codes_are_distinct() {
        let texts: BTreeSet<&str> = ErrorCode::ALL.iter().map(|c| c.as_str()).collect();
        assert_eq!(texts.len(), ErrorCode::ALL.len());
    }

    #[test]
    fn display_includes_cause() {
        let err = Error::new(ErrorCode::SectionFailed, "genetic").with_cause("budget-exceeded");
        assert_eq!(err.to_string(), "section-failed (budget-exceeded): genetic");
        assert_eq!(err.specific_code(), "budget-exceeded");
    }
}
