use serde::{Deserialize, Serialize};

/// Machine-readable error code carried by every failed API call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    BadRequest,
    ShapeMismatch,
    Busy,
    NotFound,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadRequest => "bad-request",
            ErrorCode::ShapeMismatch => "shape-mismatch",
            ErrorCode::Busy => "busy",
            ErrorCode::NotFound => "not-found",
            ErrorCode::Internal => "internal",
        }
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn shape_mismatch(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ShapeMismatch, message)
    }

    pub fn busy(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Busy, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }
}

impl From<sdedit_core::Error> for ApiError {
    fn from(e: sdedit_core::Error) -> Self {
        use sdedit_core::Error as E;
        let code = match &e {
            E::ShapeMismatch { .. } => ErrorCode::ShapeMismatch,
            E::Domain { .. } | E::InvalidParameter(_) | E::Format(_) | E::Protocol(_) | E::Resolution(_) => {
                ErrorCode::BadRequest
            }
            E::UnknownPreset(_) => ErrorCode::NotFound,
            _ => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
