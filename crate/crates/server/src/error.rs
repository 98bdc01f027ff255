use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{message}")]
    BadRequest { message: String, valid: Option<Vec<String>> },
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn bad(message: impl Into<String>) -> Self {
        ApiError::BadRequest { message: message.into(), valid: None }
    }

    /// A 400 that lists the values the parameter accepts.
    pub fn invalid<S: ToString>(param: &str, got: &str, valid: impl IntoIterator<Item = S>) -> Self {
        ApiError::BadRequest {
            message: format!("invalid {param} {got:?}"),
            valid: Some(valid.into_iter().map(|v| v.to_string()).collect()),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<qkatlas_core::Error> for ApiError {
    fn from(e: qkatlas_core::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    valid: Option<&'a [String]>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let valid = match &self {
            ApiError::BadRequest { valid, .. } => valid.as_deref(),
            _ => None,
        };
        let body = ErrorBody { error: self.to_string(), valid };
        (self.status(), Json(body)).into_response()
    }
}
