use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use gatedgan::latent::FieldError;
use gatedgan::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid request")]
    Fields(Vec<FieldError>),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    PayloadTooLarge(String),
    #[error("model '{0}' is still loading")]
    Loading(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Fields(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::PayloadTooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ServiceError::Loading(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Core(e) => match e {
                CoreError::InvalidArgument(_) => StatusCode::BAD_REQUEST,
                CoreError::ArchitectureMismatch(_) => StatusCode::CONFLICT,
                CoreError::Format { .. } | CoreError::Image(_) => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ServiceError::Config(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Fields(_) => "invalid_fields",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "architecture_mismatch",
            ServiceError::Unprocessable(_) => "unprocessable",
            ServiceError::PayloadTooLarge(_) => "payload_too_large",
            ServiceError::Loading(_) => "model_loading",
            ServiceError::Core(CoreError::ArchitectureMismatch(_)) => "architecture_mismatch",
            ServiceError::Core(CoreError::NumericFailure(_)) => "numeric_failure",
            ServiceError::Core(CoreError::Format { .. }) => "malformed_archive",
            ServiceError::Core(_) => "error",
            ServiceError::Config(_) | ServiceError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        let mut body = serde_json::json!({
            "error": { "code": self.code(), "message": self.to_string() }
        });
        match &self {
            ServiceError::Fields(f) => body["error"]["fields"] = serde_json::to_value(f).unwrap_or_default(),
            ServiceError::Core(CoreError::Format { offset, .. }) => body["error"]["offset"] = (*offset).into(),
            _ => {}
        }
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(body)).into_response()
    }
}
