use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use learnflow_core::EngineError;
use serde_json::{json, Value};

/// JSON error body `{code, message, details?}` with its HTTP status.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or unknown participant token")
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "Forbidden", message)
    }

    pub fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UnknownSession", format!("no session `{id}`"))
    }

    pub fn unknown_flow(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UnknownFlow", format!("no flow `{id}`"))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    pub fn body(&self) -> Value {
        let mut body = json!({"code": self.code, "message": self.message});
        if let Some(details) = &self.details {
            body["details"] = details.clone();
        }
        body
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::NotYourTurn(slot) => {
                Self::new(StatusCode::CONFLICT, "NotYourTurn", message).with_details(json!({"slot_id": slot}))
            }
            EngineError::WordLimitExceeded { limit, actual } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "WordLimitExceeded", message)
                    .with_details(json!({"limit": limit, "actual": actual}))
            }
            EngineError::IllegalToggle(slot) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "IllegalToggle", message).with_details(json!({"slot_id": slot}))
            }
            EngineError::InvalidFlow(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidFlow", message),
            EngineError::SessionEnded => Self::new(StatusCode::CONFLICT, "SessionEnded", message),
            EngineError::Inapplicable { .. } => Self::new(StatusCode::CONFLICT, "Inapplicable", message),
            EngineError::InternalBlocked(_) | EngineError::NoPendingInvocation | EngineError::AgentMismatch { .. } => {
                Self::new(StatusCode::CONFLICT, "Conflict", message)
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "EngineFailure", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}
