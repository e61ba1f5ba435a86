//! JSON over HTTP. Every error body is `{"error": code, "detail": text}`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use essaylens_core::corpus::Catalog;
use essaylens_core::embeddings::SentenceEncoder;
use essaylens_core::Error as CoreError;
use serde::de::DeserializeOwned;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::error::Error;
use crate::pipeline::{analyze, score, AnalyzeRequest, ScoreRequest};
use crate::registry::Registry;

pub const BODY_LIMIT: usize = 1 << 20;

/// Shared, read-only service state.
#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub encoder: Arc<dyn SentenceEncoder>,
    pub catalog: Arc<Catalog>,
    pub tau: f64,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code,
            detail: detail.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "detail": self.detail}))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let detail = e.to_string();
        match e {
            Error::ModelNotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "model_not_found", detail),
            Error::InvalidRequest(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", detail),
            Error::Core(CoreError::DimMismatch { .. }) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch", detail)
            }
            Error::Core(CoreError::ProviderUnavailable(_)) => {
                ApiError::new(StatusCode::BAD_REQUEST, "provider_unavailable", detail)
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail),
        }
    }
}

fn parse_body<T: DeserializeOwned>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let bytes = body.map_err(|r| {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                "payload_too_large",
                format!("request bodies are limited to {} bytes", BODY_LIMIT),
            )
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", r.body_text())
        }
    })?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()))
}

/// Runs CPU-bound work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn analyze_handler(
    State(st): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    let req: AnalyzeRequest = parse_body(body)?;
    let resp = blocking(move || analyze(&req, &st.registry, &st.encoder, st.tau)).await?;
    Ok(Json(resp).into_response())
}

async fn score_handler(State(st): State<AppState>, body: Result<Bytes, BytesRejection>) -> Result<Response, ApiError> {
    let req: ScoreRequest = parse_body(body)?;
    let resp = blocking(move || score(&req, &st.registry, &st.encoder)).await?;
    Ok(Json(resp).into_response())
}

async fn models_handler(State(st): State<AppState>) -> Response {
    Json(json!({ "models": st.registry.manifests() })).into_response()
}

async fn sets_handler(State(st): State<AppState>) -> Response {
    let sets: Vec<_> = st.catalog.sets().cloned().collect();
    Json(json!({ "essay_sets": sets })).into_response()
}

async fn health_handler(State(st): State<AppState>) -> Response {
    Json(json!({
        "status": "ok",
        "models": st.registry.len(),
        "provider": st.encoder.id(),
    }))
    .into_response()
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

/// API routes, plus the files under `static_dir` at `/` when given.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/analyze", post(analyze_handler))
        .route("/v1/score", post(score_handler))
        .route("/v1/models", get(models_handler))
        .route("/v1/essay-sets", get(sets_handler))
        .route("/healthz", get(health_handler))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).fallback(axum::routing::any(not_found))),
        None => api.fallback(not_found),
    }
}

pub async fn serve(state: AppState, static_dir: Option<PathBuf>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
