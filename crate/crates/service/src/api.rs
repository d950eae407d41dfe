//! JSON-over-HTTP routes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::Semaphore;
use uuid::Uuid;

use crate::error::{ApiError, ErrorCode};
use crate::presets::PresetInfo;
use crate::service::{
    EditService, FeedbackRequest, GenerateRequest, GenerateResponse, GuideAck, GuideRequest, SearchView, SessionInfo,
};

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<EditService>,
    /// Bounds the number of sampler runs executing at once.
    pub workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(service: Arc<EditService>, workers: usize) -> Self {
        Self { service, workers: Arc::new(Semaphore::new(workers.max(1))) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.code {
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::ShapeMismatch => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Busy => StatusCode::CONFLICT,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self)).into_response()
    }
}

type ApiResponse<T> = Result<Json<T>, ApiError>;

#[derive(serde::Deserialize)]
struct CreateSession {
    preset: String,
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    if body.is_empty() {
        return serde_json::from_slice(b"{}").map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn parse_id(raw: &str) -> Result<Uuid, ApiError> {
    Uuid::parse_str(raw).map_err(|_| ApiError::not_found(format!("no session {raw}")))
}

async fn list_presets(State(state): State<AppState>) -> Json<Vec<PresetInfo>> {
    Json(state.service.presets())
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionInfo>), ApiError> {
    let req: CreateSession = parse_json(&body)?;
    Ok((StatusCode::CREATED, Json(state.service.create_session(&req.preset)?)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResponse<SessionInfo> {
    Ok(Json(state.service.session_info(parse_id(&id)?)?))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state.service.delete_session(parse_id(&id)?)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn submit_guide(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResponse<GuideAck> {
    let req: GuideRequest = parse_json(&body)?;
    Ok(Json(state.service.submit_guide(parse_id(&id)?, &req)?))
}

async fn generate(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResponse<GenerateResponse> {
    let req: GenerateRequest = parse_json(&body)?;
    // Claim the session before queueing so a second request is rejected at once.
    let ticket = state.service.begin_generate(parse_id(&id)?, &req)?;
    let _permit = state
        .workers
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::internal("worker pool closed"))?;
    let out = tokio::task::spawn_blocking(move || ticket.execute())
        .await
        .map_err(|e| ApiError::internal(format!("generation task failed: {e}")))??;
    Ok(Json(out))
}

async fn feedback(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResponse<SearchView> {
    let req: FeedbackRequest = parse_json(&body)?;
    Ok(Json(state.service.feedback(parse_id(&id)?, req.verdict)?))
}

async fn get_result(
    State(state): State<AppState>,
    Path((id, rid)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let rid: u64 = rid.parse().map_err(|_| ApiError::not_found(format!("no result {rid}")))?;
    let out = state.service.result_bytes(parse_id(&id)?, rid)?;
    Ok(([(header::CONTENT_TYPE, out.content_type)], out.bytes).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/presets", get(list_presets))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session).delete(delete_session))
        .route("/v1/sessions/{id}/guide", post(submit_guide))
        .route("/v1/sessions/{id}/generate", post(generate))
        .route("/v1/sessions/{id}/feedback", post(feedback))
        .route("/v1/sessions/{id}/results/{rid}", get(get_result))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
