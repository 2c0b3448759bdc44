//! HTTP routes. Every failure is a JSON `{error_code, message, field}`.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::{self, DetectParams, DetectionEvalParams, GroundParams, GroundingEvalParams};
use crate::registry::{Session, SessionRegistry, StoredImage};

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;
pub const DEFAULT_EVAL_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    pub eval_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES, eval_timeout: DEFAULT_EVAL_TIMEOUT }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<SessionRegistry>,
    pub config: ServiceConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error_code: String,
    pub message: String,
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, field: Option<&str>) -> Self {
        Self {
            status,
            body: ErrorBody { error_code: code.into(), message: message.into(), field: field.map(Into::into) },
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UnknownTraceId", format!("no trace {id:?}"), Some("trace_id"))
    }

    fn bad_request(message: impl Into<String>, field: Option<&str>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidRequest", message, field)
    }
}

impl From<lensground::Error> for ApiError {
    fn from(e: lensground::Error) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.code(), e.to_string(), e.field())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string(), None))
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/traces", post(upload))
        .route("/v1/traces/{id}/meta", get(meta))
        .route("/v1/traces/{id}/image", get(image))
        .route("/v1/detect", post(detect))
        .route("/v1/ground", post(ground))
        .route("/v1/eval/detection", post(eval_detection))
        .route("/v1/eval/grounding", post(eval_grounding))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadResponse {
    pub trace_id: String,
}

async fn upload(State(state): State<AppState>, mut form: Multipart) -> ApiResult<UploadResponse> {
    let mut trace = None;
    let mut image = None;
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(multipart_error(e.status(), e.body_text())),
        };
        let name = field.name().unwrap_or_default().to_owned();
        let content_type = field.content_type().unwrap_or("application/octet-stream").to_owned();
        let bytes = field.bytes().await.map_err(|e| multipart_error(e.status(), e.body_text()))?;
        match name.as_str() {
            "trace" => trace = Some(bytes),
            "image" => image = Some(StoredImage { content_type, bytes: Arc::new(bytes.to_vec()) }),
            _ => {}
        }
    }
    let trace = trace.ok_or_else(|| ApiError::bad_request("missing multipart field \"trace\"", Some("trace")))?;
    let registry = state.registry.clone();
    let trace_id = tokio::task::spawn_blocking(move || registry.register(&trace, image))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string(), None))??;
    Ok(Json(UploadResponse { trace_id }))
}

fn multipart_error(status: StatusCode, message: String) -> ApiError {
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(status, "PayloadTooLarge", message, Some("trace"))
    } else {
        ApiError::bad_request(message, None)
    }
}

fn session(state: &AppState, id: &str) -> Result<Session, ApiError> {
    state.registry.get(id).ok_or_else(|| ApiError::not_found(id))
}

async fn meta(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<engine::TraceMeta> {
    let s = session(&state, &id)?;
    Ok(Json(engine::trace_meta(&id, &s.trace, s.image.is_some())))
}

async fn image(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let img = session(&state, &id)?.image.ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, "NoImage", format!("trace {id:?} has no image"), Some("image"))
    })?;
    Ok(([(header::CONTENT_TYPE, img.content_type)], img.bytes.to_vec()).into_response())
}

#[derive(Debug, Deserialize)]
struct WithTrace<T> {
    trace_id: String,
    #[serde(flatten)]
    params: T,
}

async fn detect(State(state): State<AppState>, body: Bytes) -> ApiResult<engine::DetectResponse> {
    let req: WithTrace<DetectParams> = parse_body(&body)?;
    let s = session(&state, &req.trace_id)?;
    let registry = state.registry.clone();
    run_blocking(state.config.eval_timeout, move || engine::detect(&s.trace, &req.params, registry.layers())).await
}

async fn ground(State(state): State<AppState>, body: Bytes) -> ApiResult<engine::GroundResponse> {
    let req: WithTrace<GroundParams> = parse_body(&body)?;
    let s = session(&state, &req.trace_id)?;
    let registry = state.registry.clone();
    run_blocking(state.config.eval_timeout, move || engine::ground(&s.trace, &req.params, registry.layers())).await
}

/// Relative manifest paths resolve against the data directory.
fn resolve_manifest(state: &AppState, path: &mut std::path::PathBuf) {
    if let (true, Some(dir)) = (path.is_relative(), state.registry.data_dir()) {
        *path = dir.join(&*path);
    }
}

async fn eval_detection(State(state): State<AppState>, body: Bytes) -> ApiResult<Vec<lensground::eval::EvalReport>> {
    let mut req: DetectionEvalParams = parse_body(&body)?;
    resolve_manifest(&state, &mut req.manifest_path);
    let registry = state.registry.clone();
    run_blocking(state.config.eval_timeout, move || engine::eval_detection(&req, registry.layers())).await
}

async fn eval_grounding(
    State(state): State<AppState>,
    body: Bytes,
) -> ApiResult<lensground::eval::GroundingReport> {
    let mut req: GroundingEvalParams = parse_body(&body)?;
    resolve_manifest(&state, &mut req.manifest_path);
    let registry = state.registry.clone();
    run_blocking(state.config.eval_timeout, move || engine::eval_grounding(&req, registry.layers())).await
}

async fn run_blocking<T: Send + 'static>(
    timeout: Duration,
    f: impl FnOnce() -> lensground::Result<T> + Send + 'static,
) -> ApiResult<T> {
    match tokio::time::timeout(timeout, tokio::task::spawn_blocking(f)).await {
        Ok(Ok(result)) => Ok(Json(result?)),
        Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string(), None)),
        Err(_) => Err(ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            "Timeout",
            format!("request exceeded {} s", timeout.as_secs_f64()),
            None,
        )),
    }
}
