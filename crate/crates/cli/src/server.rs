use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use heart2mind_core::contest::{
    AuditLog, CaseStore, ChatBackend, ContestError, ContestService, HttpChatClient, MockScript, ScriptedClient,
};
use heart2mind_core::mstft::{load_checkpoint, MstftModel};
use heart2mind_core::signal_store::{CardiacRecord, DeviceKind, Profile, SignalStore, StoreError};
use heart2mind_core::windowing::{Label, WindowError};

use crate::config::{LlmBackendKind, ServiceConfig};
use crate::pipeline::{Pipeline, PipelineError, SCHEMA_VERSION};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SignalStore>,
    pub contest: Arc<ContestService>,
    pub pipeline: Arc<Pipeline>,
    pub model_checksum: String,
    pub config_digest: String,
    pub auth_token: Option<String>,
}

pub fn make_backend(cfg: &ServiceConfig) -> anyhow::Result<Arc<dyn ChatBackend>> {
    Ok(match cfg.llm_backend {
        LlmBackendKind::Http => Arc::new(HttpChatClient::new(cfg.llm.clone())?),
        LlmBackendKind::Scripted => Arc::new(ScriptedClient {
            script: MockScript::default(),
        }),
    })
}

/// Services over `cfg.data_dir` with an already loaded model.
pub fn build_state(cfg: &ServiceConfig, model: MstftModel, backend: Arc<dyn ChatBackend>) -> anyhow::Result<AppState> {
    let dir = &cfg.data_dir;
    let store = Arc::new(SignalStore::open_from_env(dir.join("sessions"))?);
    let audit = Arc::new(AuditLog::open(&dir.join("audit.ndjson"))?);
    let contest = Arc::new(ContestService::new(
        CaseStore::open(&dir.join("cases"))?,
        audit,
        backend,
        cfg.llm.clone(),
    ));
    let pipeline = Arc::new(Pipeline::new(
        store.clone(),
        Arc::new(model),
        contest.clone(),
        cfg.sae.clone(),
        cfg.max_windows,
        dir.join("bundles"),
    )?);
    let auth_token = match &cfg.auth_token_env {
        Some(var) => Some(std::env::var(var).with_context(|| format!("auth token variable `{var}` is not set"))?),
        None => None,
    };
    Ok(AppState {
        store,
        contest,
        model_checksum: pipeline.model_checksum.clone(),
        pipeline,
        config_digest: cfg.digest(),
        auth_token,
    })
}

pub fn load_model(path: &Path) -> anyhow::Result<MstftModel> {
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": { "kind": self.kind, "message": self.message },
        });
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, kind) = match &e {
            StoreError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            StoreError::State(_) => (StatusCode::CONFLICT, "state"),
            StoreError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            StoreError::Parse { .. } => (StatusCode::BAD_REQUEST, "parse"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<ContestError> for ApiError {
    fn from(e: ContestError) -> Self {
        let (status, kind) = match &e {
            ContestError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ContestError::Validation(_) | ContestError::Contract(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            ContestError::State(_) => (StatusCode::CONFLICT, "state"),
            ContestError::Transport { .. } | ContestError::Endpoint { .. } | ContestError::Parse(_) => {
                (StatusCode::BAD_GATEWAY, "llm_endpoint")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Store(e) => e.into(),
            PipelineError::Contest(e) => e.into(),
            PipelineError::InsufficientData { .. } | PipelineError::Window(WindowError::InsufficientData { .. }) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "insufficient_data", e.to_string())
            }
            PipelineError::Validation(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

/// JSON object with `schema_version` set.
fn versioned<T: Serialize>(v: T) -> ApiResult {
    let mut value = serde_json::to_value(v).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    match value.as_object_mut() {
        Some(obj) => {
            obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
        }
        None => value = json!({ "schema_version": SCHEMA_VERSION, "data": value }),
    }
    Ok(Json(value))
}

async fn blocking<T, E>(f: impl FnOnce() -> Result<T, E> + Send + 'static) -> Result<T, ApiError>
where
    T: Send + 'static,
    E: Into<ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(Into::into)
}

async fn healthz(State(s): State<AppState>) -> ApiResult {
    versioned(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "model_checksum": s.model_checksum,
        "config_digest": s.config_digest,
    }))
}

#[derive(Deserialize)]
struct NewSession {
    profile: Profile,
    #[serde(default = "default_device")]
    device_kind: DeviceKind,
    #[serde(default)]
    label: Option<Label>,
}

fn default_device() -> DeviceKind {
    DeviceKind::H10Like
}

async fn create_session(State(s): State<AppState>, Json(body): Json<NewSession>) -> Result<(StatusCode, Json<Value>), ApiError> {
    let store = s.store.clone();
    let id = blocking(move || -> Result<String, StoreError> {
        let id = store.open_session(&body.profile, body.device_kind)?;
        if body.label.is_some() {
            store.set_label(&id, body.label)?;
        }
        Ok(id)
    })
    .await?;
    Ok((StatusCode::CREATED, versioned(json!({ "session_id": id, "state": "RECORDING" }))?))
}

/// One JSON record per line; blank lines are skipped.
fn parse_ndjson(body: &str) -> Result<Vec<CardiacRecord>, ApiError> {
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "parse", format!("line {}: {e}", i + 1)))
        })
        .collect()
}

async fn ingest(State(s): State<AppState>, UrlPath(id): UrlPath<String>, body: String) -> ApiResult {
    let records = parse_ndjson(&body)?;
    let store = s.store.clone();
    let acks = blocking(move || store.ingest_batch(&id, &records)).await?;
    let accepted = acks.iter().filter(|a| a.accepted).count();
    versioned(json!({ "received": acks.len(), "accepted": accepted, "acks": acks }))
}

async fn close_session(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let store = s.store.clone();
    versioned(blocking(move || store.close_session(&id)).await?)
}

async fn get_session(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let store = s.store.clone();
    let (meta, rri, profile) = blocking(move || -> Result<_, StoreError> {
        Ok((store.meta(&id)?, store.rri_series(&id)?, store.profile(&id)?))
    })
    .await?;
    versioned(json!({
        "session_id": meta.session_id,
        "state": meta.state,
        "device_kind": meta.device_kind,
        "label": meta.label,
        "created_at": meta.created_at,
        "summary": meta.summary(),
        "profile": { "age": profile.age, "sex": profile.sex },
        "rri": rri,
    }))
}

async fn export_csv(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let store = s.store.clone();
    let bytes = blocking(move || store.export_csv(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], bytes).into_response())
}

#[derive(Deserialize)]
struct DiagnoseQuery {
    window: Option<usize>,
    #[serde(default)]
    fresh: bool,
}

async fn diagnose(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<DiagnoseQuery>,
) -> ApiResult {
    let pipeline = s.pipeline.clone();
    versioned(blocking(move || pipeline.run(&id, q.window, q.fresh)).await?)
}

async fn get_case(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let contest = s.contest.clone();
    versioned(blocking(move || contest.get(&id)).await?)
}

#[derive(Deserialize)]
struct NewMessage {
    content: String,
}

async fn post_message(State(s): State<AppState>, UrlPath(id): UrlPath<String>, Json(body): Json<NewMessage>) -> ApiResult {
    let contest = s.contest.clone();
    let (reply, metrics, case) = blocking(move || contest.message(&id, &body.content)).await?;
    versioned(json!({ "reply": reply, "metrics": metrics, "case": case }))
}

async fn finalize(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let contest = s.contest.clone();
    let (outcome, case) = blocking(move || contest.finalize(&id)).await?;
    versioned(json!({ "outcome": outcome, "case": case }))
}

#[derive(Deserialize)]
struct OverrideBody {
    decision: Label,
    #[serde(default)]
    reason: String,
    #[serde(default)]
    clinician_id: String,
}

async fn override_case(State(s): State<AppState>, UrlPath(id): UrlPath<String>, Json(body): Json<OverrideBody>) -> ApiResult {
    let contest = s.contest.clone();
    let case = blocking(move || contest.override_case(&id, body.decision, &body.reason, &body.clinician_id)).await?;
    versioned(json!({ "case": case }))
}

async fn require_token(State(s): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.auth_token {
        let ok = req.uri().path() == "/healthz"
            || req.method() == Method::OPTIONS
            || req
                .headers()
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "))
                .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn cors(allowlist: &[String]) -> CorsLayer {
    let origins: Vec<HeaderValue> = allowlist.iter().filter_map(|o| o.parse().ok()).collect();
    CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION])
}

pub fn router(state: AppState, cors_allowlist: &[String]) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/records", post(ingest))
        .route("/sessions/{id}/close", post(close_session))
        .route("/sessions/{id}/export.csv", get(export_csv))
        .route("/diagnose/{session_id}", post(diagnose))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/messages", post(post_message))
        .route("/cases/{id}/finalize", post(finalize))
        .route("/cases/{id}/override", post(override_case))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(cors(cors_allowlist))
        .with_state(state)
}

pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let model = load_model(&cfg.checkpoint)?;
    let backend = make_backend(&cfg)?;
    let state = tokio::task::block_in_place(|| build_state(&cfg, model, backend))?;
    let app = router(state.clone(), &cfg.cors_allowlist);
    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .with_context(|| format!("cannot listen on {}", cfg.listen))?;
    log::info!(
        "serving on {} (model {}, config {})",
        cfg.listen,
        &state.model_checksum[..12.min(state.model_checksum.len())],
        &state.config_digest[..12]
    );
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
