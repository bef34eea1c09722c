//! HTTP API over the annotator and chat sessions.

mod openapi;
pub mod store;

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use asmscribe_core::annotate::{AnnotationOptions, AnnotationRequest, AnnotationResult};
use asmscribe_core::tasks::Task;
use asmscribe_llm::assist::{annotate, chat_turn, ChatOptions, ChatSession};
use asmscribe_llm::{InferenceClient, LlmError};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{oneshot, Mutex};
use tokio::task::JoinHandle;

pub use store::{SessionStore, StoreError};

pub const DEFAULT_PORT: u16 = 8642;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: IpAddr,
    pub port: u16,
    pub data_dir: PathBuf,
    pub ui_dir: Option<PathBuf>,
    pub chat: ChatOptions,
    pub system_prompt: Option<String>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: DEFAULT_PORT,
            data_dir: data_dir.into(),
            ui_dir: None,
            chat: ChatOptions::default(),
            system_prompt: None,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    backend: InferenceClient,
    embed_backend: Option<InferenceClient>,
    store: SessionStore,
    locks: Arc<DashMap<String, Arc<Mutex<()>>>>,
    chat: ChatOptions,
    system_prompt: Option<String>,
}

impl AppState {
    pub fn new(
        cfg: &ServiceConfig,
        backend: InferenceClient,
        embed_backend: Option<InferenceClient>,
    ) -> Result<Self, StoreError> {
        Ok(AppState {
            backend,
            embed_backend,
            store: SessionStore::open(&cfg.data_dir)?,
            locks: Arc::new(DashMap::new()),
            chat: cfg.chat,
            system_prompt: cfg.system_prompt.clone(),
        })
    }

    fn session_lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.entry(id.to_string()).or_default().clone()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    raw_response: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into(), raw_response: None }
    }

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(raw) = self.raw_response {
            body["raw_response"] = Value::String(raw);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<LlmError> for ApiError {
    fn from(e: LlmError) -> Self {
        let status = match e {
            LlmError::EmptyInput(_) | LlmError::InvalidInput(_) | LlmError::EmptyReference => StatusCode::BAD_REQUEST,
            _ => StatusCode::BAD_GATEWAY,
        };
        let raw_response = match &e {
            LlmError::MalformedAfterRetries { raw, .. } | LlmError::UnparseableResponse { raw } => Some(raw.clone()),
            _ => None,
        };
        ApiError { status, message: e.to_string(), raw_response }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotateBody {
    code: String,
    task: String,
    model: Option<String>,
    #[serde(default)]
    options: Option<AnnotationOptions>,
}

async fn annotate_handler(
    State(state): State<AppState>,
    body: Result<Json<AnnotateBody>, JsonRejection>,
) -> ApiResult<AnnotationResult> {
    let Json(body) = body?;
    let task = Task::parse_name(&body.task)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown task {:?}", body.task)))?;
    let client = match &body.model {
        Some(m) => state.backend.with_model(m),
        None => state.backend.clone(),
    };
    let req = AnnotationRequest { task, code: body.code, options: body.options.unwrap_or_default() };
    Ok(Json(annotate(&client, &req).await?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSessionBody {
    system: Option<String>,
    model: Option<String>,
}

#[derive(Debug, Serialize)]
struct NewSession {
    session_id: String,
    created_at: u64,
}

async fn create_session(
    State(state): State<AppState>,
    body: Option<Json<NewSessionBody>>,
) -> Result<(StatusCode, Json<NewSession>), ApiError> {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let id = uuid::Uuid::new_v4().simple().to_string();
    let model = body.model.unwrap_or_else(|| state.backend.model_name().to_string());
    let system = body.system.or(state.system_prompt.clone());
    let session = ChatSession::new(id.clone(), model, system.as_deref());
    state.store.put(&session)?;
    Ok((StatusCode::CREATED, Json(NewSession { session_id: id, created_at: session.created_at })))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<ChatSession> {
    state.store.get(&id)?.map(Json).ok_or_else(|| ApiError::not_found(&id))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChatBody {
    message: String,
}

#[derive(Debug, Serialize)]
struct ChatReply {
    reply: String,
}

async fn chat_handler(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ChatBody>, JsonRejection>,
) -> ApiResult<ChatReply> {
    let lock = state.session_lock(&id);
    let _turn = lock.lock().await;
    let mut session = state.store.get(&id)?.ok_or_else(|| ApiError::not_found(&id))?;
    let Json(body) = body?;
    let client = if session.model == state.backend.model_name() {
        state.backend.clone()
    } else {
        state.backend.with_model(&session.model)
    };
    let reply = chat_turn(&client, &mut session, &body.message, state.chat).await?;
    state.store.put(&session)?;
    Ok(Json(ChatReply { reply }))
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    let backend = state.backend.is_reachable().await;
    let mut body = json!({ "status": "ok", "backend_reachable": backend, "model": state.backend.model_name() });
    if let Some(embed) = &state.embed_backend {
        body["embed_backend_reachable"] = Value::Bool(embed.is_reachable().await);
    }
    Json(body)
}

async fn models(State(state): State<AppState>) -> ApiResult<Value> {
    Ok(Json(state.backend.list_models().await?))
}

async fn spec() -> Json<Value> {
    Json(openapi::document())
}

async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/annotate", post(annotate_handler))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/chat", post(chat_handler))
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/spec", get(spec))
        .fallback(api_not_found)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match ui_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A service bound in the background; see [`spawn`].
pub struct RunningService {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl RunningService {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections and waits for in-flight requests to finish.
    pub async fn stop(mut self) -> Result<(), ServeError> {
        if let Some(tx) = self.shutdown.take() {
            tx.send(()).ok();
        }
        match (&mut self.task).await {
            Ok(result) => Ok(result?),
            Err(e) => Err(ServeError::Io(std::io::Error::other(e))),
        }
    }
}

/// Binds `cfg.bind:cfg.port` (port 0 picks a free one) and serves in a background task.
pub async fn spawn(
    cfg: ServiceConfig,
    backend: InferenceClient,
    embed_backend: Option<InferenceClient>,
) -> Result<RunningService, ServeError> {
    let state = AppState::new(&cfg, backend, embed_backend)?;
    let addr = SocketAddr::new(cfg.bind, cfg.port);
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { addr, source })?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel();
    let app = router(state, cfg.ui_dir);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                rx.await.ok();
            })
            .await
    });
    Ok(RunningService { addr, shutdown: Some(tx), task })
}

/// Serves until Ctrl-C.
pub async fn serve(
    cfg: ServiceConfig,
    backend: InferenceClient,
    embed_backend: Option<InferenceClient>,
) -> Result<(), ServeError> {
    let running = spawn(cfg, backend, embed_backend).await?;
    eprintln!("listening on {}", running.url());
    tokio::signal::ctrl_c().await?;
    running.stop().await
}
