//! Shared server state and the HTTP routes.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::{ConnectInfo, Path, Query, State, WebSocketUpgrade};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use bm_core::protocol::{ErrorCode, MAX_FRAME_BYTES};
use bm_core::session::{Registry, SessionConfig, SessionError, SessionId};
use bm_core::Model;
use serde::{Deserialize, Serialize};

use crate::dataset::{content_type, Dataset};
use crate::net::{NetAudit, NetCounts, PeerAddr};

const BUILTIN_INDEX: &str = include_str!("../assets/index.html");

/// Header carrying a student join token on dataset requests.
pub const JOIN_TOKEN_HEADER: &str = "x-bm-join-token";
/// Header carrying a teacher credential on dataset requests.
pub const TEACHER_KEY_HEADER: &str = "x-bm-teacher-key";

/// Credentials and URLs of a freshly started session.
#[derive(Debug, Clone)]
pub struct SessionInfo {
    pub id: SessionId,
    pub join_token: String,
    pub teacher_key: String,
    pub teacher_url: String,
    pub join_url: String,
}

pub struct AppState {
    registry: Registry,
    model: Arc<Model>,
    session_config: SessionConfig,
    dataset: Dataset,
    net: Arc<NetAudit>,
    base_url: String,
    frame_rate: f64,
    web_root: Option<PathBuf>,
    announce: bool,
    shutting_down: Arc<AtomicBool>,
    open_connections: AtomicUsize,
}

pub(crate) struct AppParts {
    pub registry: Registry,
    pub model: Arc<Model>,
    pub session_config: SessionConfig,
    pub dataset: Dataset,
    pub net: Arc<NetAudit>,
    pub base_url: String,
    pub frame_rate: f64,
    pub web_root: Option<PathBuf>,
    pub announce: bool,
}

/// Decrements the open connection count when dropped.
pub(crate) struct ConnectionGuard(Arc<AppState>);

impl Drop for ConnectionGuard {
    fn drop(&mut self) {
        self.0.open_connections.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Counters served on `/introspect` to loopback clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Introspection {
    pub sessions: usize,
    /// Frames, thumbnails and avatars currently held in memory.
    pub retained_images: usize,
    pub open_connections: usize,
    pub accepted_connections: usize,
    pub rejected_non_local: usize,
}

impl AppState {
    pub(crate) fn new(parts: AppParts) -> Self {
        Self {
            registry: parts.registry,
            model: parts.model,
            session_config: parts.session_config,
            dataset: parts.dataset,
            net: parts.net,
            base_url: parts.base_url,
            frame_rate: parts.frame_rate,
            web_root: parts.web_root,
            announce: parts.announce,
            shutting_down: Arc::new(AtomicBool::new(false)),
            open_connections: AtomicUsize::new(0),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn net_counts(&self) -> NetCounts {
        self.net.counts()
    }

    pub(crate) fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub(crate) fn shutdown_flag(&self) -> Arc<AtomicBool> {
        self.shutting_down.clone()
    }

    pub(crate) fn track_connection(self: &Arc<Self>) -> ConnectionGuard {
        self.open_connections.fetch_add(1, Ordering::SeqCst);
        ConnectionGuard(self.clone())
    }

    pub fn introspect(&self) -> Introspection {
        let net = self.net.counts();
        Introspection {
            sessions: self.registry.session_count(),
            retained_images: self.registry.retained_images(),
            open_connections: self.open_connections.load(Ordering::SeqCst),
            accepted_connections: net.accepted,
            rejected_non_local: net.rejected_non_local,
        }
    }

    pub fn start_session(&self) -> Result<SessionInfo, SessionError> {
        let (id, join_token) = self
            .registry
            .create_session(self.model.clone(), self.session_config.clone())?;
        let teacher_key = self.registry.get(&id)?.teacher_key()?;
        Ok(SessionInfo {
            teacher_url: crate::teacher_url(&self.base_url, &teacher_key),
            join_url: crate::join_url(&self.base_url, &join_token),
            id,
            join_token,
            teacher_key,
        })
    }

    /// Prints a new session's URLs and credential to the console.
    pub(crate) fn announce(&self, info: &SessionInfo) {
        if self.announce {
            println!("{}", crate::session_banner(info));
        }
    }

    /// Ends every session with a `server_shutdown` farewell.
    pub fn shut_down(&self) {
        self.shutting_down.store(true, Ordering::SeqCst);
        self.registry.end_all();
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/join/{token}", get(join_page))
        .route("/rt", get(realtime))
        .route("/dataset", get(dataset_manifest))
        .route("/dataset/{label}", get(dataset_label))
        .route("/dataset/{label}/{image_id}", get(dataset_image))
        .route("/introspect", get(introspect))
        .with_state(state)
}

#[derive(Debug, Serialize)]
struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    code: ErrorCode,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: ErrorCode, detail: impl Into<String>) -> Self {
        Self {
            status,
            code,
            detail: detail.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

async fn page(state: &AppState) -> Html<String> {
    if let Some(root) = &state.web_root {
        if let Ok(html) = tokio::fs::read_to_string(root.join("index.html")).await {
            return Html(html);
        }
    }
    Html(BUILTIN_INDEX.to_owned())
}

async fn index(State(state): State<Arc<AppState>>) -> Html<String> {
    page(&state).await
}

async fn join_page(State(state): State<Arc<AppState>>, Path(token): Path<String>) -> Result<Html<String>, ApiError> {
    state
        .registry
        .by_token(&token)
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, ErrorCode::UnknownToken, "this join link is no longer valid"))?;
    Ok(page(&state).await)
}

async fn realtime(State(state): State<Arc<AppState>>, upgrade: WebSocketUpgrade) -> Response {
    // oversized frames must reach the protocol layer to get E_OVERSIZE
    upgrade
        .max_message_size(MAX_FRAME_BYTES * 2)
        .max_frame_size(MAX_FRAME_BYTES * 2)
        .on_upgrade(move |socket| crate::conn::serve(socket, state))
}

#[derive(Debug, Default, Deserialize)]
struct Access {
    token: Option<String>,
    key: Option<String>,
}

/// Teachers always pass; students pass once the teacher unlocks the dataset.
fn check_dataset_access(state: &AppState, headers: &HeaderMap, query: Access) -> Result<(), ApiError> {
    let header = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_owned);
    let key = header(TEACHER_KEY_HEADER).or(query.key);
    let token = header(JOIN_TOKEN_HEADER).or(query.token);
    if let Some(key) = key {
        if state.registry.by_teacher_key(&key).is_ok() {
            return Ok(());
        }
        if token.is_none() {
            return Err(ApiError::new(StatusCode::UNAUTHORIZED, ErrorCode::Auth, "unknown teacher credential"));
        }
    }
    let Some(token) = token else {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, ErrorCode::Auth, "a join token or teacher credential is required"));
    };
    let session = state
        .registry
        .by_token(&token)
        .map_err(|_| ApiError::new(StatusCode::FORBIDDEN, ErrorCode::UnknownToken, "unknown join token"))?;
    let unlocked = session
        .flags()
        .map(|f| f.dataset_unlocked)
        .map_err(|_| ApiError::new(StatusCode::FORBIDDEN, ErrorCode::UnknownSession, "session has ended"))?;
    if unlocked {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::FORBIDDEN, ErrorCode::DatasetLocked, "the teacher has not unlocked the dataset"))
    }
}

fn not_found(what: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, ErrorCode::NotFound, format!("no such {what}"))
}

async fn dataset_manifest(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(access): Query<Access>,
) -> Result<Response, ApiError> {
    check_dataset_access(&state, &headers, access)?;
    Ok(Json(state.dataset.manifest()).into_response())
}

async fn dataset_label(
    State(state): State<Arc<AppState>>,
    Path(label): Path<String>,
    headers: HeaderMap,
    Query(access): Query<Access>,
) -> Result<Response, ApiError> {
    check_dataset_access(&state, &headers, access)?;
    let entry = state.dataset.label(&label).ok_or_else(|| not_found("label"))?;
    Ok(Json(entry).into_response())
}

async fn dataset_image(
    State(state): State<Arc<AppState>>,
    Path((label, image_id)): Path<(String, String)>,
    headers: HeaderMap,
    Query(access): Query<Access>,
) -> Result<Response, ApiError> {
    check_dataset_access(&state, &headers, access)?;
    let path = state
        .dataset
        .image_path(&label, &image_id)
        .ok_or_else(|| not_found("image"))?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        log::warn!("dataset image unreadable: {e}");
        not_found("image")
    })?;
    Ok((
        [
            (header::CONTENT_TYPE, content_type(&image_id)),
            (header::CACHE_CONTROL, "no-store"),
        ],
        bytes,
    )
        .into_response())
}

async fn introspect(
    State(state): State<Arc<AppState>>,
    ConnectInfo(PeerAddr(peer)): ConnectInfo<PeerAddr>,
) -> Result<Json<Introspection>, ApiError> {
    if !peer.ip().is_loopback() {
        return Err(ApiError::new(StatusCode::FORBIDDEN, ErrorCode::Auth, "introspection is loopback only"));
    }
    Ok(Json(state.introspect()))
}
