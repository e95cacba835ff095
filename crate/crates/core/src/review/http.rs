//! JSON-over-HTTP front for [`ReviewStore`].
//!
//! Routes (all under an optional bearer token):
//!
//! - `GET  /sessions`
//! - `GET  /sessions/{id}/candidates?page=&filter=pending|decided|all`
//! - `POST /sessions/{id}/decisions` with `{logo_id, decision, note}`
//! - `GET  /sessions/{id}/progress`
//! - `GET  /sessions/{id}/history`
//! - `GET  /sessions/{id}/logos/{logo_id}` (PNG)
//! - `GET  /sessions/{id}/evidence/{logo_id}/{index}` (PNG)
//! - `POST /sessions/{id}/noise-estimate`
//!
//! With a UI directory configured, its files are served under `/ui/`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::RwLock;

use super::{PageFilter, ReviewStore, Session, Verdict};
use crate::error::{Error, Result};

pub struct ServerState {
    store: ReviewStore,
    sessions: Mutex<HashMap<String, Arc<RwLock<Session>>>>,
    token: Option<String>,
    ui_dir: Option<PathBuf>,
}

impl ServerState {
    pub fn new(store: ReviewStore) -> Self {
        ServerState {
            store,
            sessions: Mutex::new(HashMap::new()),
            token: None,
            ui_dir: None,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    pub fn with_ui_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.ui_dir = dir;
        self
    }

    /// Sessions are opened once and shared; the lock serializes writes.
    fn session(&self, id: &str) -> Result<Arc<RwLock<Session>>> {
        let mut open = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(s) = open.get(id) {
            return Ok(s.clone());
        }
        let s = Arc::new(RwLock::new(self.store.session(id)?));
        open.insert(id.to_string(), s.clone());
        Ok(s)
    }
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::UnknownSession(_) | Error::UnknownLogo(_) => StatusCode::NOT_FOUND,
        Error::Input(_) | Error::Policy(_) | Error::Config(_) => StatusCode::BAD_REQUEST,
        Error::IncompleteLabeling { .. } | Error::IncompleteReview { .. } => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_for(&self.0);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        let body = serde_json::json!({"error": self.0.kind(), "message": self.0.to_string()});
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;
type Shared = Arc<ServerState>;

#[derive(Deserialize)]
struct PageQuery {
    #[serde(default)]
    page: usize,
    #[serde(default)]
    filter: PageFilter,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    logo_id: String,
    decision: Verdict,
    #[serde(default)]
    note: Option<String>,
}

async fn list_sessions(State(st): State<Shared>) -> ApiResult<Response> {
    Ok(Json(st.store.list()?).into_response())
}

async fn candidates(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<PageQuery>,
) -> ApiResult<Response> {
    let s = st.session(&id)?;
    let page = s.read().await.candidates(q.page, q.filter);
    Ok(Json(page).into_response())
}

async fn decide(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<DecisionBody>,
) -> ApiResult<Response> {
    let s = st.session(&id)?;
    let ack = s
        .write()
        .await
        .submit_decision(&body.logo_id, body.decision, body.note)?;
    Ok(Json(ack).into_response())
}

async fn progress(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = st.session(&id)?;
    let p = s.read().await.progress();
    Ok(Json(p).into_response())
}

async fn history(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = st.session(&id)?;
    let log = s.read().await.history().to_vec();
    Ok(Json(log).into_response())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn logo(State(st): State<Shared>, UrlPath((id, logo)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let s = st.session(&id)?;
    let bytes = s.read().await.logo_png(&logo)?;
    Ok(png(bytes))
}

async fn evidence(
    State(st): State<Shared>,
    UrlPath((id, logo, index)): UrlPath<(String, String, usize)>,
) -> ApiResult<Response> {
    let s = st.session(&id)?;
    let bytes = s.read().await.evidence_png(&logo, index)?;
    Ok(png(bytes))
}

async fn noise_estimate(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = st.session(&id)?;
    let est = s.write().await.noise_estimate()?;
    Ok(Json(est).into_response())
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn ui_file(State(st): State<Shared>, rest: Option<UrlPath<String>>) -> Response {
    let Some(root) = &st.ui_dir else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let rel = rest.map_or_else(String::new, |UrlPath(p)| p);
    let rel = Path::new(if rel.is_empty() { "index.html" } else { &rel });
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let path = root.join(rel);
    let ctype = content_type(&path);
    match tokio::task::spawn_blocking(move || std::fs::read(path)).await {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, ctype)], bytes).into_response(),
        _ => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn require_token(State(st): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let expected = HeaderValue::from_str(&format!("Bearer {token}")).ok();
        if req.headers().get(header::AUTHORIZATION) != expected.as_ref() {
            let body = serde_json::json!({"error": "unauthorized", "message": "missing or wrong bearer token"});
            return (StatusCode::UNAUTHORIZED, Json(body)).into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: ServerState) -> Router {
    let st: Shared = Arc::new(state);
    let api = Router::new()
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}/candidates", get(candidates))
        .route("/sessions/{id}/decisions", post(decide))
        .route("/sessions/{id}/progress", get(progress))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/logos/{logo}", get(logo))
        .route("/sessions/{id}/evidence/{logo}/{index}", get(evidence))
        .route("/sessions/{id}/noise-estimate", post(noise_estimate))
        .route_layer(middleware::from_fn_with_state(st.clone(), require_token));
    Router::new()
        .merge(api)
        .route("/ui", get(ui_file))
        .route("/ui/", get(ui_file))
        .route("/ui/{*path}", get(ui_file))
        .fallback(|| async { (StatusCode::NOT_FOUND, Body::empty()) })
        .with_state(st)
}

/// Serve until the process is stopped.
pub async fn serve(addr: SocketAddr, state: ServerState) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
    log::info!(
        "review service listening on http://{}",
        listener.local_addr().map_or(addr, |a| a)
    );
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::Backend(format!("server stopped: {e}")))
}
