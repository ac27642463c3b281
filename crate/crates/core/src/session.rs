// SPDX-License-Identifier: Apache-2.0

//! Interactive chat sessions over one image.
//!
//! A user message carries free text plus pointer events (clicks, dragged
//! boxes, polygons) in image pixels. Events are normalized, serialized into
//! `<box>` spans and merged into the text at literal `<region>` markers
//! before the turn is sent to the backend. The HTTP API in [`router`] is the
//! surface the web UI talks to.

use std::collections::HashMap;
use std::fs;
use std::future::Future;
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendRequest, ChatTurn};
use crate::geometry::{denormalize_region, normalize_region, ImageDims, Point, Region, RegionKind};
use crate::instructgen::{serialize_region_with, RegionFormat, Role};

/// Placeholder in user text replaced by the next event's region.
pub const REGION_MARKER: &str = "<region>";
pub const DEFAULT_HISTORY_WINDOW: usize = 20;
pub const DEFAULT_TTL: Duration = Duration::from_secs(24 * 60 * 60);

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session {0}")]
    NotFound(String),
    #[error("{0}")]
    Validation(String),
    #[error("backend failed: {0}")]
    Gateway(#[from] BackendError),
    #[error("session store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Click,
    Box,
    Polygon,
}

/// A pointer gesture in source-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferringEvent {
    pub kind: EventKind,
    pub points_px: Vec<[f64; 2]>,
}

impl ReferringEvent {
    pub fn click(x: f64, y: f64) -> Self {
        Self {
            kind: EventKind::Click,
            points_px: vec![[x, y]],
        }
    }

    pub fn drag(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            kind: EventKind::Box,
            points_px: vec![[x1, y1], [x2, y2]],
        }
    }

    /// Normalized region for an image of `dims`. Drag corners may come in
    /// any order.
    pub fn to_region(&self, dims: ImageDims) -> Result<Region, SessionError> {
        let n = self.points_px.len();
        let ok = match self.kind {
            EventKind::Click => n == 1,
            EventKind::Box => n == 2,
            EventKind::Polygon => n >= 3,
        };
        if !ok {
            return Err(SessionError::Validation(format!(
                "{:?} event needs {} point(s), got {n}",
                self.kind,
                match self.kind {
                    EventKind::Click => "1",
                    EventKind::Box => "2",
                    EventKind::Polygon => "at least 3",
                }
            )));
        }
        let mut pts: Vec<Point> = self.points_px.iter().map(|&p| Point::from(p)).collect();
        let kind = match self.kind {
            EventKind::Click => RegionKind::Point,
            EventKind::Box => {
                let (a, b) = (pts[0], pts[1]);
                pts = vec![Point::new(a.x.min(b.x), a.y.min(b.y)), Point::new(a.x.max(b.x), a.y.max(b.y))];
                RegionKind::Box
            }
            EventKind::Polygon => RegionKind::Polygon,
        };
        normalize_region(&pts, kind, dims).map_err(|e| SessionError::Validation(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionImage {
    pub uri: String,
    pub dims: ImageDims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub role: Role,
    /// Text as sent to the model, regions serialized.
    pub text: String,
    pub regions: Vec<Region>,
    /// Unix milliseconds.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub image: SessionImage,
    pub transcript: Vec<TranscriptTurn>,
    pub history_window: usize,
    pub updated_at: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Persistence for sessions. `get` returns a snapshot; writers replace the
/// whole session.
pub trait SessionStore: Send + Sync {
    fn get(&self, id: &str) -> Result<Option<Session>, SessionError>;
    fn put(&self, session: &Session) -> Result<(), SessionError>;
}

fn expired(session: &Session, ttl: Option<Duration>) -> bool {
    ttl.is_some_and(|t| now_ms().saturating_sub(session.updated_at) > t.as_millis() as u64)
}

#[derive(Default)]
pub struct MemoryStore {
    sessions: Mutex<HashMap<String, Session>>,
    ttl: Option<Duration>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_ttl(ttl: Duration) -> Self {
        Self {
            sessions: Mutex::default(),
            ttl: Some(ttl),
        }
    }
}

impl SessionStore for MemoryStore {
    fn get(&self, id: &str) -> Result<Option<Session>, SessionError> {
        let mut map = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        match map.get(id) {
            Some(s) if expired(s, self.ttl) => {
                map.remove(id);
                Ok(None)
            }
            other => Ok(other.cloned()),
        }
    }

    fn put(&self, session: &Session) -> Result<(), SessionError> {
        self.sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(session.id.clone(), session.clone());
        Ok(())
    }
}

/// One JSON file per session under a directory; survives restarts.
pub struct FileStore {
    dir: PathBuf,
    ttl: Option<Duration>,
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>, ttl: Option<Duration>) -> Result<Self, SessionError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| SessionError::Store(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, ttl })
    }

    fn path(&self, id: &str) -> Option<PathBuf> {
        // ids are hex; anything else never names a file
        id.chars()
            .all(|c| c.is_ascii_hexdigit())
            .then(|| self.dir.join(format!("{id}.json")))
    }

    /// Deletes expired sessions; returns how many were removed.
    pub fn sweep(&self) -> Result<usize, SessionError> {
        let mut removed = 0;
        let entries = fs::read_dir(&self.dir).map_err(|e| SessionError::Store(e.to_string()))?;
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "json") {
                let stale = fs::read(&path)
                    .ok()
                    .and_then(|b| serde_json::from_slice::<Session>(&b).ok())
                    .is_some_and(|s| expired(&s, self.ttl));
                if stale && fs::remove_file(&path).is_ok() {
                    removed += 1;
                }
            }
        }
        Ok(removed)
    }
}

impl SessionStore for FileStore {
    fn get(&self, id: &str) -> Result<Option<Session>, SessionError> {
        let Some(path) = self.path(id) else { return Ok(None) };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(SessionError::Store(e.to_string())),
        };
        let session: Session =
            serde_json::from_slice(&bytes).map_err(|e| SessionError::Store(format!("{}: {e}", path.display())))?;
        if expired(&session, self.ttl) {
            let _ = fs::remove_file(&path);
            return Ok(None);
        }
        Ok(Some(session))
    }

    fn put(&self, session: &Session) -> Result<(), SessionError> {
        let path = self
            .path(&session.id)
            .ok_or_else(|| SessionError::Store(format!("bad session id {}", session.id)))?;
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec(session).map_err(|e| SessionError::Store(e.to_string()))?;
        fs::write(&tmp, body)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| SessionError::Store(e.to_string()))
    }
}

/// Reply to a posted message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostReply {
    pub turn: ChatTurn,
    pub rendered_user_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnView {
    pub role: Role,
    pub text: String,
    pub regions: Vec<Region>,
    /// The same regions in source pixels, for redrawing overlays.
    pub regions_px: Vec<Vec<[f64; 2]>>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub image_uri: String,
    pub width: u32,
    pub height: u32,
    pub history_window: usize,
    pub turns: Vec<TurnView>,
}

/// Merges serialized regions into `text`: each `<region>` marker takes the
/// next region in order, leftovers are appended after a space.
pub fn merge_regions(text: &str, spans: &[String]) -> Result<String, SessionError> {
    let markers = text.matches(REGION_MARKER).count();
    if markers > spans.len() {
        return Err(SessionError::Validation(format!(
            "text has {markers} {REGION_MARKER} marker(s) but only {} event(s)",
            spans.len()
        )));
    }
    let mut out = String::with_capacity(text.len() + spans.iter().map(String::len).sum::<usize>());
    let mut pieces = text.split(REGION_MARKER);
    out.push_str(pieces.next().unwrap_or(""));
    let mut used = 0;
    for piece in pieces {
        out.push_str(&spans[used]);
        used += 1;
        out.push_str(piece);
    }
    for span in &spans[used..] {
        if !out.is_empty() && !out.ends_with(char::is_whitespace) {
            out.push(' ');
        }
        out.push_str(span);
    }
    Ok(out)
}

pub struct SessionManager {
    store: Arc<dyn SessionStore>,
    backend: Arc<dyn Backend>,
    format: RegionFormat,
    history_window: usize,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl SessionManager {
    pub fn new(store: Arc<dyn SessionStore>, backend: Arc<dyn Backend>) -> Self {
        Self {
            store,
            backend,
            format: RegionFormat::default(),
            history_window: DEFAULT_HISTORY_WINDOW,
            locks: Mutex::default(),
        }
    }

    pub fn with_history_window(mut self, turns: usize) -> Self {
        self.history_window = turns;
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn create_session(&self, image_uri: &str, width: u32, height: u32) -> Result<String, SessionError> {
        let dims = ImageDims::new(width, height).map_err(|e| SessionError::Validation(e.to_string()))?;
        if image_uri.trim().is_empty() {
            return Err(SessionError::Validation("image_uri is empty".into()));
        }
        let mut raw = [0u8; 16];
        rand::rng().fill_bytes(&mut raw);
        let session = Session {
            id: hex::encode(raw),
            image: SessionImage {
                uri: image_uri.to_string(),
                dims,
            },
            transcript: Vec::new(),
            history_window: self.history_window,
            updated_at: now_ms(),
        };
        self.store.put(&session)?;
        Ok(session.id)
    }

    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    /// Sends one user message. Posts to the same session are serialized;
    /// a failed backend call leaves the stored transcript untouched.
    pub fn post_message(&self, id: &str, text: &str, events: &[ReferringEvent]) -> Result<PostReply, SessionError> {
        let lock = self.lock_for(id);
        let _held = lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut session = self.store.get(id)?.ok_or_else(|| SessionError::NotFound(id.to_string()))?;

        let regions = events
            .iter()
            .map(|e| e.to_region(session.image.dims))
            .collect::<Result<Vec<_>, _>>()?;
        let spans: Vec<String> = regions.iter().map(|r| serialize_region_with(r, &self.format)).collect();
        let rendered = merge_regions(text, &spans)?;
        if rendered.trim().is_empty() {
            return Err(SessionError::Validation("empty message".into()));
        }

        let history = &session.transcript;
        let mut start = history.len().saturating_sub(session.history_window);
        if history.get(start).is_some_and(|t| t.role != Role::User) {
            start += 1;
        }
        let mut turns: Vec<ChatTurn> = history[start.min(history.len())..]
            .iter()
            .map(|t| ChatTurn {
                role: t.role,
                text: t.text.clone(),
            })
            .collect();
        turns.push(ChatTurn {
            role: Role::User,
            text: rendered.clone(),
        });
        let req = BackendRequest::new(session.image.uri.clone(), session.image.dims, turns)?;
        let resp = self.backend.complete(&req)?;

        let ts = now_ms();
        session.transcript.push(TranscriptTurn {
            role: Role::User,
            text: rendered.clone(),
            regions,
            timestamp: ts,
        });
        session.transcript.push(TranscriptTurn {
            role: Role::Assistant,
            text: resp.text.clone(),
            regions: Vec::new(),
            timestamp: ts,
        });
        session.updated_at = ts;
        self.store.put(&session)?;
        Ok(PostReply {
            turn: ChatTurn {
                role: Role::Assistant,
                text: resp.text,
            },
            rendered_user_text: rendered,
        })
    }

    pub fn get_transcript(&self, id: &str) -> Result<SessionView, SessionError> {
        let s = self.store.get(id)?.ok_or_else(|| SessionError::NotFound(id.to_string()))?;
        let dims = s.image.dims;
        Ok(SessionView {
            session_id: s.id,
            image_uri: s.image.uri,
            width: dims.width(),
            height: dims.height(),
            history_window: s.history_window,
            turns: s
                .transcript
                .into_iter()
                .map(|t| TurnView {
                    regions_px: t
                        .regions
                        .iter()
                        .map(|r| denormalize_region(r, dims).into_iter().map(<[f64; 2]>::from).collect())
                        .collect(),
                    role: t.role,
                    text: t.text,
                    regions: t.regions,
                    timestamp: t.timestamp,
                })
                .collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// HTTP API

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSessionBody {
    pub image_uri: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSessionReply {
    pub session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PostMessageBody {
    pub text: String,
    #[serde(default)]
    pub events: Vec<ReferringEvent>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

pub struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        Self(
            status,
            ErrorBody {
                error: error.into(),
                detail: detail.into(),
            },
        )
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let detail = e.to_string();
        match e {
            SessionError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not_found", detail),
            SessionError::Validation(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", detail),
            SessionError::Gateway(_) => Self::new(StatusCode::BAD_GATEWAY, "backend", detail),
            SessionError::Store(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "store", detail),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type Shared = Arc<SessionManager>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, SessionError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn create_session(
    State(mgr): State<Shared>,
    body: Result<Json<CreateSessionBody>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateSessionReply>), ApiError> {
    let Json(body) = body?;
    let id = blocking(move || mgr.create_session(&body.image_uri, body.width, body.height)).await?;
    Ok((StatusCode::CREATED, Json(CreateSessionReply { session_id: id })))
}

async fn post_message(
    State(mgr): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<PostMessageBody>, JsonRejection>,
) -> Result<Json<PostReply>, ApiError> {
    let Json(body) = body?;
    blocking(move || mgr.post_message(&id, &body.text, &body.events)).await.map(Json)
}

async fn get_session(State(mgr): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    blocking(move || mgr.get_transcript(&id)).await.map(Json)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

pub fn router(manager: Shared) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/healthz", get(healthz))
        .with_state(manager)
}

/// Serves the API on an already bound listener until `shutdown` resolves,
/// then lets in-flight requests finish.
pub async fn serve(
    listener: tokio::net::TcpListener,
    manager: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(manager))
        .with_graceful_shutdown(shutdown)
        .await
}
