//! HTTP surface over the session manager plus the operator CLI commands.

pub mod cli;

use std::collections::VecDeque;
use std::convert::Infallible;
use std::path::{Component, Path};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;
use tim_core::analytics::{render_report, AnalyticsError};
use tim_core::session::{Feed, FeedState, GuidanceRecord, Session, SessionError, SessionManager, SessionMode};
use tim_core::stream_bus::{BusError, ReplaySpeed};

/// Confidence-matrix bin width used when a request does not give one.
pub const DEFAULT_BIN_WIDTH_MS: u64 = 1000;

/// One ingested event as posted over HTTP or listed in a record script.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRequest {
    pub topic_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_ns: Option<u64>,
    pub payload: serde_json::Value,
}

#[derive(Debug, Deserialize)]
pub struct StartRequest {
    #[serde(default)]
    pub task_id: Option<String>,
    pub mode: SessionMode,
    #[serde(default)]
    pub manifest: Option<String>,
    /// Replay pacing, a positive factor or "max" (the default).
    #[serde(default)]
    pub speed: Option<String>,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::UnknownTask(_) | SessionError::UnknownSession(_) => StatusCode::NOT_FOUND,
            SessionError::Finished(_) | SessionError::ReadOnly(_) => StatusCode::CONFLICT,
            SessionError::NotIngestible(_)
            | SessionError::Payload(_)
            | SessionError::InvalidRecording(_)
            | SessionError::Definition { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Bus(b) => match b {
                BusError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
                _ => StatusCode::UNPROCESSABLE_ENTITY,
            },
            SessionError::Reasoning(_) | SessionError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        let status = match e {
            AnalyticsError::UnknownReport(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

type Shared = Arc<SessionManager>;

pub fn router(manager: Shared) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/sessions", get(list_sessions).post(start_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", post(ingest))
        .route("/sessions/{id}/blobs", post(put_blob))
        .route("/sessions/{id}/finish", post(finish))
        .route("/sessions/{id}/guidance", get(guidance_stream))
        .route("/sessions/{id}/outputs", get(outputs_stream))
        .route("/sessions/{id}/analytics/{report}", get(analytics))
        .route("/sessions/{id}/files/{*path}", get(session_file))
        .with_state(manager)
}

/// Binds and serves until ctrl-c.
pub async fn serve(manager: Shared, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(manager))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn list_tasks(State(m): State<Shared>) -> Json<serde_json::Value> {
    let tasks: Vec<_> = m
        .tasks()
        .iter()
        .map(|t| json!({ "task_id": t.task_id, "name": t.name, "total_steps": t.total_steps() }))
        .collect();
    Json(json!(tasks))
}

async fn get_task(State(m): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let t = m.task(&id).ok_or(SessionError::UnknownTask(id))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], t.to_definition_json()).into_response())
}

async fn list_sessions(State(m): State<Shared>) -> Json<serde_json::Value> {
    Json(json!(m.sessions()))
}

async fn start_session(State(m): State<Shared>, Json(req): Json<StartRequest>) -> Result<Response, ApiError> {
    let s = match req.mode {
        SessionMode::Live => {
            let task = req.task_id.ok_or_else(|| bad_request("live sessions need a task_id"))?;
            m.start_live(&task)?
        }
        SessionMode::Replay => {
            let manifest = req.manifest.ok_or_else(|| bad_request("replay sessions need a manifest"))?;
            let speed: ReplaySpeed = req
                .speed
                .as_deref()
                .unwrap_or("max")
                .parse()
                .map_err(|e: BusError| bad_request(e.to_string()))?;
            let dir = m.resolve_recording(&manifest)?;
            let recorded = tim_core::stream_bus::read_manifest(&dir).map_err(SessionError::from)?;
            if let Some(t) = &req.task_id {
                if *t != recorded.task_id {
                    return Err(bad_request(format!("recording is for task {}, not {t}", recorded.task_id)));
                }
            }
            m.start_replay(&manifest, speed)?
        }
    };
    Ok((StatusCode::CREATED, Json(s.descriptor())).into_response())
}

async fn get_session(State(m): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let s = m.session(&id).ok_or(SessionError::UnknownSession(id))?;
    Ok(Json(json!({
        "session": s.descriptor(),
        "errors": s.errors(),
        "failure": s.failure(),
    })))
}

async fn ingest(
    State(m): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<EventRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let s = m.session(&id).ok_or(SessionError::UnknownSession(id))?;
    let ack = s.ingest_json(&req.topic_tag, req.payload, req.ts_ns)?;
    Ok(Json(json!(ack)))
}

async fn put_blob(
    State(m): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> Result<Response, ApiError> {
    let s = m.session(&id).ok_or(SessionError::UnknownSession(id))?;
    let digest = s.put_blob(body.to_vec())?;
    Ok((StatusCode::CREATED, Json(json!({ "blob": digest }))).into_response())
}

async fn finish(State(m): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let s = m.session(&id).ok_or(SessionError::UnknownSession(id))?;
    let report = tokio::task::spawn_blocking(move || s.finish())
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!(report)))
}

#[derive(Debug, Deserialize)]
pub struct StreamQuery {
    /// Index of the first record to send.
    #[serde(default)]
    pub from: usize,
}

struct Cursor<T: 'static> {
    session: Arc<Session>,
    pick: fn(&Session) -> &Feed<T>,
    to_event: fn(&T) -> Event,
    rx: watch::Receiver<FeedState>,
    next: usize,
    done: bool,
    pending: VecDeque<Event>,
}

/// Sends the feed from index `from`, then follows it; ends with an `end`
/// event carrying the descriptor once the session is finished.
fn feed_stream<T: Clone + Send + Sync + 'static>(
    session: Arc<Session>,
    pick: fn(&Session) -> &Feed<T>,
    to_event: fn(&T) -> Event,
    from: usize,
) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = pick(&session).watch();
    let cursor = Cursor { session, pick, to_event, rx, next: from, done: false, pending: VecDeque::new() };
    futures::stream::unfold(cursor, |mut c| async move {
        loop {
            if let Some(e) = c.pending.pop_front() {
                return Some((Ok(e), c));
            }
            if c.done {
                return None;
            }
            let finished = c.rx.borrow_and_update().finished;
            let items = (c.pick)(&c.session).since(c.next);
            if !items.is_empty() {
                for r in &items {
                    c.pending.push_back((c.to_event)(r).id(c.next.to_string()));
                    c.next += 1;
                }
                continue;
            }
            if finished {
                c.done = true;
                let d = serde_json::to_string(&c.session.descriptor()).expect("descriptor serializes");
                c.pending.push_back(Event::default().event("end").data(d));
                continue;
            }
            if c.rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

fn guidance_event(r: &GuidanceRecord) -> Event {
    let name = match r {
        GuidanceRecord::Prompt(_) => "prompt",
        GuidanceRecord::Estimate(_) => "estimate",
    };
    Event::default()
        .event(name)
        .data(serde_json::to_string(r).expect("record serializes"))
}

fn output_event(e: &Arc<tim_core::stream_bus::StreamEntry>) -> Event {
    Event::default()
        .event(e.topic.clone())
        .data(serde_json::to_string(e.as_ref()).expect("entry serializes"))
}

async fn guidance_stream(
    State(m): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StreamQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let s = m.session(&id).ok_or(SessionError::UnknownSession(id))?;
    let stream = feed_stream(s, Session::guidance, guidance_event, q.from);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn outputs_stream(
    State(m): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StreamQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let s = m.session(&id).ok_or(SessionError::UnknownSession(id))?;
    let stream = feed_stream(s, Session::outputs, output_event, q.from);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
pub struct AnalyticsQuery {
    pub bin_width_ms: Option<u64>,
}

fn report_content_type(report: &str) -> &'static str {
    match report {
        "document" => "application/xml",
        "pointcloud" => "text/plain; charset=utf-8",
        _ => "application/json",
    }
}

async fn analytics(
    State(m): State<Shared>,
    UrlPath((id, report)): UrlPath<(String, String)>,
    Query(q): Query<AnalyticsQuery>,
) -> Result<Response, ApiError> {
    let width_ms = q.bin_width_ms.unwrap_or(DEFAULT_BIN_WIDTH_MS);
    if width_ms == 0 {
        return Err(bad_request("bin_width_ms must be positive"));
    }
    let ctype = report_content_type(&report);
    let body = tokio::task::spawn_blocking(move || -> Result<String, ApiError> {
        let (graph, bus) = m.session_bus(&id)?;
        Ok(render_report(&bus, Some(&graph), &report, width_ms * 1_000_000)?)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, ctype)], body).into_response())
}

/// Relative path with only normal components, so it cannot leave the
/// session directory.
fn safe_relative(path: &str) -> Option<&Path> {
    let p = Path::new(path);
    let ok = !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    ok.then_some(p)
}

async fn session_file(
    State(m): State<Shared>,
    UrlPath((id, path)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("no file {path} in session {id}"));
    let rel = safe_relative(&path).ok_or_else(not_found)?;
    if safe_relative(&id).is_none() || id.contains('/') {
        return Err(not_found());
    }
    let full = m.sessions_dir().join(&id).join(rel);
    let bytes = tokio::fs::read(&full).await.map_err(|_| not_found())?;
    let ctype = match full.extension().and_then(|e| e.to_str()) {
        Some("json") => "application/json",
        Some("log") => "application/x-ndjson",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, ctype)], bytes).into_response())
}
