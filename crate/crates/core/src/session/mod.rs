//! Session lifecycle: live ingest, replay of recordings, and the ordered
//! guidance and output feeds clients follow.

mod engine;
mod registry;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::watch;

use crate::reasoning::{Forest, GuidanceConfig, TaskError};
use crate::stream_bus::{load_session, persist_session, Bus, BusError, Payload, ReplaySpeed, SchemaTag, SessionManifest, StreamEntry};
use crate::task_model::TaskGraph;

pub use engine::{input_topic, recorded_inputs, Emitted, Engine, EngineOptions, GuidanceRecord};
pub use registry::{builtin_tasks, TaskRegistry};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is finished")]
    Finished(String),
    #[error("session {0} is a replay and read-only")]
    ReadOnly(String),
    #[error("{0} events cannot be ingested")]
    NotIngestible(SchemaTag),
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("reasoning: {0}")]
    Reasoning(String),
    #[error("task definition {path}: {message}")]
    Definition { path: PathBuf, message: String },
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("storage failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Live,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub session_id: String,
    pub task_id: String,
    pub mode: SessionMode,
    pub state: SessionState,
    pub created_at: String,
    /// Recorded session a replay is driven from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub topic: String,
    pub seq: u64,
    pub ts_ns: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinishReport {
    pub session: SessionDescriptor,
    pub errors: Vec<TaskError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<SessionManifest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedState {
    pub len: usize,
    pub finished: bool,
}

/// Append-only record list with a change signal. Readers keep an index and
/// wait on the watch channel for more.
pub struct Feed<T> {
    items: Mutex<Vec<T>>,
    tx: watch::Sender<FeedState>,
}

impl<T: Clone> Feed<T> {
    fn new() -> Self {
        Feed {
            items: Mutex::new(Vec::new()),
            tx: watch::Sender::new(FeedState { len: 0, finished: false }),
        }
    }

    fn extend(&self, new: impl IntoIterator<Item = T>) {
        let mut items = self.items.lock().unwrap();
        items.extend(new);
        let len = items.len();
        self.tx.send_modify(|s| s.len = len);
    }

    fn close(&self) {
        self.tx.send_modify(|s| s.finished = true);
    }

    pub fn since(&self, from: usize) -> Vec<T> {
        let items = self.items.lock().unwrap();
        items.get(from..).map(<[T]>::to_vec).unwrap_or_default()
    }

    pub fn all(&self) -> Vec<T> {
        self.since(0)
    }

    pub fn state(&self) -> FeedState {
        *self.tx.borrow()
    }

    pub fn watch(&self) -> watch::Receiver<FeedState> {
        self.tx.subscribe()
    }

    /// Blocks until the feed is finished or `timeout` passes.
    pub fn wait_finished(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.state().finished {
                return true;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        self.state().finished
    }
}

pub struct Session {
    descriptor: Mutex<SessionDescriptor>,
    graph: Arc<TaskGraph>,
    bus: Arc<Bus>,
    engine: Mutex<Engine>,
    guidance: Feed<GuidanceRecord>,
    outputs: Feed<Arc<StreamEntry>>,
    failure: Mutex<Option<String>>,
    sessions_dir: PathBuf,
}

impl Session {
    fn start(
        descriptor: SessionDescriptor,
        graph: Arc<TaskGraph>,
        bus: Arc<Bus>,
        options: EngineOptions,
        sessions_dir: PathBuf,
    ) -> Result<Arc<Self>, SessionError> {
        let (engine, first) = Engine::start(bus.clone(), graph.clone(), options)?;
        let s = Session {
            descriptor: Mutex::new(descriptor),
            graph,
            bus,
            engine: Mutex::new(engine),
            guidance: Feed::new(),
            outputs: Feed::new(),
            failure: Mutex::new(None),
            sessions_dir,
        };
        s.publish(first);
        Ok(Arc::new(s))
    }

    fn publish(&self, e: Emitted) {
        self.guidance.extend(e.records);
        self.outputs.extend(e.outputs);
    }

    pub fn descriptor(&self) -> SessionDescriptor {
        self.descriptor.lock().unwrap().clone()
    }

    pub fn id(&self) -> String {
        self.descriptor.lock().unwrap().session_id.clone()
    }

    pub fn graph(&self) -> &Arc<TaskGraph> {
        &self.graph
    }

    pub fn bus(&self) -> &Arc<Bus> {
        &self.bus
    }

    pub fn guidance(&self) -> &Feed<GuidanceRecord> {
        &self.guidance
    }

    pub fn outputs(&self) -> &Feed<Arc<StreamEntry>> {
        &self.outputs
    }

    /// Reason a replay stopped early, if it did.
    pub fn failure(&self) -> Option<String> {
        self.failure.lock().unwrap().clone()
    }

    pub fn errors(&self) -> Vec<TaskError> {
        self.engine.lock().unwrap().reasoning().errors().to_vec()
    }

    fn writable(&self) -> Result<(), SessionError> {
        let d = self.descriptor.lock().unwrap();
        if d.mode == SessionMode::Replay {
            return Err(SessionError::ReadOnly(d.session_id.clone()));
        }
        if d.state == SessionState::Finished {
            return Err(SessionError::Finished(d.session_id.clone()));
        }
        Ok(())
    }

    /// Publishes an event and runs it through reasoning before returning.
    pub fn ingest(&self, payload: Payload, ts_ns: Option<u64>) -> Result<Ack, SessionError> {
        let mut engine = self.engine.lock().unwrap();
        self.writable()?;
        let (entry, out) = engine.ingest(payload, ts_ns)?;
        let notices = out.notices.clone();
        self.publish(out);
        Ok(Ack {
            topic: entry.topic.clone(),
            seq: entry.seq,
            ts_ns: entry.ts_ns,
            notices,
        })
    }

    /// Same as [`Session::ingest`] with the payload given as a schema tag
    /// and untagged JSON body.
    pub fn ingest_json(&self, tag: &str, body: serde_json::Value, ts_ns: Option<u64>) -> Result<Ack, SessionError> {
        let payload = Payload::from_tagged(tag, body).map_err(SessionError::Payload)?;
        self.ingest(payload, ts_ns)
    }

    /// Stores frame bytes for later `*_frame_ref` events; returns the digest.
    pub fn put_blob(&self, bytes: Vec<u8>) -> Result<String, SessionError> {
        let _engine = self.engine.lock().unwrap();
        self.writable()?;
        Ok(self.bus.put_blob(bytes))
    }

    /// Closes a live session and persists it.
    pub fn finish(&self) -> Result<FinishReport, SessionError> {
        let mut engine = self.engine.lock().unwrap();
        self.writable()?;
        let out = engine.finish()?;
        self.publish(out);
        let manifest = persist_session(&self.bus, &self.sessions_dir)?;
        self.mark_finished();
        Ok(FinishReport {
            session: self.descriptor(),
            errors: engine.reasoning().errors().to_vec(),
            manifest: Some(manifest),
        })
    }

    fn mark_finished(&self) {
        self.descriptor.lock().unwrap().state = SessionState::Finished;
        self.guidance.close();
        self.outputs.close();
    }

    fn run_replay(&self, inputs: Vec<Arc<StreamEntry>>, speed: ReplaySpeed) {
        let result = (|| -> Result<(), SessionError> {
            let t0 = inputs.first().map_or(0, |e| e.ts_ns);
            let start = Instant::now();
            for e in &inputs {
                if let ReplaySpeed::Factor(f) = speed {
                    let due = start + Duration::from_secs_f64(e.ts_ns.saturating_sub(t0) as f64 / 1e9 / f);
                    let now = Instant::now();
                    if due > now {
                        std::thread::sleep(due - now);
                    }
                }
                let mut engine = self.engine.lock().unwrap();
                let out = engine.apply_recorded(e)?;
                self.publish(out);
            }
            let out = self.engine.lock().unwrap().finish()?;
            self.publish(out);
            Ok(())
        })();
        if let Err(e) = result {
            tracing::warn!(session = %self.id(), error = %e, "replay stopped");
            *self.failure.lock().unwrap() = Some(e.to_string());
        }
        self.mark_finished();
    }
}

/// Owns the task registry and every session started by this process.
pub struct SessionManager {
    data_dir: PathBuf,
    registry: RwLock<TaskRegistry>,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    counter: AtomicU64,
    pub guidance: GuidanceConfig,
}

impl SessionManager {
    /// Loads builtin tasks plus `data_dir/tasks/*.json`.
    pub fn new(data_dir: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let data_dir = data_dir.into();
        let mut registry = TaskRegistry::builtin();
        registry.load_dir(&data_dir.join("tasks"))?;
        Ok(SessionManager {
            data_dir,
            registry: RwLock::new(registry),
            sessions: RwLock::new(BTreeMap::new()),
            counter: AtomicU64::new(0),
            guidance: GuidanceConfig::default(),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.data_dir.join("sessions")
    }

    pub fn task(&self, task_id: &str) -> Option<Arc<TaskGraph>> {
        self.registry.read().unwrap().get(task_id)
    }

    pub fn tasks(&self) -> Vec<Arc<TaskGraph>> {
        self.registry.read().unwrap().list()
    }

    pub fn register_task(&self, graph: TaskGraph) {
        self.registry.write().unwrap().insert(graph);
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    pub fn sessions(&self) -> Vec<SessionDescriptor> {
        self.sessions.read().unwrap().values().map(|s| s.descriptor()).collect()
    }

    /// Advisory forest for the task, from `models/<task>.forest.json`.
    pub fn forest(&self, task_id: &str) -> Result<Option<Arc<Forest>>, SessionError> {
        let path = self.data_dir.join("models").join(format!("{task_id}.forest.json"));
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        Forest::from_json(&text)
            .map(|f| Some(Arc::new(f)))
            .map_err(|e| SessionError::Definition { path, message: e.to_string() })
    }

    fn options(&self, task_id: &str) -> Result<EngineOptions, SessionError> {
        Ok(EngineOptions {
            guidance: self.guidance.clone(),
            forest: self.forest(task_id)?,
            ..EngineOptions::default()
        })
    }

    fn fresh_id(&self, task_id: &str) -> String {
        let stamp = Utc::now().format("%Y%m%dT%H%M%S");
        loop {
            let n = self.counter.fetch_add(1, Ordering::Relaxed) + 1;
            let id = format!("{task_id}-{stamp}-{n}");
            if !self.sessions.read().unwrap().contains_key(&id) && !self.sessions_dir().join(&id).exists() {
                return id;
            }
        }
    }

    fn now() -> String {
        Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
    }

    pub fn start_live(&self, task_id: &str) -> Result<Arc<Session>, SessionError> {
        let graph = self.task(task_id).ok_or_else(|| SessionError::UnknownTask(task_id.into()))?;
        let id = self.fresh_id(task_id);
        let bus = Arc::new(Bus::new(&id, task_id));
        let descriptor = SessionDescriptor {
            session_id: id.clone(),
            task_id: task_id.into(),
            mode: SessionMode::Live,
            state: SessionState::Running,
            created_at: Self::now(),
            source: None,
        };
        let s = Session::start(descriptor, graph, bus, self.options(task_id)?, self.sessions_dir())?;
        self.sessions.write().unwrap().insert(id, s.clone());
        Ok(s)
    }

    /// Directory of a recorded session given its id, its directory, or its
    /// manifest file.
    pub fn resolve_recording(&self, reference: &str) -> Result<PathBuf, SessionError> {
        let by_id = self.sessions_dir().join(reference);
        if !reference.contains(['/', '\\']) && by_id.join("manifest.json").is_file() {
            return Ok(by_id);
        }
        let p = PathBuf::from(reference);
        let dir = if p.file_name().is_some_and(|n| n == "manifest.json") {
            p.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            p
        };
        if dir.join("manifest.json").is_file() {
            Ok(dir)
        } else {
            Err(SessionError::UnknownSession(reference.into()))
        }
    }

    /// Verifies a recording and starts replaying it in the background. The
    /// replay bus carries the recorded session identity; the replay session
    /// itself gets a new id and is not persisted.
    pub fn start_replay(&self, reference: &str, speed: ReplaySpeed) -> Result<Arc<Session>, SessionError> {
        let dir = self.resolve_recording(reference)?;
        let (manifest, source) = load_session(&dir)?;
        let graph = self
            .task(&manifest.task_id)
            .ok_or_else(|| SessionError::UnknownTask(manifest.task_id.clone()))?;
        let inputs = recorded_inputs(&source)?;
        let bus = Arc::new(Bus::with_epoch(source.session_id(), source.task_id(), source.epoch()));
        for (digest, bytes) in source.blobs() {
            bus.insert_blob_unchecked(digest, bytes.as_ref().clone());
        }
        let id = self.fresh_id(&manifest.task_id);
        let descriptor = SessionDescriptor {
            session_id: id.clone(),
            task_id: manifest.task_id.clone(),
            mode: SessionMode::Replay,
            state: SessionState::Running,
            created_at: Self::now(),
            source: Some(manifest.session_id.clone()),
        };
        let s = Session::start(descriptor, graph, bus, self.options(&manifest.task_id)?, self.sessions_dir())?;
        self.sessions.write().unwrap().insert(id, s.clone());
        let runner = s.clone();
        std::thread::Builder::new()
            .name(format!("replay-{}", manifest.session_id))
            .spawn(move || runner.run_replay(inputs, speed))?;
        Ok(s)
    }

    /// Bus for analytics: an in-memory session, or a persisted one by id.
    pub fn session_bus(&self, id: &str) -> Result<(Arc<TaskGraph>, Arc<Bus>), SessionError> {
        if let Some(s) = self.session(id) {
            return Ok((s.graph.clone(), s.bus.clone()));
        }
        let dir = self.sessions_dir().join(id);
        if id.contains(['/', '\\', '.']) || !dir.join("manifest.json").is_file() {
            return Err(SessionError::UnknownSession(id.into()));
        }
        let (manifest, bus) = load_session(&dir)?;
        let graph = self
            .task(&manifest.task_id)
            .ok_or_else(|| SessionError::UnknownTask(manifest.task_id.clone()))?;
        Ok((graph, Arc::new(bus)))
    }
}
