#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use serde_json::{json, Value};
use tim_core::session::SessionManager;

pub struct Server {
    pub base: String,
    pub manager: Arc<SessionManager>,
    pub dir: tempfile::TempDir,
}

pub async fn start_server() -> Server {
    let dir = tempfile::tempdir().unwrap();
    let manager = Arc::new(SessionManager::new(dir.path()).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    let app = tim_service::router(manager.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { base: format!("http://{addr}"), manager, dir }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseEvent {
    pub event: String,
    pub id: Option<String>,
    pub data: Value,
}

/// Incremental reader over a `text/event-stream` response body.
pub struct SseReader {
    body: futures::stream::BoxStream<'static, reqwest::Result<bytes::Bytes>>,
    buf: String,
}

impl SseReader {
    pub async fn open(url: &str) -> SseReader {
        let resp = reqwest::get(url).await.unwrap();
        assert_eq!(resp.status(), 200, "{url}");
        SseReader { body: resp.bytes_stream().boxed(), buf: String::new() }
    }

    /// Next non-comment event, or `None` when the stream ends or stays
    /// silent for `timeout`.
    pub async fn next(&mut self, timeout: Duration) -> Option<SseEvent> {
        loop {
            if let Some(pos) = self.buf.find("\n\n") {
                let block: String = self.buf.drain(..pos + 2).collect();
                let mut ev = SseEvent { event: "message".into(), id: None, data: Value::Null };
                let mut data = String::new();
                for line in block.lines() {
                    if let Some(v) = line.strip_prefix("event:") {
                        ev.event = v.trim().into();
                    } else if let Some(v) = line.strip_prefix("data:") {
                        data.push_str(v.strip_prefix(' ').unwrap_or(v));
                    } else if let Some(v) = line.strip_prefix("id:") {
                        ev.id = Some(v.trim().into());
                    }
                }
                if data.is_empty() {
                    continue;
                }
                ev.data = serde_json::from_str(&data).unwrap_or(Value::String(data));
                return Some(ev);
            }
            match tokio::time::timeout(timeout, self.body.next()).await {
                Ok(Some(Ok(chunk))) => self.buf.push_str(&String::from_utf8_lossy(&chunk)),
                _ => return None,
            }
        }
    }

    /// Events up to and including `end`.
    pub async fn until_end(&mut self, timeout: Duration) -> Vec<SseEvent> {
        let mut out = Vec::new();
        while let Some(e) = self.next(timeout).await {
            let end = e.event == "end";
            out.push(e);
            if end {
                break;
            }
        }
        out
    }
}

pub fn state_event(ts_ns: u64, class: &str, state: &str) -> Value {
    json!({
        "topic_tag": "object_state_event",
        "ts_ns": ts_ns,
        "payload": {"object_class": class, "state_label": state, "confidence": 0.9}
    })
}

pub async fn post(url: &str, body: &Value) -> (u16, Value) {
    let resp = reqwest::Client::new().post(url).json(body).send().await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap_or(Value::Null))
}

pub async fn start_live(base: &str, task: &str) -> String {
    let (status, d) = post(&format!("{base}/sessions"), &json!({"task_id": task, "mode": "live"})).await;
    assert_eq!(status, 201, "{d}");
    d["session_id"].as_str().unwrap().to_string()
}
