use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::watch;

use super::payload::{Payload, SchemaTag};
use super::BusError;

/// One timestamped, sequence-numbered payload on a named topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub topic: String,
    pub seq: u64,
    pub ts_ns: u64,
    pub payload: Payload,
}

#[derive(Default)]
struct TopicLog {
    entries: Vec<Arc<StreamEntry>>,
}

impl TopicLog {
    fn last_ts(&self) -> Option<u64> {
        self.entries.last().map(|e| e.ts_ns)
    }
}

pub(crate) struct Topic {
    pub(crate) name: String,
    pub(crate) tag: SchemaTag,
    log: Mutex<TopicLog>,
    arrived: Condvar,
    notify: watch::Sender<u64>,
}

impl Topic {
    fn new(name: String, tag: SchemaTag) -> Self {
        let (notify, _) = watch::channel(0);
        Topic {
            name,
            tag,
            log: Mutex::new(TopicLog::default()),
            arrived: Condvar::new(),
            notify,
        }
    }

    fn append_with(
        &self,
        ts_ns: u64,
        payload: Payload,
        expect_seq: Option<u64>,
    ) -> Result<u64, BusError> {
        if payload.tag() != self.tag {
            return Err(BusError::SchemaMismatch {
                topic: self.name.clone(),
                expected: self.tag,
                got: payload.tag(),
            });
        }
        let mut log = self.log.lock().expect("topic lock poisoned");
        if let Some(last) = log.last_ts() {
            if ts_ns < last {
                return Err(BusError::TimestampRegression {
                    topic: self.name.clone(),
                    last,
                    got: ts_ns,
                });
            }
        }
        let seq = log.entries.len() as u64 + 1;
        if let Some(expected) = expect_seq {
            if expected != seq {
                return Err(BusError::SeqGap {
                    topic: self.name.clone(),
                    expected: seq,
                    got: expected,
                });
            }
        }
        log.entries.push(Arc::new(StreamEntry {
            topic: self.name.clone(),
            seq,
            ts_ns,
            payload,
        }));
        drop(log);
        self.arrived.notify_all();
        self.notify.send_replace(seq);
        Ok(seq)
    }

    fn get(&self, seq: u64) -> Option<Arc<StreamEntry>> {
        let log = self.log.lock().expect("topic lock poisoned");
        seq.checked_sub(1)
            .and_then(|i| log.entries.get(i as usize))
            .cloned()
    }

    pub(crate) fn entries(&self) -> Vec<Arc<StreamEntry>> {
        self.log.lock().expect("topic lock poisoned").entries.clone()
    }

    fn len(&self) -> u64 {
        self.log.lock().expect("topic lock poisoned").entries.len() as u64
    }

    fn latest_at(&self, t_ns: u64) -> Option<Arc<StreamEntry>> {
        let log = self.log.lock().expect("topic lock poisoned");
        let n = log.entries.partition_point(|e| e.ts_ns <= t_ns);
        n.checked_sub(1).map(|i| log.entries[i].clone())
    }
}

/// In-process topic bus for one session. Topics are append-only logs with
/// per-topic total order; subscribers hold independent cursors, so publishers
/// never wait on them.
pub struct Bus {
    session_id: String,
    task_id: String,
    epoch: DateTime<Utc>,
    topics: RwLock<BTreeMap<String, Arc<Topic>>>,
    blobs: Mutex<BTreeMap<String, Arc<Vec<u8>>>>,
}

impl Bus {
    pub fn new(session_id: impl Into<String>, task_id: impl Into<String>) -> Self {
        Self::with_epoch(session_id, task_id, Utc::now())
    }

    pub fn with_epoch(
        session_id: impl Into<String>,
        task_id: impl Into<String>,
        epoch: DateTime<Utc>,
    ) -> Self {
        // Millisecond precision keeps the manifest text stable across save/load.
        let epoch = DateTime::parse_from_rfc3339(&epoch.to_rfc3339_opts(SecondsFormat::Millis, true))
            .expect("formatted epoch parses")
            .with_timezone(&Utc);
        Bus {
            session_id: session_id.into(),
            task_id: task_id.into(),
            epoch,
            topics: RwLock::new(BTreeMap::new()),
            blobs: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn epoch(&self) -> DateTime<Utc> {
        self.epoch
    }

    /// Nanoseconds elapsed since the session epoch on the wall clock.
    pub fn now_ns(&self) -> u64 {
        (Utc::now() - self.epoch)
            .num_nanoseconds()
            .map_or(0, |n| n.max(0) as u64)
    }

    /// Declares a topic. Re-declaring with the same tag is a no-op.
    pub fn create_topic(&self, name: &str, tag: SchemaTag) -> Result<(), BusError> {
        if !valid_topic_name(name) {
            return Err(BusError::InvalidTopicName(name.to_string()));
        }
        let mut topics = self.topics.write().expect("bus lock poisoned");
        match topics.get(name) {
            Some(t) if t.tag == tag => Ok(()),
            Some(t) => Err(BusError::SchemaMismatch {
                topic: name.to_string(),
                expected: t.tag,
                got: tag,
            }),
            None => {
                topics.insert(name.to_string(), Arc::new(Topic::new(name.to_string(), tag)));
                Ok(())
            }
        }
    }

    pub(crate) fn topic(&self, name: &str) -> Result<Arc<Topic>, BusError> {
        self.topics
            .read()
            .expect("bus lock poisoned")
            .get(name)
            .cloned()
            .ok_or_else(|| BusError::UnknownTopic(name.to_string()))
    }

    pub fn has_topic(&self, name: &str) -> bool {
        self.topics.read().expect("bus lock poisoned").contains_key(name)
    }

    /// `(name, tag)` of every topic, sorted by name.
    pub fn topics(&self) -> Vec<(String, SchemaTag)> {
        self.topics
            .read()
            .expect("bus lock poisoned")
            .values()
            .map(|t| (t.name.clone(), t.tag))
            .collect()
    }

    /// Atomically assigns the next sequence number and appends.
    pub fn publish(&self, topic: &str, ts_ns: u64, payload: Payload) -> Result<u64, BusError> {
        self.topic(topic)?.append_with(ts_ns, payload, None)
    }

    /// Appends a recorded entry, keeping its original sequence number.
    pub fn append_recorded(&self, entry: &StreamEntry) -> Result<(), BusError> {
        self.topic(&entry.topic)?
            .append_with(entry.ts_ns, entry.payload.clone(), Some(entry.seq))
            .map(|_| ())
    }

    pub fn subscribe(&self, topic: &str, from_seq: u64) -> Result<Subscription, BusError> {
        let topic = self.topic(topic)?;
        let rx = topic.notify.subscribe();
        Ok(Subscription {
            topic,
            cursor: from_seq,
            rx,
        })
    }

    /// Full history of a topic in seq order.
    pub fn entries(&self, topic: &str) -> Result<Vec<Arc<StreamEntry>>, BusError> {
        Ok(self.topic(topic)?.entries())
    }

    pub fn len(&self, topic: &str) -> Result<u64, BusError> {
        Ok(self.topic(topic)?.len())
    }

    /// Latest entry with `ts_ns <= t_ns` for each requested topic.
    pub fn snapshot_latest(
        &self,
        topics: &[&str],
        t_ns: u64,
    ) -> Result<BTreeMap<String, Option<Arc<StreamEntry>>>, BusError> {
        let resolved = topics
            .iter()
            .map(|name| self.topic(name))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(resolved
            .into_iter()
            .map(|t| (t.name.clone(), t.latest_at(t_ns)))
            .collect())
    }

    /// Stores a blob and returns its hex digest.
    pub fn put_blob(&self, bytes: Vec<u8>) -> String {
        let digest = hex::encode(Sha256::digest(&bytes));
        self.blobs
            .lock()
            .expect("blob lock poisoned")
            .entry(digest.clone())
            .or_insert_with(|| Arc::new(bytes));
        digest
    }

    pub fn blob(&self, digest: &str) -> Option<Arc<Vec<u8>>> {
        self.blobs.lock().expect("blob lock poisoned").get(digest).cloned()
    }

    pub(crate) fn blobs(&self) -> Vec<(String, Arc<Vec<u8>>)> {
        self.blobs
            .lock()
            .expect("blob lock poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub(crate) fn insert_blob_unchecked(&self, digest: String, bytes: Vec<u8>) {
        self.blobs
            .lock()
            .expect("blob lock poisoned")
            .insert(digest, Arc::new(bytes));
    }
}

pub(crate) fn valid_topic_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name != "manifest"
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Cursor over one topic. Yields every entry with `seq > from_seq`, then
/// follows the live tail.
pub struct Subscription {
    topic: Arc<Topic>,
    cursor: u64,
    rx: watch::Receiver<u64>,
}

impl Subscription {
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn try_next(&mut self) -> Option<Arc<StreamEntry>> {
        let entry = self.topic.get(self.cursor + 1)?;
        self.cursor += 1;
        Some(entry)
    }

    /// Blocks until the next entry arrives or `timeout` elapses.
    pub fn next_timeout(&mut self, timeout: Duration) -> Option<Arc<StreamEntry>> {
        let deadline = Instant::now() + timeout;
        let mut log = self.topic.log.lock().expect("topic lock poisoned");
        loop {
            if let Some(e) = log.entries.get(self.cursor as usize) {
                self.cursor += 1;
                return Some(e.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            log = self
                .topic
                .arrived
                .wait_timeout(log, deadline - now)
                .expect("topic lock poisoned")
                .0;
        }
    }

    /// Waits asynchronously for the next entry.
    pub async fn next(&mut self) -> Arc<StreamEntry> {
        loop {
            if let Some(e) = self.try_next() {
                return e;
            }
            if self.rx.changed().await.is_err() {
                // The sender lives inside the topic, which this subscription keeps alive.
                unreachable!("topic notifier dropped while subscribed");
            }
        }
    }
}
