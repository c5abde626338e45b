//! Topic-based session bus: per-topic total order, synchronized snapshots,
//! on-disk persistence and deterministic replay.
//!
//! On disk a session is a directory `sessions/<session_id>/` holding one
//! newline-delimited JSON log per topic (`<topic>.log`, records
//! `{seq, ts_ns, payload:{tag, ...}}`), a `blobs/<hex-digest>` store for
//! frame data, and `manifest.json` with per-topic counts and SHA-256
//! checksums.

mod bus;
mod payload;
mod persist;
mod replay;

use std::path::PathBuf;

use thiserror::Error;

pub use bus::{Bus, StreamEntry, Subscription};
pub use payload::*;
pub use persist::{load_session, persist_session, read_manifest, SessionManifest, TopicRecord};
pub use replay::{replay_into, replay_session, ReplayPlan, ReplaySpeed};

#[derive(Debug, Error)]
pub enum BusError {
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("invalid topic name {0:?}")]
    InvalidTopicName(String),
    #[error("schema mismatch on {topic}: topic carries {expected}, got {got}")]
    SchemaMismatch {
        topic: String,
        expected: SchemaTag,
        got: SchemaTag,
    },
    #[error("timestamp regression on {topic}: {got} < {last}")]
    TimestampRegression { topic: String, last: u64, got: u64 },
    #[error("sequence gap on {topic}: next seq is {expected}, recorded entry has {got}")]
    SeqGap { topic: String, expected: u64, got: u64 },
    #[error("session has no topics")]
    NoTopics,
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("entry count mismatch for {topic}: manifest {expected}, log {got}")]
    CountMismatch {
        topic: String,
        expected: u64,
        got: u64,
    },
    #[error("missing log file {0}")]
    MissingLog(PathBuf),
    #[error("malformed record in {file} line {line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("storage failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid replay speed {0}")]
    InvalidSpeed(String),
}

/// Topic names used by a guidance session.
pub mod topics {
    pub const RGB: &str = "sensor.rgb";
    pub const DEPTH: &str = "sensor.depth";
    pub const POSE: &str = "sensor.pose";
    pub const GAZE: &str = "sensor.gaze";
    pub const DETECTIONS: &str = "perception.detections";
    pub const OBJECT_STATES: &str = "perception.object_states";
    pub const HOI: &str = "perception.hoi";
    pub const WORKLOAD: &str = "workload";
    pub const PHASES: &str = "phases";
    pub const EXTERNAL_ERRORS: &str = "errors.external";
    pub const CONTROL: &str = "control";
    pub const STEPS: &str = "reasoning.steps";
    pub const ADVISORY: &str = "reasoning.advisory";
    pub const ERRORS: &str = "reasoning.errors";
    pub const GUIDANCE: &str = "guidance";
    pub const MEMORY: &str = "memory3d";
    pub const INGEST: &str = "session.ingest";
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::sync::Arc;
    use std::time::Duration;

    fn marker(label: &str) -> Payload {
        Payload::PhaseMarker(PhaseMarker {
            label: label.into(),
            scope: MarkerScope::Phase,
            end: false,
        })
    }

    fn bus_with(topic: &str) -> Bus {
        let bus = Bus::new("s", "t");
        bus.create_topic(topic, SchemaTag::PhaseMarker).unwrap();
        bus
    }

    #[test]
    fn first_publish_is_seq_one() {
        let bus = bus_with("p");
        assert_eq!(bus.publish("p", 0, marker("a")).unwrap(), 1);
        assert_eq!(bus.publish("p", 0, marker("b")).unwrap(), 2);
    }

    #[test]
    fn publish_errors() {
        let bus = bus_with("p");
        assert!(matches!(bus.publish("q", 0, marker("a")), Err(BusError::UnknownTopic(_))));
        let wrong = Payload::StepControl(StepControlEvent {
            action: StepControl::Next,
        });
        assert!(matches!(bus.publish("p", 0, wrong), Err(BusError::SchemaMismatch { .. })));
        bus.publish("p", 10, marker("a")).unwrap();
        assert!(matches!(
            bus.publish("p", 9, marker("b")),
            Err(BusError::TimestampRegression { last: 10, got: 9, .. })
        ));
        // rejected publishes do not consume a seq
        assert_eq!(bus.publish("p", 10, marker("c")).unwrap(), 2);
    }

    #[test]
    fn concurrent_producers_yield_dense_seqs() {
        let bus = Arc::new(bus_with("p"));
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let bus = bus.clone();
                std::thread::spawn(move || {
                    (0..250)
                        .map(|_| bus.publish("p", 0, marker("x")).unwrap())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut seqs: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        seqs.sort_unstable();
        assert_eq!(seqs, (1..=1000).collect::<Vec<_>>());
    }

    #[test]
    fn subscribe_replays_history_then_tails() {
        let bus = Arc::new(bus_with("p"));
        for i in 0..3 {
            bus.publish("p", i, marker("h")).unwrap();
        }
        let mut sub = bus.subscribe("p", 0).unwrap();
        let got: Vec<u64> = (0..3).map(|_| sub.try_next().unwrap().seq).collect();
        assert_eq!(got, vec![1, 2, 3]);
        assert!(sub.next_timeout(Duration::from_millis(20)).is_none());

        let b = bus.clone();
        let t = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(30));
            b.publish("p", 5, marker("live")).unwrap();
        });
        let live = sub.next_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(live.seq, 4);
        t.join().unwrap();

        let mut late = bus.subscribe("p", 2).unwrap();
        assert_eq!(late.try_next().unwrap().seq, 3);
        assert!(bus.subscribe("nope", 0).is_err());
    }

    #[test]
    fn snapshot_latest_cases() {
        let bus = Bus::new("s", "t");
        bus.create_topic("a", SchemaTag::PhaseMarker).unwrap();
        bus.create_topic("b", SchemaTag::PhaseMarker).unwrap();
        bus.publish("a", 5, marker("a5")).unwrap();
        let snap = bus.snapshot_latest(&["a"], 5).unwrap();
        assert_eq!(snap["a"].as_ref().unwrap().ts_ns, 5);

        for t in [1u64, 4, 4, 9] {
            bus.publish("b", t, marker("b")).unwrap();
        }
        let none = bus.snapshot_latest(&["a", "b"], 0).unwrap();
        assert!(none.values().all(Option::is_none));

        // linear-scan oracle
        for t in 0..12u64 {
            let snap = bus.snapshot_latest(&["a", "b"], t).unwrap();
            for name in ["a", "b"] {
                let oracle = bus
                    .entries(name)
                    .unwrap()
                    .into_iter()
                    .filter(|e| e.ts_ns <= t)
                    .last();
                assert_eq!(snap[name], oracle, "topic {name} at {t}");
            }
        }
        assert!(bus.snapshot_latest(&["zzz"], 0).is_err());
    }

    #[test]
    fn two_subscribers_see_identical_transcripts() {
        let bus = Arc::new(bus_with("p"));
        let mut s1 = bus.subscribe("p", 0).unwrap();
        let mut s2 = bus.subscribe("p", 0).unwrap();
        let producers: Vec<_> = (0..3)
            .map(|k| {
                let bus = bus.clone();
                std::thread::spawn(move || {
                    for i in 0..50 {
                        bus.publish("p", 0, marker(&format!("{k}-{i}"))).unwrap();
                    }
                })
            })
            .collect();
        let mut t1 = Vec::new();
        let mut t2 = Vec::new();
        while t1.len() < 150 {
            t1.push(s1.next_timeout(Duration::from_secs(5)).unwrap());
        }
        while t2.len() < 150 {
            t2.push(s2.next_timeout(Duration::from_secs(5)).unwrap());
        }
        for p in producers {
            p.join().unwrap();
        }
        assert_eq!(t1, t2);
        let labels: BTreeSet<_> = t1.iter().map(|e| format!("{:?}", e.payload)).collect();
        assert_eq!(labels.len(), 150);
    }

    #[test]
    fn async_subscription_wakes_on_publish() {
        let bus = Arc::new(bus_with("p"));
        let mut sub = bus.subscribe("p", 0).unwrap();
        let b = bus.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            b.publish("p", 1, marker("x")).unwrap();
        });
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_time()
            .build()
            .unwrap();
        let e = rt.block_on(async { tokio::time::timeout(Duration::from_secs(5), sub.next()).await });
        assert_eq!(e.unwrap().seq, 1);
    }
}
