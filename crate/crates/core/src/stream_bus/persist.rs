use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bus::{valid_topic_name, Bus, StreamEntry};
use super::payload::{Payload, SchemaTag};
use super::BusError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicRecord {
    pub name: String,
    pub tag: SchemaTag,
    pub entries: u64,
    /// Hex SHA-256 of the topic's log file.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub task_id: String,
    pub epoch_wall_clock: String,
    pub topics: Vec<TopicRecord>,
    /// `[min ts_ns, max ts_ns]` over all entries; absent for an empty session.
    pub time_range: Option<(u64, u64)>,
}

impl SessionManifest {
    pub fn epoch(&self) -> Option<DateTime<Utc>> {
        DateTime::parse_from_rfc3339(&self.epoch_wall_clock)
            .ok()
            .map(|d| d.with_timezone(&Utc))
    }
}

#[derive(Serialize, Deserialize)]
struct LogRecord {
    seq: u64,
    ts_ns: u64,
    payload: Payload,
}

fn encode_log(entries: &[std::sync::Arc<StreamEntry>]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in entries {
        let rec = LogRecord {
            seq: e.seq,
            ts_ns: e.ts_ns,
            payload: e.payload.clone(),
        };
        serde_json::to_writer(&mut out, &rec).expect("log record serializes");
        out.push(b'\n');
    }
    out
}

/// Writes every topic, the blob store and the manifest under
/// `sessions_dir/<session_id>/`. Output is assembled in a scratch directory
/// and swapped in, so a failure leaves no partial session behind.
pub fn persist_session(bus: &Bus, sessions_dir: &Path) -> Result<SessionManifest, BusError> {
    let topics = bus.topics();
    if topics.is_empty() {
        return Err(BusError::NoTopics);
    }
    fs::create_dir_all(sessions_dir)?;
    let target = sessions_dir.join(bus.session_id());
    let scratch = sessions_dir.join(format!(".{}.partial", bus.session_id()));
    if scratch.exists() {
        fs::remove_dir_all(&scratch)?;
    }

    let result = write_session(bus, &topics, &scratch);
    match result {
        Ok(manifest) => {
            if target.exists() {
                fs::remove_dir_all(&target)?;
            }
            fs::rename(&scratch, &target)?;
            Ok(manifest)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&scratch);
            Err(e)
        }
    }
}

fn write_session(
    bus: &Bus,
    topics: &[(String, SchemaTag)],
    dir: &Path,
) -> Result<SessionManifest, BusError> {
    fs::create_dir_all(dir.join("blobs"))?;
    let mut records = Vec::new();
    let mut range: Option<(u64, u64)> = None;
    for (name, tag) in topics {
        let entries = bus.entries(name)?;
        for e in &entries {
            range = Some(match range {
                None => (e.ts_ns, e.ts_ns),
                Some((lo, hi)) => (lo.min(e.ts_ns), hi.max(e.ts_ns)),
            });
        }
        let bytes = encode_log(&entries);
        write_file(&dir.join(format!("{name}.log")), &bytes)?;
        records.push(TopicRecord {
            name: name.clone(),
            tag: *tag,
            entries: entries.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    for (digest, bytes) in bus.blobs() {
        write_file(&dir.join("blobs").join(digest), &bytes)?;
    }
    let manifest = SessionManifest {
        session_id: bus.session_id().to_string(),
        task_id: bus.task_id().to_string(),
        epoch_wall_clock: bus.epoch().to_rfc3339_opts(SecondsFormat::Millis, true),
        topics: records,
        time_range: range,
    };
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    write_file(&dir.join("manifest.json"), &text)?;
    Ok(manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), BusError> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_manifest(session_dir: &Path) -> Result<SessionManifest, BusError> {
    let path = session_dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => BusError::MissingLog(path.clone()),
        _ => BusError::Io(e),
    })?;
    serde_json::from_slice(&text).map_err(|e| BusError::Malformed {
        file: "manifest.json".into(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads a persisted session, verifying every checksum and count before
/// anything is returned.
pub fn load_session(session_dir: &Path) -> Result<(SessionManifest, Bus), BusError> {
    let manifest = read_manifest(session_dir)?;
    let epoch = manifest
        .epoch()
        .ok_or_else(|| BusError::Malformed {
            file: "manifest.json".into(),
            line: 0,
            message: format!("bad epoch {}", manifest.epoch_wall_clock),
        })?;
    let bus = Bus::with_epoch(&manifest.session_id, &manifest.task_id, epoch);

    for rec in &manifest.topics {
        if !valid_topic_name(&rec.name) {
            return Err(BusError::InvalidTopicName(rec.name.clone()));
        }
        let file = format!("{}.log", rec.name);
        let path: PathBuf = session_dir.join(&file);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => BusError::MissingLog(path.clone()),
            _ => BusError::Io(e),
        })?;
        if hex::encode(Sha256::digest(&bytes)) != rec.sha256 {
            return Err(BusError::ChecksumMismatch(file));
        }
        bus.create_topic(&rec.name, rec.tag)?;
        let mut count = 0u64;
        for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let r: LogRecord = serde_json::from_slice(line).map_err(|e| BusError::Malformed {
                file: file.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            bus.append_recorded(&StreamEntry {
                topic: rec.name.clone(),
                seq: r.seq,
                ts_ns: r.ts_ns,
                payload: r.payload,
            })?;
            count += 1;
        }
        if count != rec.entries {
            return Err(BusError::CountMismatch {
                topic: rec.name.clone(),
                expected: rec.entries,
                got: count,
            });
        }
    }

    let blob_dir = session_dir.join("blobs");
    if blob_dir.is_dir() {
        for item in fs::read_dir(&blob_dir)? {
            let item = item?;
            let name = item.file_name().to_string_lossy().into_owned();
            let bytes = fs::read(item.path())?;
            if hex::encode(Sha256::digest(&bytes)) != name {
                return Err(BusError::ChecksumMismatch(format!("blobs/{name}")));
            }
            bus.insert_blob_unchecked(name, bytes);
        }
    }
    Ok((manifest, bus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_bus::{MarkerScope, PhaseMarker};

    fn marker(label: &str) -> Payload {
        Payload::PhaseMarker(PhaseMarker {
            label: label.into(),
            scope: MarkerScope::Procedure,
            end: false,
        })
    }

    fn sample_bus() -> Bus {
        let bus = Bus::new("sess-1", "task");
        for topic in ["a", "b"] {
            bus.create_topic(topic, SchemaTag::PhaseMarker).unwrap();
            for i in 0..10 {
                bus.publish(topic, i * 100, marker(&format!("{topic}{i}"))).unwrap();
            }
        }
        bus.put_blob(vec![1, 2, 3]);
        bus
    }

    fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "blobs"] {
            let d = dir.join(sub);
            let mut names: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names {
                if p.is_file() {
                    out.push((p.display().to_string(), fs::read(&p).unwrap()));
                }
            }
        }
        out
    }

    #[test]
    fn manifest_counts_and_reload() {
        let tmp = tempfile::tempdir().unwrap();
        let bus = sample_bus();
        let m = persist_session(&bus, tmp.path()).unwrap();
        assert_eq!(m.topics.len(), 2);
        assert!(m.topics.iter().all(|t| t.entries == 10));
        assert_eq!(m.time_range, Some((0, 900)));

        let (m2, loaded) = load_session(&tmp.path().join("sess-1")).unwrap();
        assert_eq!(m, m2);
        assert_eq!(loaded.entries("a").unwrap(), bus.entries("a").unwrap());
        assert_eq!(loaded.epoch(), bus.epoch());
        assert!(loaded.blob(&hex::encode(Sha256::digest([1u8, 2, 3]))).is_some());
    }

    #[test]
    fn empty_topic_is_zero_entry_file() {
        let tmp = tempfile::tempdir().unwrap();
        let bus = Bus::new("e", "t");
        bus.create_topic("empty", SchemaTag::WorkloadSample).unwrap();
        let m = persist_session(&bus, tmp.path()).unwrap();
        assert_eq!(m.topics[0].entries, 0);
        assert_eq!(m.time_range, None);
        assert_eq!(fs::read(tmp.path().join("e/empty.log")).unwrap().len(), 0);
    }

    #[test]
    fn no_topics_is_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            persist_session(&Bus::new("x", "t"), tmp.path()),
            Err(BusError::NoTopics)
        ));
    }

    #[test]
    fn repersist_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let bus = sample_bus();
        persist_session(&bus, tmp.path()).unwrap();
        let first = read_all(&tmp.path().join("sess-1"));
        persist_session(&bus, tmp.path()).unwrap();
        let second = read_all(&tmp.path().join("sess-1"));
        assert_eq!(first, second);
        assert!(!tmp.path().join(".sess-1.partial").exists());
    }

    #[test]
    fn corrupted_log_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        persist_session(&sample_bus(), tmp.path()).unwrap();
        let dir = tmp.path().join("sess-1");
        let mut bytes = fs::read(dir.join("a.log")).unwrap();
        bytes[10] ^= 1;
        fs::write(dir.join("a.log"), bytes).unwrap();
        assert!(matches!(load_session(&dir), Err(BusError::ChecksumMismatch(_))));

        fs::remove_file(dir.join("a.log")).unwrap();
        assert!(matches!(load_session(&dir), Err(BusError::MissingLog(_))));
    }
}
