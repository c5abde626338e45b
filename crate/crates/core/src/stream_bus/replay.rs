use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::bus::{Bus, StreamEntry};
use super::persist::{load_session, SessionManifest};
use super::BusError;

/// Replay pacing: a positive speed-up factor or as fast as possible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplaySpeed {
    Max,
    Factor(f64),
}

impl ReplaySpeed {
    pub fn factor(f: f64) -> Result<Self, BusError> {
        if f.is_finite() && f > 0.0 {
            Ok(ReplaySpeed::Factor(f))
        } else {
            Err(BusError::InvalidSpeed(f.to_string()))
        }
    }
}

impl FromStr for ReplaySpeed {
    type Err = BusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("max") {
            return Ok(ReplaySpeed::Max);
        }
        let f: f64 = s.parse().map_err(|_| BusError::InvalidSpeed(s.to_string()))?;
        ReplaySpeed::factor(f)
    }
}

impl fmt::Display for ReplaySpeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplaySpeed::Max => f.write_str("max"),
            ReplaySpeed::Factor(x) => write!(f, "{x}"),
        }
    }
}

/// Recorded entries of selected topics merged into one playback order:
/// by `ts_ns`, then topic name, then seq.
pub struct ReplayPlan {
    entries: Vec<Arc<StreamEntry>>,
}

impl ReplayPlan {
    pub fn new(source: &Bus, include: impl Fn(&str) -> bool) -> Result<Self, BusError> {
        let mut entries = Vec::new();
        for (name, _) in source.topics() {
            if include(&name) {
                entries.extend(source.entries(&name)?);
            }
        }
        entries.sort_by(|a, b| {
            (a.ts_ns, &a.topic, a.seq).cmp(&(b.ts_ns, &b.topic, b.seq))
        });
        Ok(ReplayPlan { entries })
    }

    pub fn entries(&self) -> &[Arc<StreamEntry>] {
        &self.entries
    }

    /// Hands each entry to `sink` at its scaled offset from the first entry.
    pub fn run<E>(
        &self,
        speed: ReplaySpeed,
        mut sink: impl FnMut(&StreamEntry) -> Result<(), E>,
    ) -> Result<(), E> {
        let Some(first) = self.entries.first() else {
            return Ok(());
        };
        let t0 = first.ts_ns;
        let start = Instant::now();
        for e in &self.entries {
            if let ReplaySpeed::Factor(f) = speed {
                let offset = Duration::from_secs_f64((e.ts_ns - t0) as f64 / 1e9 / f);
                let due = start + offset;
                let now = Instant::now();
                if due > now {
                    std::thread::sleep(due - now);
                }
            }
            sink(e)?;
        }
        Ok(())
    }
}

/// Replays every topic of `source` into `target`, preserving seq, ts_ns and
/// payload. Topics are declared on `target` up front so subscribers can
/// attach before playback starts.
pub fn replay_into(source: &Bus, target: &Bus, speed: ReplaySpeed) -> Result<(), BusError> {
    for (name, tag) in source.topics() {
        target.create_topic(&name, tag)?;
    }
    for (digest, bytes) in source.blobs() {
        target.insert_blob_unchecked(digest, bytes.as_ref().clone());
    }
    ReplayPlan::new(source, |_| true)?.run(speed, |e| target.append_recorded(e))
}

/// Verifies and loads a persisted session, then replays it into a fresh bus
/// carrying the recorded session identity.
pub fn replay_session(
    session_dir: &Path,
    speed: ReplaySpeed,
) -> Result<(SessionManifest, Bus), BusError> {
    let (manifest, source) = load_session(session_dir)?;
    let target = Bus::with_epoch(source.session_id(), source.task_id(), source.epoch());
    replay_into(&source, &target, speed)?;
    Ok((manifest, target))
}
