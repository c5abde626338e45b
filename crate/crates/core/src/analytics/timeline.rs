use serde::{Deserialize, Serialize};

use super::{entries_or_empty, session_end_ns, step_spans};
use crate::stream_bus::{topics, Bus, MarkerScope, Payload, WorkloadCategory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureSegment {
    pub label: String,
    pub t_start_ns: u64,
    pub t_end_ns: u64,
    pub error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSegment {
    pub category: WorkloadCategory,
    pub t_start_ns: u64,
    pub t_end_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub label: String,
    pub ts_ns: u64,
    pub end: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcedureSource {
    /// Procedure-scope markers were ingested.
    Markers,
    /// Derived from the reasoning step history.
    Steps,
}

/// One session on the timeline. Times are nanoseconds since the session
/// epoch, so rows of different sessions align at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub session_id: String,
    pub end_ns: u64,
    pub procedure_source: ProcedureSource,
    pub procedure_segments: Vec<ProcedureSegment>,
    pub workload_segments: Vec<WorkloadSegment>,
    /// `(ts_ns, confidence)` of every workload sample.
    pub workload_confidence: Vec<(u64, f64)>,
    pub phase_sequence: Vec<PhaseEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notices: Vec<String>,
}

struct ErrorMark {
    step_id: String,
    ts_ns: u64,
}

fn error_marks(bus: &Bus) -> Vec<ErrorMark> {
    [topics::ERRORS, topics::EXTERNAL_ERRORS]
        .into_iter()
        .flat_map(|t| entries_or_empty(bus, t))
        .filter_map(|e| match &e.payload {
            Payload::ErrorEvent(err) => Some(ErrorMark {
                step_id: err.step_id.clone(),
                ts_ns: e.ts_ns,
            }),
            _ => None,
        })
        .collect()
}

fn marker_segments(bus: &Bus, end_ns: u64, errors: &[ErrorMark]) -> Vec<ProcedureSegment> {
    let mut segs: Vec<ProcedureSegment> = Vec::new();
    let mut open: Option<(String, u64)> = None;
    let close = |open: &mut Option<(String, u64)>, at: u64, segs: &mut Vec<ProcedureSegment>| {
        if let Some((label, start)) = open.take() {
            segs.push(ProcedureSegment {
                label,
                t_start_ns: start,
                t_end_ns: at.max(start),
                error: false,
            });
        }
    };
    for e in entries_or_empty(bus, topics::PHASES) {
        let Payload::PhaseMarker(m) = &e.payload else { continue };
        if m.scope != MarkerScope::Procedure {
            continue;
        }
        close(&mut open, e.ts_ns, &mut segs);
        if !m.end {
            open = Some((m.label.clone(), e.ts_ns));
        }
    }
    close(&mut open, end_ns, &mut segs);
    let last = segs.len().saturating_sub(1);
    for (i, s) in segs.iter_mut().enumerate() {
        s.error = errors.iter().any(|m| {
            m.ts_ns >= s.t_start_ns && (m.ts_ns < s.t_end_ns || (i == last && m.ts_ns == s.t_end_ns))
        });
    }
    segs
}

/// Maximal runs of equal category; each run ends where the next begins, the
/// last at the session end.
pub(crate) fn workload_runs(samples: &[(u64, WorkloadCategory)], end_ns: u64) -> Vec<WorkloadSegment> {
    let mut out: Vec<WorkloadSegment> = Vec::new();
    for &(ts, cat) in samples {
        match out.last_mut() {
            Some(last) if last.category == cat => {}
            Some(last) => {
                last.t_end_ns = ts;
                out.push(WorkloadSegment { category: cat, t_start_ns: ts, t_end_ns: ts });
            }
            None => out.push(WorkloadSegment { category: cat, t_start_ns: ts, t_end_ns: ts }),
        }
    }
    if let Some(last) = out.last_mut() {
        last.t_end_ns = end_ns.max(last.t_start_ns);
    }
    out
}

pub fn timeline_row(bus: &Bus) -> TimelineRow {
    let end_ns = session_end_ns(bus);
    let errors = error_marks(bus);
    let mut notices = Vec::new();

    let markers = marker_segments(bus, end_ns, &errors);
    let (procedure_source, procedure_segments) = if !markers.is_empty() {
        (ProcedureSource::Markers, markers)
    } else {
        match step_spans(bus) {
            Ok(spans) => (
                ProcedureSource::Steps,
                spans
                    .into_iter()
                    .map(|(label, span)| ProcedureSegment {
                        error: errors.iter().any(|m| m.step_id == label),
                        label,
                        t_start_ns: span.start_ns,
                        t_end_ns: span.end_ns,
                    })
                    .collect(),
            ),
            Err(e) => {
                notices.push(e.to_string());
                (ProcedureSource::Steps, Vec::new())
            }
        }
    };

    let mut samples = Vec::new();
    let mut workload_confidence = Vec::new();
    if !bus.has_topic(topics::WORKLOAD) {
        notices.push(format!("missing topic {}", topics::WORKLOAD));
    }
    for e in entries_or_empty(bus, topics::WORKLOAD) {
        if let Payload::WorkloadSample(w) = &e.payload {
            samples.push((e.ts_ns, w.category));
            workload_confidence.push((e.ts_ns, w.confidence));
        }
    }

    let phase_sequence = entries_or_empty(bus, topics::PHASES)
        .iter()
        .filter_map(|e| match &e.payload {
            Payload::PhaseMarker(m) if m.scope == MarkerScope::Phase => Some(PhaseEntry {
                label: m.label.clone(),
                ts_ns: e.ts_ns,
                end: m.end,
            }),
            _ => None,
        })
        .collect();

    TimelineRow {
        session_id: bus.session_id().to_string(),
        end_ns,
        procedure_source,
        procedure_segments,
        workload_segments: workload_runs(&samples, end_ns),
        workload_confidence,
        phase_sequence,
        notices,
    }
}

/// Rows for several sessions, ordered by session id.
pub fn timeline_rows(buses: &[&Bus]) -> Vec<TimelineRow> {
    let mut rows: Vec<TimelineRow> = buses.iter().map(|b| timeline_row(b)).collect();
    rows.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    rows
}
