//! Post-hoc analytics over a session's topics: model-output confidence
//! matrices, timelines and per-procedure summaries, evaluation metrics,
//! spatial products (point clouds, gaze dwell, trajectories) and an XML
//! session document.
//!
//! Everything here is a pure read of a [`Bus`], so a live session and its
//! persisted replay give the same reports.

mod confidence;
mod document;
mod metrics;
mod spatial;
mod summary;
mod timeline;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream_bus::{topics, Bus, BusError, Payload, StreamEntry};
use crate::reasoning::EstimateSource;
use std::sync::Arc;

pub use confidence::{
    collect_outputs, confidence_matrix, global_summaries, Aggregation, ConfidenceMatrix, GlobalSummary,
    MatrixRow, OutputCategory, OutputSample,
};
pub use document::{session_document, session_document_from_bus, DocumentStep};
pub use metrics::{eval_metrics, ClassMetrics, EvalReport, MeanStd};
pub use spatial::{
    build_point_cloud, depth_frames_from_bus, gaze_dwell, gaze_from_bus, point_cloud_ply, trajectories,
    CloudPoint, DepthFrame, GazeDwell, GazeRay, Trajectory, DEFAULT_GAZE_DEPTH_M,
};
pub use summary::{phi_coefficient, summary_matrix, SummaryCell};
pub use timeline::{timeline_row, timeline_rows, PhaseEntry, ProcedureSegment, TimelineRow, WorkloadSegment};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("bin width must be positive")]
    ZeroBinWidth,
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("prediction and truth lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    Empty,
    #[error("depth frame has {got} values, camera expects {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("stride must be positive")]
    ZeroStride,
    #[error("cell size must be positive")]
    CellSize,
    #[error("missing topic {0}")]
    MissingTopic(&'static str),
    #[error("unknown report {0}")]
    UnknownReport(String),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("xml: {0}")]
    Xml(String),
}

/// A time span in nanoseconds since the session epoch, end exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start_ns: u64,
    pub end_ns: u64,
}

/// Latest timestamp on any topic; the session end for open-ended segments.
pub fn session_end_ns(bus: &Bus) -> u64 {
    bus.topics()
        .iter()
        .filter_map(|(name, _)| bus.entries(name).ok()?.last().map(|e| e.ts_ns))
        .max()
        .unwrap_or(0)
}

pub(crate) fn entries_or_empty(bus: &Bus, topic: &str) -> Vec<Arc<StreamEntry>> {
    bus.entries(topic).unwrap_or_default()
}

/// Graph-source step entries from the reasoning topic: `(ts_ns, step_id)`.
pub(crate) fn step_entries(bus: &Bus) -> Result<Vec<(u64, String)>, AnalyticsError> {
    if !bus.has_topic(topics::STEPS) {
        return Err(AnalyticsError::MissingTopic(topics::STEPS));
    }
    Ok(entries_or_empty(bus, topics::STEPS)
        .iter()
        .filter_map(|e| match &e.payload {
            Payload::StepEstimate(s) if s.source == EstimateSource::Graph => Some((e.ts_ns, s.step_id.clone())),
            _ => None,
        })
        .collect())
}

/// Step segments: each graph estimate holds until the next one or the session end.
pub(crate) fn step_spans(bus: &Bus) -> Result<Vec<(String, Span)>, AnalyticsError> {
    let entries = step_entries(bus)?;
    let end = session_end_ns(bus);
    Ok(entries
        .iter()
        .enumerate()
        .map(|(i, (ts, id))| {
            let stop = entries.get(i + 1).map_or(end, |n| n.0).max(*ts);
            (id.clone(), Span { start_ns: *ts, end_ns: stop })
        })
        .collect())
}

pub const REPORTS: [&str; 7] = [
    "confidence-matrix",
    "summaries",
    "timeline",
    "summary-matrix",
    "document",
    "pointcloud",
    "trajectories",
];

/// Rendered report for the service and CLI. JSON reports come back as
/// pretty JSON; `document` is XML and `pointcloud` is ASCII PLY.
pub fn render_report(
    bus: &Bus,
    graph: Option<&crate::task_model::TaskGraph>,
    name: &str,
    bin_width_ns: u64,
) -> Result<String, AnalyticsError> {
    let json = |v: serde_json::Value| serde_json::to_string_pretty(&v).expect("report serializes") + "\n";
    match name {
        "confidence-matrix" => {
            let m = confidence_matrix(&collect_outputs(bus), bin_width_ns, Aggregation::Mean)?;
            Ok(json(serde_json::to_value(&m).expect("serializable")))
        }
        "summaries" => {
            let m = confidence_matrix(&collect_outputs(bus), bin_width_ns, Aggregation::Mean)?;
            Ok(json(serde_json::to_value(global_summaries(&m, 0.0)?).expect("serializable")))
        }
        "timeline" => Ok(json(serde_json::to_value(timeline_row(bus)).expect("serializable"))),
        "summary-matrix" => {
            let row = timeline_row(bus);
            Ok(json(serde_json::to_value(summary_matrix(std::slice::from_ref(&row))).expect("serializable")))
        }
        "document" => session_document_from_bus(bus, graph),
        "pointcloud" => {
            let frames = depth_frames_from_bus(bus);
            Ok(point_cloud_ply(&build_point_cloud(&frames, 4)?))
        }
        "trajectories" => Ok(json(serde_json::to_value(trajectories(bus)).expect("serializable"))),
        other => Err(AnalyticsError::UnknownReport(other.to_string())),
    }
}
