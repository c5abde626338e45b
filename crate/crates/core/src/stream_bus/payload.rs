use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::memory3d::{CameraModel, Detection2D, TrackletExport};
use crate::reasoning::{GuidancePrompt, StepEstimate, TaskError};

/// Reference to a frame stored in the session's content-addressed blob store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    /// Hex SHA-256 of the blob bytes.
    pub blob: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_ts_ns: Option<u64>,
}

/// Gaze direction in the camera frame of the most recent pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub direction: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_ts_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedDetection {
    #[serde(flatten)]
    pub detection: Detection2D,
    /// Depth at the box center in meters, when the detector supplies it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<ObservedDetection>,
    /// Depth frame the detections were taken against, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_blob: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectStateEvent {
    pub object_class: String,
    pub state_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
    Both,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionLevel {
    Direct,
    Indirect,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiEvent {
    pub object_class: String,
    pub hand: Hand,
    pub level: InteractionLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadCategory {
    Underload,
    Optimal,
    Overload,
}

impl WorkloadCategory {
    pub const ALL: [WorkloadCategory; 3] = [Self::Underload, Self::Optimal, Self::Overload];

    pub fn index(self) -> usize {
        match self {
            Self::Underload => 0,
            Self::Optimal => 1,
            Self::Overload => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSample {
    pub category: WorkloadCategory,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerScope {
    #[default]
    Phase,
    Procedure,
}

/// A phase or procedure label that holds from its timestamp until the next
/// marker of the same scope (or an `end` marker).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMarker {
    pub label: String,
    #[serde(default)]
    pub scope: MarkerScope,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub end: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepControl {
    Next,
    Previous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepControlEvent {
    pub action: StepControl,
}

/// Order in which a live session consumed its inputs: the `seq`-th entry of
/// `topic`. Replay follows these marks so cross-topic ties resolve exactly as
/// they did live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestMark {
    pub topic: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub tracklets: Vec<TrackletExport>,
}

/// Tagged union carried by every stream entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum Payload {
    RgbFrameRef(FrameRef),
    DepthFrameRef(FrameRef),
    CameraPose(CameraModel),
    GazeSample(GazeSample),
    DetectionSet(DetectionSet),
    ObjectStateEvent(ObjectStateEvent),
    HoiEvent(HoiEvent),
    StepEstimate(StepEstimate),
    WorkloadSample(WorkloadSample),
    PhaseMarker(PhaseMarker),
    ErrorEvent(TaskError),
    GuidancePrompt(GuidancePrompt),
    StepControl(StepControlEvent),
    MemorySnapshot(MemorySnapshot),
    IngestMark(IngestMark),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaTag {
    RgbFrameRef,
    DepthFrameRef,
    CameraPose,
    GazeSample,
    DetectionSet,
    ObjectStateEvent,
    HoiEvent,
    StepEstimate,
    WorkloadSample,
    PhaseMarker,
    ErrorEvent,
    GuidancePrompt,
    StepControl,
    MemorySnapshot,
    IngestMark,
}

impl SchemaTag {
    pub const ALL: [SchemaTag; 15] = [
        Self::RgbFrameRef,
        Self::DepthFrameRef,
        Self::CameraPose,
        Self::GazeSample,
        Self::DetectionSet,
        Self::ObjectStateEvent,
        Self::HoiEvent,
        Self::StepEstimate,
        Self::WorkloadSample,
        Self::PhaseMarker,
        Self::ErrorEvent,
        Self::GuidancePrompt,
        Self::StepControl,
        Self::MemorySnapshot,
        Self::IngestMark,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::RgbFrameRef => "rgb_frame_ref",
            Self::DepthFrameRef => "depth_frame_ref",
            Self::CameraPose => "camera_pose",
            Self::GazeSample => "gaze_sample",
            Self::DetectionSet => "detection_set",
            Self::ObjectStateEvent => "object_state_event",
            Self::HoiEvent => "hoi_event",
            Self::StepEstimate => "step_estimate",
            Self::WorkloadSample => "workload_sample",
            Self::PhaseMarker => "phase_marker",
            Self::ErrorEvent => "error_event",
            Self::GuidancePrompt => "guidance_prompt",
            Self::StepControl => "step_control",
            Self::MemorySnapshot => "memory_snapshot",
            Self::IngestMark => "ingest_mark",
        }
    }
}

impl fmt::Display for SchemaTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemaTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown schema tag {s:?}"))
    }
}

impl Payload {
    pub fn tag(&self) -> SchemaTag {
        match self {
            Payload::RgbFrameRef(_) => SchemaTag::RgbFrameRef,
            Payload::DepthFrameRef(_) => SchemaTag::DepthFrameRef,
            Payload::CameraPose(_) => SchemaTag::CameraPose,
            Payload::GazeSample(_) => SchemaTag::GazeSample,
            Payload::DetectionSet(_) => SchemaTag::DetectionSet,
            Payload::ObjectStateEvent(_) => SchemaTag::ObjectStateEvent,
            Payload::HoiEvent(_) => SchemaTag::HoiEvent,
            Payload::StepEstimate(_) => SchemaTag::StepEstimate,
            Payload::WorkloadSample(_) => SchemaTag::WorkloadSample,
            Payload::PhaseMarker(_) => SchemaTag::PhaseMarker,
            Payload::ErrorEvent(_) => SchemaTag::ErrorEvent,
            Payload::GuidancePrompt(_) => SchemaTag::GuidancePrompt,
            Payload::StepControl(_) => SchemaTag::StepControl,
            Payload::MemorySnapshot(_) => SchemaTag::MemorySnapshot,
            Payload::IngestMark(_) => SchemaTag::IngestMark,
        }
    }

    /// Builds a payload from a tag and the untagged body, as posted by clients.
    pub fn from_tagged(tag: &str, body: serde_json::Value) -> Result<Payload, String> {
        let tag: SchemaTag = tag.parse()?;
        let mut obj = match body {
            serde_json::Value::Object(m) => m,
            other => return Err(format!("payload body must be an object, got {other}")),
        };
        if obj.contains_key("tag") {
            return Err("payload body must not carry its own tag".into());
        }
        obj.insert("tag".into(), serde_json::Value::String(tag.as_str().into()));
        serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| format!("{tag}: {e}"))
    }
}
