//! Step tracking over the dependency graph, error monitoring, a random forest
//! step classifier and guidance composition.
//!
//! The graph state machine is authoritative for step progression. Forest (and
//! GRU) estimates are advisory and travel on their own topic.

mod features;
mod forest;
mod guidance;
mod state;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{FeatureEncoder, HoiFeatures};
pub use forest::{rf_predict, rf_train, Forest, ForestParams, RfPrediction, TreeNode};
pub use guidance::{
    completion_prompt, current_guidance, ArrowTarget, GuidanceBundle, GuidanceConfig, GuidanceMode, GuidancePrompt,
    InstructionSimplifier, ObjectHint, PromptKind, RuleSimplifier,
};
pub use state::{
    detect_errors, init_session, Achievement, ExitKind, ObserveOutcome, ReasoningEvent, ReasoningState,
    StepInterval,
};

#[derive(Debug, Error, PartialEq)]
pub enum ReasoningError {
    #[error("graph has no start step")]
    NoStartStep,
    #[error("graph has several start steps and none is marked initial: {0:?}")]
    AmbiguousStart(Vec<String>),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    Graph,
    Rf,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEstimate {
    pub step_id: String,
    pub confidence: f64,
    pub source: EstimateSource,
    pub ts_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    MissingStep,
    OutOfOrder,
    Deviation,
}

/// A detected task error. Deviation errors come only from external sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskError {
    pub kind: ErrorKind,
    pub step_id: String,
    pub detected_at_ns: u64,
    pub message: String,
}
