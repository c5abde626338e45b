use serde::{Deserialize, Serialize};

use crate::memory3d::ObjectMemory;

use super::{ReasoningState, TaskError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Instruction,
    SimplifiedInstruction,
    Warning,
    Arrow,
    Completion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrowTarget {
    pub object_class: String,
    pub position: [f64; 3],
}

/// One HUD record. Arrow prompts always carry a target; only completion
/// prompts may have empty text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidancePrompt {
    pub kind: PromptKind,
    pub step_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ArrowTarget>,
    pub ts_ns: u64,
    /// 1-based display index of `step_id`.
    pub step_index: usize,
    pub total_steps: usize,
    /// Required objects with no tracklet in memory.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unlocated: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Full,
    Simplified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Errors older than this no longer raise a warning.
    pub warning_max_age_ns: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Full,
            warning_max_age_ns: 5_000_000_000,
        }
    }
}

/// A required object and where memory last saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectHint {
    pub object_class: String,
    pub position: Option<[f64; 3]>,
}

/// Shortens an instruction for the simplified HUD mode. Swappable for an
/// external text generator.
pub trait InstructionSimplifier: Send + Sync {
    fn simplify(&self, instruction: &str, objects: &[ObjectHint]) -> String;
}

/// Keeps the leading imperative clause and names the side of the first
/// located object (world x < 0 is left).
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleSimplifier;

impl InstructionSimplifier for RuleSimplifier {
    fn simplify(&self, instruction: &str, objects: &[ObjectHint]) -> String {
        let text = instruction.trim();
        let mut cut = text.len();
        for sep in [",", ";", ".", ":", " and ", " then ", " using ", " leaving "] {
            if let Some(i) = text.find(sep) {
                cut = cut.min(i);
            }
        }
        let clause = text[..cut].trim_end();
        let clause = if clause.is_empty() { text } else { clause };
        let mut out = format!("{clause}.");
        if let Some((class, p)) = objects
            .iter()
            .find_map(|o| o.position.map(|p| (&o.object_class, p)))
        {
            let side = if p[0] < 0.0 { "left" } else { "right" };
            out.push_str(&format!(" {class}: {side} hand side."));
        }
        out
    }
}

/// Everything the HUD needs for the current moment, in emission order:
/// warning, instruction (or completion), then one arrow per located object.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceBundle {
    pub warning: Option<GuidancePrompt>,
    pub instruction: GuidancePrompt,
    pub arrows: Vec<GuidancePrompt>,
    pub unlocated: Vec<String>,
    pub step_index: usize,
    pub total_steps: usize,
}

impl GuidanceBundle {
    pub fn into_records(self) -> Vec<GuidancePrompt> {
        self.warning
            .into_iter()
            .chain(std::iter::once(self.instruction))
            .chain(self.arrows)
            .collect()
    }
}

/// Composes guidance for the current step. `external` holds ingested error
/// events (deviations) that also qualify for a warning.
pub fn current_guidance(
    state: &ReasoningState,
    memory: &ObjectMemory,
    config: &GuidanceConfig,
    simplifier: &dyn InstructionSimplifier,
    external: &[TaskError],
    now_ns: u64,
) -> GuidanceBundle {
    let graph = state.graph();
    let step_id = state.current_step().to_string();
    let step = graph.step(&step_id).expect("current step belongs to the graph");
    let total = graph.total_steps();
    let base = |kind: PromptKind, text: String| GuidancePrompt {
        kind,
        step_id: step_id.clone(),
        text,
        target: None,
        ts_ns: now_ns,
        step_index: step.index,
        total_steps: total,
        unlocated: Vec::new(),
    };

    let newest = state
        .errors()
        .iter()
        .chain(external)
        .enumerate()
        .max_by_key(|(i, e)| (e.detected_at_ns, *i))
        .map(|(_, e)| e);
    let warning = newest
        .filter(|e| now_ns.saturating_sub(e.detected_at_ns) <= config.warning_max_age_ns && e.detected_at_ns <= now_ns)
        .map(|e| {
            let mut w = base(PromptKind::Warning, e.message.clone());
            w.step_id = e.step_id.clone();
            w.step_index = graph.step(&e.step_id).map_or(step.index, |s| s.index);
            w
        });

    let hints: Vec<ObjectHint> = step
        .required_objects
        .iter()
        .map(|class| ObjectHint {
            object_class: class.clone(),
            position: memory.locate_object(class, None).map(|t| {
                let p = t.last_position();
                [p.x, p.y, p.z]
            }),
        })
        .collect();
    let unlocated: Vec<String> = hints
        .iter()
        .filter(|h| h.position.is_none())
        .map(|h| h.object_class.clone())
        .collect();

    let mut instruction = if state.is_completed() {
        base(PromptKind::Completion, format!("Task complete: {}", graph.name))
    } else {
        match config.mode {
            GuidanceMode::Full => base(PromptKind::Instruction, step.instruction.clone()),
            GuidanceMode::Simplified => base(
                PromptKind::SimplifiedInstruction,
                simplifier.simplify(&step.instruction, &hints),
            ),
        }
    };
    instruction.unlocated = unlocated.clone();

    let arrows = if state.is_completed() {
        Vec::new()
    } else {
        hints
            .iter()
            .filter_map(|h| {
                let position = h.position?;
                let mut a = base(PromptKind::Arrow, format!("{} here", h.object_class));
                a.target = Some(ArrowTarget {
                    object_class: h.object_class.clone(),
                    position,
                });
                Some(a)
            })
            .collect()
    };

    GuidanceBundle {
        warning,
        instruction,
        arrows,
        unlocated,
        step_index: step.index,
        total_steps: total,
    }
}

/// Record emitted when a step is left along a forward edge.
pub fn completion_prompt(state: &ReasoningState, step_id: &str, ts_ns: u64) -> GuidancePrompt {
    let graph = state.graph();
    let (index, text) = graph
        .step(step_id)
        .map_or((0, String::new()), |s| (s.index, format!("Step {} done", s.index)));
    GuidancePrompt {
        kind: PromptKind::Completion,
        step_id: step_id.to_string(),
        text,
        target: None,
        ts_ns,
        step_index: index,
        total_steps: graph.total_steps(),
        unlocated: Vec::new(),
    }
}
