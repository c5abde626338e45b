use std::collections::BTreeMap;

use crate::stream_bus::{Hand, InteractionLevel};
use crate::task_model::{ObjectStateGoal, TaskGraph};

/// Hand and interaction level per object class. Classes without an entry
/// encode as no hand and no interaction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HoiFeatures {
    pub per_class: BTreeMap<String, (Hand, InteractionLevel)>,
}

/// Fixed feature layout for the forest: an indicator per vocabulary
/// `(class, state)` pair, sorted, set when that is the class's latest state;
/// then five HOI slots per sorted class: left, right, both, direct, indirect.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    states: Vec<ObjectStateGoal>,
    classes: Vec<String>,
}

impl FeatureEncoder {
    pub fn new(graph: &TaskGraph) -> Self {
        Self::from_vocabulary(graph.object_vocabulary.iter().cloned())
    }

    pub fn from_vocabulary(vocab: impl IntoIterator<Item = ObjectStateGoal>) -> Self {
        let mut states: Vec<ObjectStateGoal> = vocab.into_iter().collect();
        states.sort();
        states.dedup();
        let mut classes: Vec<String> = states.iter().map(|g| g.object_class.clone()).collect();
        classes.dedup();
        Self { states, classes }
    }

    pub fn dims(&self) -> usize {
        self.states.len() + 5 * self.classes.len()
    }

    pub fn state_slots(&self) -> &[ObjectStateGoal] {
        &self.states
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn encode(&self, latest_states: &BTreeMap<String, String>, hoi: &HoiFeatures) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims());
        for g in &self.states {
            let on = latest_states.get(&g.object_class) == Some(&g.state_label);
            out.push(if on { 1.0 } else { 0.0 });
        }
        for class in &self.classes {
            let (hand, level) = hoi
                .per_class
                .get(class)
                .copied()
                .unwrap_or((Hand::None, InteractionLevel::None));
            let left = matches!(hand, Hand::Left | Hand::Both);
            let right = matches!(hand, Hand::Right | Hand::Both);
            let both = hand == Hand::Both;
            for bit in [
                left,
                right,
                both,
                level == InteractionLevel::Direct,
                level == InteractionLevel::Indirect,
            ] {
                out.push(if bit { 1.0 } else { 0.0 });
            }
        }
        out
    }
}
