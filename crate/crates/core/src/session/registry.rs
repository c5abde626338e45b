use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::SessionError;
use crate::task_model::{parse_task_definition, TaskGraph};

const BUILTIN: [&str; 2] = [
    include_str!("../../fixtures/tasks/quesadilla.json"),
    include_str!("../../fixtures/tasks/tourniquet.json"),
];

/// Task definitions shipped with the crate.
pub fn builtin_tasks() -> Vec<TaskGraph> {
    BUILTIN
        .iter()
        .map(|t| parse_task_definition(t).expect("builtin task definitions are valid"))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TaskRegistry {
    tasks: BTreeMap<String, Arc<TaskGraph>>,
}

impl TaskRegistry {
    pub fn builtin() -> Self {
        let mut r = TaskRegistry::default();
        for g in builtin_tasks() {
            r.insert(g);
        }
        r
    }

    /// Adds every `*.json` definition in `dir`; a later file with the same
    /// task id replaces an earlier or builtin one. A missing directory is
    /// not an error, an invalid definition is.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, SessionError> {
        if !dir.is_dir() {
            return Ok(0);
        }
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in &paths {
            let text = std::fs::read_to_string(path)?;
            let graph = parse_task_definition(&text).map_err(|e| SessionError::Definition {
                path: path.clone(),
                message: e.to_string(),
            })?;
            self.insert(graph);
        }
        Ok(paths.len())
    }

    pub fn insert(&mut self, graph: TaskGraph) {
        self.tasks.insert(graph.task_id.clone(), Arc::new(graph));
    }

    pub fn get(&self, task_id: &str) -> Option<Arc<TaskGraph>> {
        self.tasks.get(task_id).cloned()
    }

    pub fn list(&self) -> Vec<Arc<TaskGraph>> {
        self.tasks.values().cloned().collect()
    }
}
