//! Task definitions as dependency graphs.
//!
//! Nodes are steps; every edge carries an object-state goal that has to be
//! achieved before the performer can move from the edge's source step to its
//! target step. Parallel edges between the same pair of steps are conjunctive:
//! all of their goals must hold before the transition is taken.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DefinitionError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid task graph: {}", join_violations(.0))]
    Semantic(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// A `(class, state)` pair whose achievement gates a transition.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectStateGoal {
    #[serde(rename = "class")]
    pub object_class: String,
    #[serde(rename = "state")]
    pub state_label: String,
}

impl ObjectStateGoal {
    pub fn new(object_class: impl Into<String>, state_label: impl Into<String>) -> Self {
        Self {
            object_class: object_class.into(),
            state_label: state_label.into(),
        }
    }
}

impl fmt::Display for ObjectStateGoal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.object_class, self.state_label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub id: String,
    /// 1-based display index, equal to the step's position in topological order.
    pub index: usize,
    pub instruction: String,
    pub required_objects: Vec<String>,
    pub expected_duration_s: Option<f64>,
    /// Marks the step a session starts in when the graph has several roots.
    pub initial: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalEdge {
    pub from_step: String,
    pub to_step: String,
    pub goal: ObjectStateGoal,
}

/// Immutable task graph. Steps are kept in display order.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    pub task_id: String,
    pub name: String,
    pub steps: Vec<Step>,
    pub edges: Vec<GoalEdge>,
    pub object_vocabulary: BTreeSet<ObjectStateGoal>,
}

/// One broken invariant, naming the offending element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateStepId(String),
    DuplicateIndex(usize),
    EmptyInstruction(String),
    DanglingStep { edge: usize, step: String },
    SelfLoop(String),
    Cycle(Vec<(String, String)>),
    EmptyGoalField { edge: usize },
    UnknownGoal { edge: usize, goal: ObjectStateGoal },
    NoStartStep,
    NoTerminalStep,
    IndexOrder { from: String, to: String },
    IndexRange(String),
    EmptyGraph,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateStepId(id) => write!(f, "duplicate step id {id}"),
            Violation::DuplicateIndex(i) => write!(f, "duplicate display index {i}"),
            Violation::EmptyInstruction(id) => write!(f, "empty instruction at {id}"),
            Violation::DanglingStep { edge, step } => {
                write!(f, "edge #{edge} references undeclared step {step}")
            }
            Violation::SelfLoop(id) => write!(f, "self-loop at {id}"),
            Violation::Cycle(edges) => {
                let parts: Vec<String> = edges.iter().map(|(a, b)| format!("{a}->{b}")).collect();
                write!(f, "cycle through {}", parts.join(", "))
            }
            Violation::EmptyGoalField { edge } => write!(f, "edge #{edge} has an empty goal field"),
            Violation::UnknownGoal { edge, goal } => {
                write!(f, "edge #{edge} goal {goal} is not in the object vocabulary")
            }
            Violation::NoStartStep => write!(f, "no start step"),
            Violation::NoTerminalStep => write!(f, "no terminal step"),
            Violation::IndexOrder { from, to } => {
                write!(f, "display index of {from} does not precede {to}")
            }
            Violation::IndexRange(id) => write!(f, "display index of {id} out of range"),
            Violation::EmptyGraph => write!(f, "graph has no steps"),
        }
    }
}

// ---- file schema ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    class: String,
    states: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepDoc {
    id: String,
    instruction: String,
    #[serde(default)]
    required_objects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expected_duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    initial: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    from: String,
    to: String,
    goal: ObjectStateGoal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskDoc {
    task_id: String,
    name: String,
    objects: Vec<ObjectDoc>,
    steps: Vec<StepDoc>,
    edges: Vec<EdgeDoc>,
}

/// Parses a task-definition document. Either the whole graph is returned or
/// an error; partial graphs are never produced.
pub fn parse_task_definition(text: &str) -> Result<TaskGraph, DefinitionError> {
    let doc: TaskDoc = serde_json::from_str(text).map_err(|e| DefinitionError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let vocabulary = doc
        .objects
        .iter()
        .flat_map(|o| o.states.iter().map(|s| ObjectStateGoal::new(&o.class, s)))
        .collect();
    let steps = doc
        .steps
        .into_iter()
        .map(|s| Step {
            id: s.id,
            index: 0,
            instruction: s.instruction,
            required_objects: s.required_objects,
            expected_duration_s: s.expected_duration_s,
            initial: s.initial,
        })
        .collect();
    let edges = doc
        .edges
        .into_iter()
        .map(|e| GoalEdge {
            from_step: e.from,
            to_step: e.to,
            goal: e.goal,
        })
        .collect();

    let graph = TaskGraph::build(doc.task_id, doc.name, steps, edges, vocabulary);
    let report = validate_graph(&graph);
    if report.is_empty() {
        Ok(graph)
    } else {
        Err(DefinitionError::Semantic(report))
    }
}

/// Checks every graph invariant. An empty report means the graph is valid.
pub fn validate_graph(graph: &TaskGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    if graph.steps.is_empty() {
        out.push(Violation::EmptyGraph);
        return out;
    }

    let mut ids = HashSet::new();
    let mut indices = HashSet::new();
    for step in &graph.steps {
        if !ids.insert(step.id.as_str()) {
            out.push(Violation::DuplicateStepId(step.id.clone()));
        }
        if !indices.insert(step.index) {
            out.push(Violation::DuplicateIndex(step.index));
        }
        if step.index == 0 || step.index > graph.steps.len() {
            out.push(Violation::IndexRange(step.id.clone()));
        }
        if step.instruction.trim().is_empty() {
            out.push(Violation::EmptyInstruction(step.id.clone()));
        }
    }

    let index_of: HashMap<&str, usize> = graph
        .steps
        .iter()
        .map(|s| (s.id.as_str(), s.index))
        .collect();

    let mut resolved = Vec::new();
    for (i, edge) in graph.edges.iter().enumerate() {
        let mut dangling = false;
        for end in [&edge.from_step, &edge.to_step] {
            if !index_of.contains_key(end.as_str()) {
                out.push(Violation::DanglingStep {
                    edge: i,
                    step: end.clone(),
                });
                dangling = true;
            }
        }
        if edge.from_step == edge.to_step {
            out.push(Violation::SelfLoop(edge.from_step.clone()));
        }
        if edge.goal.object_class.is_empty() || edge.goal.state_label.is_empty() {
            out.push(Violation::EmptyGoalField { edge: i });
        } else if !graph.object_vocabulary.contains(&edge.goal) {
            out.push(Violation::UnknownGoal {
                edge: i,
                goal: edge.goal.clone(),
            });
        }
        if !dangling && edge.from_step != edge.to_step {
            resolved.push(edge);
        }
    }

    for cycle in find_cycles(graph, &resolved) {
        out.push(Violation::Cycle(cycle));
    }

    let has_cycle_or_loop = out
        .iter()
        .any(|v| matches!(v, Violation::Cycle(_) | Violation::SelfLoop(_)));
    if !has_cycle_or_loop {
        for edge in &resolved {
            if index_of[edge.from_step.as_str()] >= index_of[edge.to_step.as_str()] {
                out.push(Violation::IndexOrder {
                    from: edge.from_step.clone(),
                    to: edge.to_step.clone(),
                });
            }
        }
    }

    let with_incoming: HashSet<&str> = graph.edges.iter().map(|e| e.to_step.as_str()).collect();
    let with_outgoing: HashSet<&str> = graph.edges.iter().map(|e| e.from_step.as_str()).collect();
    if graph.steps.iter().all(|s| with_incoming.contains(s.id.as_str())) {
        out.push(Violation::NoStartStep);
    }
    if graph.steps.iter().all(|s| with_outgoing.contains(s.id.as_str())) {
        out.push(Violation::NoTerminalStep);
    }
    out
}

/// Depth-first search for back edges; each back edge yields one cycle listing
/// the edges along it.
fn find_cycles(graph: &TaskGraph, edges: &[&GoalEdge]) -> Vec<Vec<(String, String)>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in edges {
        let targets = adj.entry(e.from_step.as_str()).or_default();
        if !targets.contains(&e.to_step.as_str()) {
            targets.push(e.to_step.as_str());
        }
    }
    let mut mark: HashMap<&str, Mark> = graph.steps.iter().map(|s| (s.id.as_str(), Mark::White)).collect();
    let mut cycles = Vec::new();

    fn visit<'a>(
        node: &'a str,
        adj: &BTreeMap<&'a str, Vec<&'a str>>,
        mark: &mut HashMap<&'a str, Mark>,
        path: &mut Vec<&'a str>,
        cycles: &mut Vec<Vec<(String, String)>>,
    ) {
        mark.insert(node, Mark::Grey);
        path.push(node);
        for &next in adj.get(node).map(Vec::as_slice).unwrap_or(&[]) {
            match mark.get(next).copied().unwrap_or(Mark::Black) {
                Mark::White => visit(next, adj, mark, path, cycles),
                Mark::Grey => {
                    let start = path.iter().position(|&n| n == next).unwrap_or(0);
                    let mut cyc: Vec<(String, String)> = path[start..]
                        .windows(2)
                        .map(|w| (w[0].to_string(), w[1].to_string()))
                        .collect();
                    cyc.push((node.to_string(), next.to_string()));
                    cycles.push(cyc);
                }
                Mark::Black => {}
            }
        }
        path.pop();
        mark.insert(node, Mark::Black);
    }

    for step in &graph.steps {
        if mark[step.id.as_str()] == Mark::White {
            visit(step.id.as_str(), &adj, &mut mark, &mut Vec::new(), &mut cycles);
        }
    }
    cycles
}

impl TaskGraph {
    /// Assembles a graph and assigns display indices by topological sort,
    /// breaking ties by declaration order. Steps are reordered to display
    /// order. When no topological order exists, declaration order is kept and
    /// `validate_graph` reports the problem.
    pub fn build(
        task_id: impl Into<String>,
        name: impl Into<String>,
        mut steps: Vec<Step>,
        edges: Vec<GoalEdge>,
        object_vocabulary: BTreeSet<ObjectStateGoal>,
    ) -> Self {
        match topological_order(&steps, &edges) {
            Some(order) => {
                let mut slots: Vec<Option<Step>> = steps.into_iter().map(Some).collect();
                steps = order
                    .into_iter()
                    .map(|i| slots[i].take().expect("each position visited once"))
                    .collect();
            }
            None => {}
        }
        for (i, s) in steps.iter_mut().enumerate() {
            s.index = i + 1;
        }
        TaskGraph {
            task_id: task_id.into(),
            name: name.into(),
            steps,
            edges,
            object_vocabulary,
        }
    }

    pub fn step(&self, id: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.id == id)
    }

    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }

    /// Steps without incoming edges, in display order.
    pub fn start_steps(&self) -> Vec<&Step> {
        let targets: HashSet<&str> = self.edges.iter().map(|e| e.to_step.as_str()).collect();
        self.steps.iter().filter(|s| !targets.contains(s.id.as_str())).collect()
    }

    /// Distinct successor step ids of `id`, in display order.
    pub fn successors(&self, id: &str) -> Vec<&str> {
        let set: HashSet<&str> = self
            .edges
            .iter()
            .filter(|e| e.from_step == id)
            .map(|e| e.to_step.as_str())
            .collect();
        self.steps
            .iter()
            .filter(|s| set.contains(s.id.as_str()))
            .map(|s| s.id.as_str())
            .collect()
    }

    /// Distinct predecessor step ids of `id`, in display order.
    pub fn predecessors(&self, id: &str) -> Vec<&str> {
        let set: HashSet<&str> = self
            .edges
            .iter()
            .filter(|e| e.to_step == id)
            .map(|e| e.from_step.as_str())
            .collect();
        self.steps
            .iter()
            .filter(|s| set.contains(s.id.as_str()))
            .map(|s| s.id.as_str())
            .collect()
    }

    /// All goals on the edges `from -> to`. Empty when the steps are not adjacent.
    pub fn goals_between(&self, from: &str, to: &str) -> Vec<&ObjectStateGoal> {
        self.edges
            .iter()
            .filter(|e| e.from_step == from && e.to_step == to)
            .map(|e| &e.goal)
            .collect()
    }

    /// Goals carried by any edge.
    pub fn edge_goals(&self) -> BTreeSet<&ObjectStateGoal> {
        self.edges.iter().map(|e| &e.goal).collect()
    }

    pub fn knows_class(&self, class: &str) -> bool {
        self.object_vocabulary.iter().any(|g| g.object_class == class)
    }

    /// Object classes of the vocabulary, sorted.
    pub fn object_classes(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self
            .object_vocabulary
            .iter()
            .map(|g| g.object_class.as_str())
            .collect();
        set.into_iter().collect()
    }

    /// Serializes back to the task-definition file format.
    pub fn to_definition_json(&self) -> String {
        let mut objects: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for g in &self.object_vocabulary {
            objects
                .entry(g.object_class.as_str())
                .or_default()
                .push(g.state_label.clone());
        }
        let doc = TaskDoc {
            task_id: self.task_id.clone(),
            name: self.name.clone(),
            objects: objects
                .into_iter()
                .map(|(class, states)| ObjectDoc {
                    class: class.to_string(),
                    states,
                })
                .collect(),
            steps: self
                .steps
                .iter()
                .map(|s| StepDoc {
                    id: s.id.clone(),
                    instruction: s.instruction.clone(),
                    required_objects: s.required_objects.clone(),
                    expected_duration_s: s.expected_duration_s,
                    initial: s.initial,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    from: e.from_step.clone(),
                    to: e.to_step.clone(),
                    goal: e.goal.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("task document serializes")
    }
}

/// Kahn's algorithm with a min-heap on declaration position.
fn topological_order(steps: &[Step], edges: &[GoalEdge]) -> Option<Vec<usize>> {
    let pos: HashMap<&str, usize> = steps.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    if pos.len() != steps.len() {
        return None;
    }
    let mut indegree = vec![0usize; steps.len()];
    let mut adj = vec![Vec::new(); steps.len()];
    for e in edges {
        let (Some(&a), Some(&b)) = (pos.get(e.from_step.as_str()), pos.get(e.to_step.as_str())) else {
            return None;
        };
        adj[a].push(b);
        indegree[b] += 1;
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..steps.len())
        .filter(|&i| indegree[i] == 0)
        .map(Reverse)
        .collect();
    let mut order = Vec::with_capacity(steps.len());
    while let Some(Reverse(i)) = heap.pop() {
        order.push(i);
        for &j in &adj[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                heap.push(Reverse(j));
            }
        }
    }
    (order.len() == steps.len()).then_some(order)
}
