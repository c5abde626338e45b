use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use crate::stream_bus::{Hand, HoiEvent, InteractionLevel, ObjectStateEvent, StepControl};
use crate::task_model::{ObjectStateGoal, TaskGraph};

use super::{ErrorKind, EstimateSource, ReasoningError, StepEstimate, TaskError};

/// When a goal was first achieved. `tick` orders observations, including
/// those sharing a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Achievement {
    pub ts_ns: u64,
    pub tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Left along a forward edge.
    Forward,
    /// Manual move back to an earlier step.
    Backward,
    /// Manual move forward.
    Manual,
    /// Terminal step finished.
    Completed,
    /// Session closed while the step was current.
    SessionEnd,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepInterval {
    pub step_id: String,
    pub enter_ns: u64,
    pub exit: Option<(u64, u64, ExitKind)>,
}

#[derive(Debug, Clone, Copy)]
pub enum ReasoningEvent<'a> {
    ObjectState(&'a ObjectStateEvent),
    Hoi(&'a HoiEvent),
    Control(StepControl),
}

/// What one observation produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObserveOutcome {
    pub estimates: Vec<StepEstimate>,
    pub new_errors: Vec<TaskError>,
    /// `(from, to)` for each transition taken, in order.
    pub transitions: Vec<(String, String)>,
    /// Set when the terminal step was finished by this observation.
    pub completed: bool,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningState {
    graph: Arc<TaskGraph>,
    achieved: BTreeMap<ObjectStateGoal, Achievement>,
    /// Observed states outside the graph's edge goals, kept for provenance.
    unmapped: Vec<(ObjectStateGoal, u64)>,
    current_step: String,
    completed: bool,
    errors: Vec<TaskError>,
    /// Edges taken by manual advance, with the tick. A manual advance counts
    /// as the performer vouching that the edge's goals hold.
    vouched: BTreeMap<(String, String), u64>,
    history: Vec<StepInterval>,
    latest_states: BTreeMap<String, String>,
    hoi: BTreeMap<String, (Hand, InteractionLevel)>,
    tick: u64,
}

/// Starts a session at the graph's unique start step, or the start step
/// marked initial when there are several.
pub fn init_session(graph: Arc<TaskGraph>) -> Result<ReasoningState, ReasoningError> {
    let starts = graph.start_steps();
    let start = match starts.as_slice() {
        [] => return Err(ReasoningError::NoStartStep),
        [only] => only.id.clone(),
        many => {
            let marked: Vec<_> = many.iter().filter(|s| s.initial).collect();
            match marked.as_slice() {
                [one] => one.id.clone(),
                _ => {
                    return Err(ReasoningError::AmbiguousStart(
                        many.iter().map(|s| s.id.clone()).collect(),
                    ))
                }
            }
        }
    };
    Ok(ReasoningState {
        history: vec![StepInterval {
            step_id: start.clone(),
            enter_ns: 0,
            exit: None,
        }],
        graph,
        achieved: BTreeMap::new(),
        unmapped: Vec::new(),
        current_step: start,
        completed: false,
        errors: Vec::new(),
        vouched: BTreeMap::new(),
        latest_states: BTreeMap::new(),
        hoi: BTreeMap::new(),
        tick: 0,
    })
}

impl ReasoningState {
    pub fn graph(&self) -> &Arc<TaskGraph> {
        &self.graph
    }

    pub fn current_step(&self) -> &str {
        &self.current_step
    }

    pub fn current_index(&self) -> usize {
        self.graph.step(&self.current_step).map_or(0, |s| s.index)
    }

    pub fn is_completed(&self) -> bool {
        self.completed
    }

    /// Steps reachable over one edge from the current step.
    pub fn eligible_next(&self) -> Vec<&str> {
        if self.completed {
            return Vec::new();
        }
        self.graph.successors(&self.current_step)
    }

    pub fn achieved(&self) -> &BTreeMap<ObjectStateGoal, Achievement> {
        &self.achieved
    }

    pub fn unmapped(&self) -> &[(ObjectStateGoal, u64)] {
        &self.unmapped
    }

    pub fn errors(&self) -> &[TaskError] {
        &self.errors
    }

    pub fn history(&self) -> &[StepInterval] {
        &self.history
    }

    pub fn latest_states(&self) -> &BTreeMap<String, String> {
        &self.latest_states
    }

    pub fn hoi(&self) -> &BTreeMap<String, (Hand, InteractionLevel)> {
        &self.hoi
    }

    fn achieved_by(&self, goal: &ObjectStateGoal, tick: u64) -> bool {
        self.achieved.get(goal).is_some_and(|a| a.tick <= tick)
    }

    fn group_satisfied(&self, from: &str, to: &str, tick: u64) -> bool {
        let goals = self.graph.goals_between(from, to);
        !goals.is_empty() && goals.iter().all(|g| self.achieved_by(g, tick))
    }

    fn group_ok(&self, from: &str, to: &str, tick: u64) -> bool {
        self.group_satisfied(from, to, tick)
            || self
                .vouched
                .get(&(from.to_string(), to.to_string()))
                .is_some_and(|&t| t <= tick)
    }

    /// A step's prerequisites hold when it has no predecessors or some
    /// predecessor's edge group into it is achieved or vouched for.
    fn incoming_satisfied(&self, step: &str, tick: u64) -> bool {
        let preds = self.graph.predecessors(step);
        preds.is_empty() || preds.iter().any(|p| self.group_ok(p, step, tick))
    }

    /// Predecessors whose edge group into `step` was not achieved by `tick`,
    /// when the step's prerequisites as a whole did not hold.
    fn missing_before(&self, step: &str, tick: u64) -> Vec<String> {
        if self.incoming_satisfied(step, tick) {
            return Vec::new();
        }
        self.graph
            .predecessors(step)
            .into_iter()
            .filter(|p| !self.group_ok(p, step, tick))
            .map(str::to_string)
            .collect()
    }

    fn describe(&self, step_id: &str) -> String {
        match self.graph.step(step_id) {
            Some(s) => format!("step {} of {} \"{}\"", s.index, self.graph.total_steps(), s.instruction),
            None => step_id.to_string(),
        }
    }

    fn make_error(&self, kind: ErrorKind, step_id: &str, ts_ns: u64) -> TaskError {
        let message = match kind {
            ErrorKind::OutOfOrder => format!("{} was performed before its prerequisites", self.describe(step_id)),
            ErrorKind::MissingStep => format!("{} was skipped", self.describe(step_id)),
            ErrorKind::Deviation => format!("deviation at {}", self.describe(step_id)),
        };
        TaskError {
            kind,
            step_id: step_id.to_string(),
            detected_at_ns: ts_ns,
            message,
        }
    }

    fn record_error(&mut self, kind: ErrorKind, step_id: &str, ts_ns: u64, out: &mut ObserveOutcome) {
        if self.errors.iter().any(|e| e.kind == kind && e.step_id == step_id) {
            return;
        }
        let err = self.make_error(kind, step_id, ts_ns);
        self.errors.push(err.clone());
        out.new_errors.push(err);
    }

    fn close_current(&mut self, ts_ns: u64, kind: ExitKind, out: &mut ObserveOutcome) {
        let tick = self.tick;
        if let Some(last) = self.history.last_mut() {
            last.exit = Some((ts_ns, tick, kind));
        }
        if kind != ExitKind::Backward {
            let current = self.current_step.clone();
            for p in self.missing_before(&current, tick) {
                self.record_error(ErrorKind::MissingStep, &p, ts_ns, out);
            }
        }
    }

    fn move_to(&mut self, to: &str, kind: ExitKind, ts_ns: u64, out: &mut ObserveOutcome) {
        let from = self.current_step.clone();
        self.close_current(ts_ns, kind, out);
        self.history.push(StepInterval {
            step_id: to.to_string(),
            enter_ns: ts_ns,
            exit: None,
        });
        self.current_step = to.to_string();
        out.transitions.push((from, to.to_string()));
        out.estimates.push(StepEstimate {
            step_id: to.to_string(),
            confidence: 1.0,
            source: EstimateSource::Graph,
            ts_ns,
        });
    }

    /// Shortest path (in edges) from the current step to the first
    /// descendant, in breadth-first display order, whose outgoing edge group
    /// is already achieved.
    fn resync_path(&self) -> Option<Vec<String>> {
        let tick = self.tick;
        let start = self.current_step.as_str();
        let mut parent: HashMap<&str, &str> = HashMap::new();
        let mut seen: BTreeSet<&str> = [start].into_iter().collect();
        let mut queue: VecDeque<&str> = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            for next in self.graph.successors(node) {
                if !seen.insert(next) {
                    continue;
                }
                parent.insert(next, node);
                let done = self
                    .graph
                    .successors(next)
                    .iter()
                    .any(|t| self.group_satisfied(next, t, tick));
                if done {
                    let mut path = vec![next.to_string()];
                    let mut cur = next;
                    while let Some(&p) = parent.get(cur) {
                        if p == start {
                            break;
                        }
                        path.push(p.to_string());
                        cur = p;
                    }
                    path.reverse();
                    return Some(path);
                }
                queue.push_back(next);
            }
        }
        None
    }

    fn advance(&mut self, ts_ns: u64, out: &mut ObserveOutcome) {
        loop {
            if self.completed {
                return;
            }
            let tick = self.tick;
            let direct = self
                .graph
                .successors(&self.current_step)
                .into_iter()
                .find(|s| self.group_satisfied(&self.current_step, s, tick))
                .map(str::to_string);
            if let Some(next) = direct {
                self.move_to(&next, ExitKind::Forward, ts_ns, out);
                continue;
            }
            match self.resync_path() {
                Some(path) => {
                    for step in path {
                        self.move_to(&step, ExitKind::Forward, ts_ns, out);
                    }
                }
                None => return,
            }
        }
    }

    /// Folds one event into the state.
    pub fn observe(&mut self, event: ReasoningEvent<'_>, ts_ns: u64) -> ObserveOutcome {
        self.tick += 1;
        let mut out = ObserveOutcome::default();
        match event {
            ReasoningEvent::ObjectState(e) => self.observe_state(e, ts_ns, &mut out),
            ReasoningEvent::Hoi(e) => {
                if self.graph.knows_class(&e.object_class) {
                    self.hoi.insert(e.object_class.clone(), (e.hand, e.level));
                } else {
                    out.notices.push(format!("unknown object class {}", e.object_class));
                }
            }
            ReasoningEvent::Control(action) => self.control(action, ts_ns, &mut out),
        }
        out
    }

    fn observe_state(&mut self, e: &ObjectStateEvent, ts_ns: u64, out: &mut ObserveOutcome) {
        let goal = ObjectStateGoal::new(&e.object_class, &e.state_label);
        if !self.graph.knows_class(&e.object_class) {
            self.unmapped.push((goal, ts_ns));
            out.notices.push(format!("unknown object class {}", e.object_class));
            return;
        }
        self.latest_states.insert(e.object_class.clone(), e.state_label.clone());
        if !self.graph.edge_goals().contains(&goal) {
            self.unmapped.push((goal.clone(), ts_ns));
            out.notices.push(format!("state {goal} gates no transition"));
            return;
        }
        if self.achieved.contains_key(&goal) {
            return;
        }
        let tick = self.tick;
        self.achieved.insert(goal.clone(), Achievement { ts_ns, tick });

        let sources: BTreeSet<String> = self
            .graph
            .edges
            .iter()
            .filter(|edge| edge.goal == goal)
            .map(|edge| edge.from_step.clone())
            .collect();
        for step in sources {
            if !self.incoming_satisfied(&step, tick) {
                self.record_error(ErrorKind::OutOfOrder, &step, ts_ns, out);
            }
        }
        self.advance(ts_ns, out);
    }

    fn control(&mut self, action: StepControl, ts_ns: u64, out: &mut ObserveOutcome) {
        if self.completed {
            out.notices.push("task already completed".into());
            return;
        }
        match action {
            StepControl::Next => match self.graph.successors(&self.current_step).first() {
                Some(next) => {
                    let next = next.to_string();
                    self.vouched
                        .entry((self.current_step.clone(), next.clone()))
                        .or_insert(self.tick);
                    self.move_to(&next, ExitKind::Manual, ts_ns, out);
                }
                None => {
                    self.close_current(ts_ns, ExitKind::Completed, out);
                    self.completed = true;
                    out.completed = true;
                }
            },
            StepControl::Previous => {
                let preds = self.graph.predecessors(&self.current_step);
                let came_from = self
                    .history
                    .iter()
                    .rev()
                    .nth(1)
                    .map(|h| h.step_id.as_str())
                    .filter(|s| preds.contains(s));
                match came_from.or(preds.first().copied()).map(str::to_string) {
                    Some(prev) => self.move_to(&prev, ExitKind::Backward, ts_ns, out),
                    None => out.notices.push("already at the first step".into()),
                }
            }
        }
    }

    /// Closes the session: the current step's prerequisites are re-checked as
    /// if it were being left.
    pub fn finalize(&mut self, ts_ns: u64) -> ObserveOutcome {
        self.tick += 1;
        let mut out = ObserveOutcome::default();
        let open = self.history.last().is_some_and(|h| h.exit.is_none());
        if open {
            self.close_current(ts_ns, ExitKind::SessionEnd, &mut out);
        }
        out
    }
}

/// Re-derives graph errors from the achievement record and step history.
/// Equals the errors accumulated by `observe` as a set.
pub fn detect_errors(state: &ReasoningState) -> Vec<TaskError> {
    let mut first: BTreeMap<(ErrorKind, String), (u64, u64)> = BTreeMap::new();
    let mut note = |kind: ErrorKind, step: &str, tick: u64, ts: u64| {
        first
            .entry((kind, step.to_string()))
            .and_modify(|e| {
                if tick < e.0 {
                    *e = (tick, ts);
                }
            })
            .or_insert((tick, ts));
    };

    for (goal, a) in &state.achieved {
        for edge in state.graph.edges.iter().filter(|e| &e.goal == goal) {
            if !state.incoming_satisfied(&edge.from_step, a.tick) {
                note(ErrorKind::OutOfOrder, &edge.from_step, a.tick, a.ts_ns);
            }
        }
    }
    for interval in &state.history {
        if let Some((ts, tick, kind)) = interval.exit {
            if kind == ExitKind::Backward {
                continue;
            }
            for p in state.missing_before(&interval.step_id, tick) {
                note(ErrorKind::MissingStep, &p, tick, ts);
            }
        }
    }

    let mut out: Vec<(u64, TaskError)> = first
        .into_iter()
        .map(|((kind, step), (tick, ts))| (tick, state.make_error(kind, &step, ts)))
        .collect();
    out.sort_by_key(|(tick, _)| *tick);
    out.into_iter().map(|(_, e)| e).collect()
}
