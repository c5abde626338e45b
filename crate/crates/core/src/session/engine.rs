use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::SessionError;
use crate::memory3d::{sample_depth, CameraModel, Detection2D, MemoryConfig, ObjectMemory};
use crate::reasoning::{
    completion_prompt, current_guidance, init_session, rf_predict, EstimateSource, FeatureEncoder, Forest,
    GuidanceConfig, GuidancePrompt, HoiFeatures, InstructionSimplifier, ObserveOutcome, ReasoningEvent,
    ReasoningState, StepEstimate, TaskError,
};
use crate::stream_bus::{topics, Bus, IngestMark, MemorySnapshot, Payload, SchemaTag, StreamEntry};
use crate::task_model::TaskGraph;

/// One record of the guidance stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum GuidanceRecord {
    Prompt(GuidancePrompt),
    Estimate(StepEstimate),
}

/// What processing one input produced.
#[derive(Debug, Clone, Default)]
pub struct Emitted {
    pub records: Vec<GuidanceRecord>,
    /// Entries for the model-output stream: step estimates and detections.
    pub outputs: Vec<Arc<StreamEntry>>,
    pub notices: Vec<String>,
}

/// Input topic for each payload tag a client may post.
pub fn input_topic(tag: SchemaTag) -> Option<&'static str> {
    Some(match tag {
        SchemaTag::RgbFrameRef => topics::RGB,
        SchemaTag::DepthFrameRef => topics::DEPTH,
        SchemaTag::CameraPose => topics::POSE,
        SchemaTag::GazeSample => topics::GAZE,
        SchemaTag::DetectionSet => topics::DETECTIONS,
        SchemaTag::ObjectStateEvent => topics::OBJECT_STATES,
        SchemaTag::HoiEvent => topics::HOI,
        SchemaTag::WorkloadSample => topics::WORKLOAD,
        SchemaTag::PhaseMarker => topics::PHASES,
        SchemaTag::ErrorEvent => topics::EXTERNAL_ERRORS,
        SchemaTag::StepControl => topics::CONTROL,
        // externally computed advisory estimates (e.g. a sequence model)
        SchemaTag::StepEstimate => topics::ADVISORY,
        SchemaTag::GuidancePrompt | SchemaTag::MemorySnapshot | SchemaTag::IngestMark => return None,
    })
}

const OUTPUT_TOPICS: [(&str, SchemaTag); 6] = [
    (topics::STEPS, SchemaTag::StepEstimate),
    (topics::ERRORS, SchemaTag::ErrorEvent),
    (topics::GUIDANCE, SchemaTag::GuidancePrompt),
    (topics::MEMORY, SchemaTag::MemorySnapshot),
    (topics::INGEST, SchemaTag::IngestMark),
    (topics::ADVISORY, SchemaTag::StepEstimate),
];

fn is_input_topic(name: &str) -> bool {
    SchemaTag::ALL.into_iter().any(|t| input_topic(t) == Some(name))
}

#[derive(Clone)]
pub struct EngineOptions {
    pub guidance: GuidanceConfig,
    pub simplifier: Arc<dyn InstructionSimplifier>,
    pub forest: Option<Arc<Forest>>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            simplifier: Arc::new(crate::reasoning::RuleSimplifier),
            forest: None,
        }
    }
}

/// HUD block without timestamps, to tell whether guidance changed.
type BlockKey = Vec<GuidancePrompt>;

/// Single consumer of a session's inputs: reasoning, object memory, advisory
/// forest and guidance composition. Deterministic given the input order.
pub struct Engine {
    bus: Arc<Bus>,
    reasoning: ReasoningState,
    memory: ObjectMemory,
    encoder: FeatureEncoder,
    options: EngineOptions,
    external: Vec<TaskError>,
    /// Largest timestamp consumed so far; outputs are stamped with it so
    /// output topics never regress.
    clock: u64,
    last_warning: Option<TaskError>,
    last_block: Option<BlockKey>,
}

impl Engine {
    /// Declares the session topics and emits the opening guidance.
    pub fn start(bus: Arc<Bus>, graph: Arc<TaskGraph>, options: EngineOptions) -> Result<(Self, Emitted), SessionError> {
        for tag in SchemaTag::ALL {
            if let Some(t) = input_topic(tag) {
                bus.create_topic(t, tag)?;
            }
        }
        for (t, tag) in OUTPUT_TOPICS {
            bus.create_topic(t, tag)?;
        }
        let reasoning = init_session(graph.clone()).map_err(|e| SessionError::Reasoning(e.to_string()))?;
        let encoder = FeatureEncoder::new(&graph);
        if let Some(f) = &options.forest {
            if f.n_features != encoder.dims() {
                return Err(SessionError::Reasoning(format!(
                    "forest expects {} features, task encodes {}",
                    f.n_features,
                    encoder.dims()
                )));
            }
        }
        let mut engine = Engine {
            bus,
            reasoning,
            memory: ObjectMemory::new(MemoryConfig::default()),
            encoder,
            options,
            external: Vec::new(),
            clock: 0,
            last_warning: None,
            last_block: None,
        };
        let mut out = Emitted::default();
        let first = StepEstimate {
            step_id: engine.reasoning.current_step().to_string(),
            confidence: 1.0,
            source: EstimateSource::Graph,
            ts_ns: 0,
        };
        engine.emit_estimate(first, &mut out)?;
        engine.refresh_guidance(&mut out)?;
        Ok((engine, out))
    }

    pub fn bus(&self) -> &Arc<Bus> {
        &self.bus
    }

    pub fn reasoning(&self) -> &ReasoningState {
        &self.reasoning
    }

    pub fn memory(&self) -> &ObjectMemory {
        &self.memory
    }

    /// Live path: publishes to the input topic, then consumes the entry.
    pub fn ingest(&mut self, payload: Payload, ts_ns: Option<u64>) -> Result<(Arc<StreamEntry>, Emitted), SessionError> {
        let topic = input_topic(payload.tag()).ok_or_else(|| SessionError::NotIngestible(payload.tag()))?;
        let ts = ts_ns.unwrap_or_else(|| self.bus.now_ns().max(self.clock));
        let seq = self.bus.publish(topic, ts, payload)?;
        let entry = self.bus.entries(topic)?[seq as usize - 1].clone();
        let out = self.consume(&entry)?;
        Ok((entry, out))
    }

    /// Replay path: appends a recorded entry with its original seq, then
    /// consumes it.
    pub fn apply_recorded(&mut self, entry: &StreamEntry) -> Result<Emitted, SessionError> {
        if !is_input_topic(&entry.topic) {
            return Err(SessionError::NotIngestible(entry.payload.tag()));
        }
        self.bus.append_recorded(entry)?;
        self.consume(entry)
    }

    fn consume(&mut self, entry: &StreamEntry) -> Result<Emitted, SessionError> {
        self.clock = self.clock.max(entry.ts_ns);
        let mut out = Emitted::default();
        self.bus.publish(
            topics::INGEST,
            self.clock,
            Payload::IngestMark(IngestMark {
                topic: entry.topic.clone(),
                seq: entry.seq,
            }),
        )?;
        let ts = self.clock;
        match &entry.payload {
            Payload::ObjectStateEvent(e) => {
                let o = self.reasoning.observe(ReasoningEvent::ObjectState(e), ts);
                self.after_reasoning(o, &mut out)?;
                self.advise(&mut out)?;
            }
            Payload::HoiEvent(e) => {
                let o = self.reasoning.observe(ReasoningEvent::Hoi(e), ts);
                self.after_reasoning(o, &mut out)?;
                self.advise(&mut out)?;
            }
            Payload::StepControl(c) => {
                let o = self.reasoning.observe(ReasoningEvent::Control(c.action), ts);
                self.after_reasoning(o, &mut out)?;
            }
            Payload::ErrorEvent(e) => {
                self.external.push(e.clone());
                self.refresh_guidance(&mut out)?;
            }
            Payload::DetectionSet(set) => {
                out.outputs.push(Arc::new(entry.clone()));
                self.update_memory(set, entry.ts_ns, &mut out);
                self.refresh_guidance(&mut out)?;
            }
            Payload::StepEstimate(_) => out.outputs.push(Arc::new(entry.clone())),
            _ => {}
        }
        Ok(out)
    }

    fn update_memory(&mut self, set: &crate::stream_bus::DetectionSet, ts: u64, out: &mut Emitted) {
        let pose = self
            .bus
            .snapshot_latest(&[topics::POSE], ts)
            .ok()
            .and_then(|m| m.into_values().next().flatten());
        let cam: CameraModel = match pose.as_ref().map(|e| &e.payload) {
            Some(Payload::CameraPose(c)) => c.clone(),
            _ => {
                out.notices.push("detections before any camera pose; memory not updated".into());
                return;
            }
        };
        let depth: Option<Vec<f32>> = set.depth_blob.as_ref().and_then(|d| self.bus.blob(d)).map(|b| {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        });
        let depth = depth.filter(|d| d.len() == (cam.width * cam.height) as usize);
        let mut pairs: Vec<(Detection2D, f64)> = Vec::new();
        for d in &set.detections {
            let (u, v) = d.detection.bbox.center();
            let z = d
                .depth_m
                .or_else(|| depth.as_ref().and_then(|m| sample_depth(m, cam.width, cam.height, u, v)));
            match z {
                Some(z) => pairs.push((d.detection.clone(), z)),
                None => out.notices.push(format!("no depth for {}", d.detection.class_label)),
            }
        }
        let (_, errors) = self.memory.update(&pairs, &cam, ts);
        for (i, e) in errors {
            out.notices.push(format!("detection {i}: {e}"));
        }
    }

    fn after_reasoning(&mut self, o: ObserveOutcome, out: &mut Emitted) -> Result<(), SessionError> {
        out.notices.extend(o.notices);
        for e in o.new_errors {
            self.bus.publish(topics::ERRORS, self.clock, Payload::ErrorEvent(e))?;
        }
        for ((from, to), est) in o.transitions.iter().zip(o.estimates) {
            let forward = self.reasoning.graph().successors(from).contains(&to.as_str());
            if forward {
                let p = completion_prompt(&self.reasoning, from, self.clock);
                self.emit_prompt(p, out)?;
            }
            self.emit_estimate(est, out)?;
        }
        if o.completed {
            let p = completion_prompt(&self.reasoning, self.reasoning.current_step(), self.clock);
            self.emit_prompt(p, out)?;
        }
        self.refresh_guidance(out)
    }

    fn advise(&mut self, out: &mut Emitted) -> Result<(), SessionError> {
        let Some(forest) = self.options.forest.clone() else { return Ok(()) };
        let hoi = HoiFeatures { per_class: self.reasoning.hoi().clone() };
        let x = self.encoder.encode(self.reasoning.latest_states(), &hoi);
        let p = rf_predict(&forest, &x).map_err(|e| SessionError::Reasoning(e.to_string()))?;
        let confidence = p
            .distribution
            .iter()
            .find(|(l, _)| *l == p.label)
            .map_or(0.0, |(_, v)| *v);
        let est = StepEstimate {
            step_id: p.label,
            confidence,
            source: EstimateSource::Rf,
            ts_ns: self.clock,
        };
        let seq = self.bus.publish(topics::ADVISORY, self.clock, Payload::StepEstimate(est))?;
        out.outputs.push(self.bus.entries(topics::ADVISORY)?[seq as usize - 1].clone());
        Ok(())
    }

    fn emit_prompt(&mut self, p: GuidancePrompt, out: &mut Emitted) -> Result<(), SessionError> {
        self.bus.publish(topics::GUIDANCE, p.ts_ns.max(self.clock), Payload::GuidancePrompt(p.clone()))?;
        out.records.push(GuidanceRecord::Prompt(p));
        Ok(())
    }

    fn emit_estimate(&mut self, e: StepEstimate, out: &mut Emitted) -> Result<(), SessionError> {
        let seq = self.bus.publish(topics::STEPS, self.clock, Payload::StepEstimate(e.clone()))?;
        out.outputs.push(self.bus.entries(topics::STEPS)?[seq as usize - 1].clone());
        out.records.push(GuidanceRecord::Estimate(e));
        Ok(())
    }

    /// Emits a warning when a new error is fresh, then the instruction block
    /// when it differs from the last one sent.
    fn refresh_guidance(&mut self, out: &mut Emitted) -> Result<(), SessionError> {
        let bundle = current_guidance(
            &self.reasoning,
            &self.memory,
            &self.options.guidance,
            self.options.simplifier.as_ref(),
            &self.external,
            self.clock,
        );
        if let Some(w) = &bundle.warning {
            let newest = self
                .reasoning
                .errors()
                .iter()
                .chain(&self.external)
                .enumerate()
                .max_by_key(|(i, e)| (e.detected_at_ns, *i))
                .map(|(_, e)| e.clone());
            if newest != self.last_warning {
                self.last_warning = newest;
                self.emit_prompt(w.clone(), out)?;
            }
        }
        let mut block = vec![bundle.instruction.clone()];
        block.extend(bundle.arrows.iter().cloned());
        let key: BlockKey = block
            .iter()
            .cloned()
            .map(|mut p| {
                p.ts_ns = 0;
                p
            })
            .collect();
        if self.last_block.as_ref() != Some(&key) {
            self.last_block = Some(key);
            for p in block {
                self.emit_prompt(p, out)?;
            }
        }
        Ok(())
    }

    /// Closes reasoning (session-end missing-step check) and publishes the
    /// final memory snapshot.
    pub fn finish(&mut self) -> Result<Emitted, SessionError> {
        let mut out = Emitted::default();
        let o = self.reasoning.finalize(self.clock);
        self.after_reasoning(o, &mut out)?;
        self.bus.publish(
            topics::MEMORY,
            self.clock,
            Payload::MemorySnapshot(MemorySnapshot { tracklets: self.memory.export() }),
        )?;
        Ok(out)
    }
}

/// Order in which a recorded session's inputs were consumed: the ingest
/// marks when present, otherwise the bus merge order over input topics.
pub fn recorded_inputs(source: &Bus) -> Result<Vec<Arc<StreamEntry>>, SessionError> {
    let marks = source.entries(topics::INGEST).unwrap_or_default();
    if marks.is_empty() {
        let plan = crate::stream_bus::ReplayPlan::new(source, is_input_topic)?;
        return Ok(plan.entries().to_vec());
    }
    let mut out = Vec::with_capacity(marks.len());
    for m in marks {
        let Payload::IngestMark(mark) = &m.payload else { continue };
        let entries = source.entries(&mark.topic)?;
        let e = entries
            .get((mark.seq as usize).wrapping_sub(1))
            .ok_or_else(|| SessionError::InvalidRecording(format!("ingest mark {}#{} has no entry", mark.topic, mark.seq)))?;
        out.push(e.clone());
    }
    Ok(out)
}
