use std::io::Cursor;

use quick_xml::events::{BytesDecl, BytesEnd, BytesStart, BytesText, Event};
use quick_xml::Writer;
use serde::{Deserialize, Serialize};

use super::{entries_or_empty, step_spans, AnalyticsError};
use crate::reasoning::{InstructionSimplifier, RuleSimplifier};
use crate::stream_bus::{topics, Bus, Hand, InteractionLevel, Payload};
use crate::task_model::TaskGraph;

/// One executed step as written to the session document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentStep {
    pub step_id: String,
    pub instruction: String,
    pub start_ns: u64,
    pub end_ns: u64,
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub narrative: String,
}

impl DocumentStep {
    pub fn duration_s(&self) -> f64 {
        (self.end_ns - self.start_ns) as f64 * 1e-9
    }
}

fn secs(ns: u64) -> String {
    format!("{:.3}", ns as f64 * 1e-9)
}

/// Renders steps as `<session><step ...><actions/><objects/><narrative/></step>...</session>`.
pub fn session_document(session_id: &str, task_id: &str, steps: &[DocumentStep]) -> Result<String, AnalyticsError> {
    let xml = |e: std::io::Error| AnalyticsError::Xml(e.to_string());
    let mut w = Writer::new_with_indent(Cursor::new(Vec::new()), b' ', 2);
    w.write_event(Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None))).map_err(xml)?;
    let total: f64 = steps.iter().map(DocumentStep::duration_s).sum();
    let total = format!("{total:.3}");
    let count = steps.len().to_string();
    let root = BytesStart::new("session").with_attributes([
        ("id", session_id),
        ("task", task_id),
        ("steps", count.as_str()),
        ("duration", total.as_str()),
    ]);
    w.write_event(Event::Start(root)).map_err(xml)?;
    for s in steps {
        let (start, end, dur) = (secs(s.start_ns), secs(s.end_ns), format!("{:.3}", s.duration_s()));
        let el = BytesStart::new("step").with_attributes([
            ("id", s.step_id.as_str()),
            ("instruction", s.instruction.as_str()),
            ("start", start.as_str()),
            ("end", end.as_str()),
            ("duration", dur.as_str()),
        ]);
        w.write_event(Event::Start(el)).map_err(xml)?;
        for (group, item, values) in [("actions", "action", &s.actions), ("objects", "object", &s.objects)] {
            w.write_event(Event::Start(BytesStart::new(group))).map_err(xml)?;
            for v in values {
                w.write_event(Event::Start(BytesStart::new(item))).map_err(xml)?;
                w.write_event(Event::Text(BytesText::new(v))).map_err(xml)?;
                w.write_event(Event::End(BytesEnd::new(item))).map_err(xml)?;
            }
            w.write_event(Event::End(BytesEnd::new(group))).map_err(xml)?;
        }
        w.write_event(Event::Start(BytesStart::new("narrative"))).map_err(xml)?;
        w.write_event(Event::Text(BytesText::new(&s.narrative))).map_err(xml)?;
        w.write_event(Event::End(BytesEnd::new("narrative"))).map_err(xml)?;
        w.write_event(Event::End(BytesEnd::new("step"))).map_err(xml)?;
    }
    w.write_event(Event::End(BytesEnd::new("session"))).map_err(xml)?;
    let mut out = String::from_utf8(w.into_inner().into_inner()).expect("writer emits UTF-8");
    out.push('\n');
    Ok(out)
}

fn hoi_phrase(hand: Hand, level: InteractionLevel, class: &str) -> String {
    let hand = match hand {
        Hand::Left => "left hand",
        Hand::Right => "right hand",
        Hand::Both => "both hands",
        Hand::None => "no hand",
    };
    let level = match level {
        InteractionLevel::Direct => "direct",
        InteractionLevel::Indirect => "indirect",
        InteractionLevel::None => "no",
    };
    format!("{hand}, {level} contact with {class}")
}

/// Builds the document from the step history on the reasoning topic. Actions
/// are the distinct hand-object interactions and objects the distinct
/// detected classes inside each step's span.
pub fn session_document_from_bus(bus: &Bus, graph: Option<&TaskGraph>) -> Result<String, AnalyticsError> {
    let spans = step_spans(bus)?;
    let hoi = entries_or_empty(bus, topics::HOI);
    let dets = entries_or_empty(bus, topics::DETECTIONS);
    let n = spans.len();
    let steps: Vec<DocumentStep> = spans
        .into_iter()
        .enumerate()
        .map(|(i, (step_id, span))| {
            // the last span is closed at the session end
            let inside = |ts: u64| ts >= span.start_ns && (ts < span.end_ns || (i + 1 == n && ts == span.end_ns));
            let mut actions: Vec<String> = Vec::new();
            for e in hoi.iter().filter(|e| inside(e.ts_ns)) {
                if let Payload::HoiEvent(h) = &e.payload {
                    let a = hoi_phrase(h.hand, h.level, &h.object_class);
                    if !actions.contains(&a) {
                        actions.push(a);
                    }
                }
            }
            let mut objects: Vec<String> = dets
                .iter()
                .filter(|e| inside(e.ts_ns))
                .filter_map(|e| match &e.payload {
                    Payload::DetectionSet(s) => Some(s.detections.iter().map(|d| d.detection.class_label.clone())),
                    _ => None,
                })
                .flatten()
                .collect();
            objects.sort();
            objects.dedup();
            let instruction = graph
                .and_then(|g| g.step(&step_id))
                .map_or_else(|| step_id.clone(), |s| s.instruction.clone());
            let mut doc = DocumentStep {
                step_id,
                instruction,
                start_ns: span.start_ns,
                end_ns: span.end_ns,
                actions,
                objects,
                narrative: String::new(),
            };
            doc.narrative = format!(
                "{} Took {:.1} s with {} interaction(s).",
                RuleSimplifier.simplify(&doc.instruction, &[]),
                doc.duration_s(),
                doc.actions.len()
            );
            doc
        })
        .collect();
    session_document(bus.session_id(), bus.task_id(), &steps)
}
