use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{entries_or_empty, AnalyticsError};
use crate::stream_bus::{topics, Bus, Payload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputCategory {
    Objects,
    States,
    Actions,
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSample {
    pub category: OutputCategory,
    pub label: String,
    pub ts_ns: u64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub category: OutputCategory,
    pub label: String,
    /// One cell per bin; `None` when the label had no output in that bin.
    pub cells: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceMatrix {
    pub categories: Vec<OutputCategory>,
    pub t0_ns: u64,
    pub bin_width_ns: u64,
    pub bin_count: usize,
    pub aggregation: Aggregation,
    /// Ordered by category, then label.
    pub rows: Vec<MatrixRow>,
}

/// Model outputs recorded in a session. Detections are objects; object-state
/// events are states (`class:state`); hand-object interactions are actions
/// (`class:hand-level`); advisory step estimates are steps. Events without a
/// confidence count as 1.0.
pub fn collect_outputs(bus: &Bus) -> Vec<OutputSample> {
    let mut out = Vec::new();
    let mut push = |category, label: String, ts_ns, confidence: f64| {
        out.push(OutputSample { category, label, ts_ns, confidence })
    };
    for e in entries_or_empty(bus, topics::DETECTIONS) {
        if let Payload::DetectionSet(set) = &e.payload {
            for d in &set.detections {
                push(OutputCategory::Objects, d.detection.class_label.clone(), e.ts_ns, d.detection.confidence);
            }
        }
    }
    for e in entries_or_empty(bus, topics::OBJECT_STATES) {
        if let Payload::ObjectStateEvent(s) = &e.payload {
            let label = format!("{}:{}", s.object_class, s.state_label);
            push(OutputCategory::States, label, e.ts_ns, s.confidence.unwrap_or(1.0));
        }
    }
    for e in entries_or_empty(bus, topics::HOI) {
        if let Payload::HoiEvent(h) = &e.payload {
            let label = format!("{}:{}-{}", h.object_class, snake(&h.hand), snake(&h.level));
            push(OutputCategory::Actions, label, e.ts_ns, h.confidence.unwrap_or(1.0));
        }
    }
    for e in entries_or_empty(bus, topics::ADVISORY) {
        if let Payload::StepEstimate(s) = &e.payload {
            push(OutputCategory::Steps, s.step_id.clone(), e.ts_ns, s.confidence);
        }
    }
    out
}

fn snake<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

/// Label x time-bin grid. Bins start at the earliest output; there are
/// `ceil(span / width)` of them (at least one), and an output exactly at the
/// last timestamp falls in the final bin.
pub fn confidence_matrix(
    samples: &[OutputSample],
    bin_width_ns: u64,
    aggregation: Aggregation,
) -> Result<ConfidenceMatrix, AnalyticsError> {
    if bin_width_ns == 0 {
        return Err(AnalyticsError::ZeroBinWidth);
    }
    let Some(t0) = samples.iter().map(|s| s.ts_ns).min() else {
        return Ok(ConfidenceMatrix {
            categories: Vec::new(),
            t0_ns: 0,
            bin_width_ns,
            bin_count: 0,
            aggregation,
            rows: Vec::new(),
        });
    };
    let t1 = samples.iter().map(|s| s.ts_ns).max().unwrap_or(t0);
    let bin_count = ((t1 - t0).div_ceil(bin_width_ns)).max(1) as usize;

    let mut groups: BTreeMap<(OutputCategory, &str), Vec<Vec<f64>>> = BTreeMap::new();
    for s in samples {
        let bin = (((s.ts_ns - t0) / bin_width_ns) as usize).min(bin_count - 1);
        groups
            .entry((s.category, s.label.as_str()))
            .or_insert_with(|| vec![Vec::new(); bin_count])[bin]
            .push(s.confidence);
    }
    let rows: Vec<MatrixRow> = groups
        .into_iter()
        .map(|((category, label), bins)| MatrixRow {
            category,
            label: label.to_string(),
            cells: bins
                .into_iter()
                .map(|mut vals| {
                    if vals.is_empty() {
                        return None;
                    }
                    // sorted so the cell does not depend on arrival order
                    vals.sort_by(f64::total_cmp);
                    Some(match aggregation {
                        Aggregation::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                        Aggregation::Max => vals[vals.len() - 1],
                    })
                })
                .collect(),
        })
        .collect();
    let mut categories: Vec<OutputCategory> = rows.iter().map(|r| r.category).collect();
    categories.dedup();
    Ok(ConfidenceMatrix {
        categories,
        t0_ns: t0,
        bin_width_ns,
        bin_count,
        aggregation,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSummary {
    pub category: OutputCategory,
    pub label: String,
    /// Mean over every bin where the label is present.
    pub average: f64,
    /// Fraction of all bins whose cell is present and at least the threshold.
    pub coverage: f64,
}

pub fn global_summaries(m: &ConfidenceMatrix, presence_threshold: f64) -> Result<Vec<GlobalSummary>, AnalyticsError> {
    if !(0.0..=1.0).contains(&presence_threshold) {
        return Err(AnalyticsError::Threshold(presence_threshold));
    }
    Ok(m.rows
        .iter()
        .map(|r| {
            let present: Vec<f64> = r.cells.iter().flatten().copied().collect();
            let qualifying = present.iter().filter(|&&v| v >= presence_threshold).count();
            GlobalSummary {
                category: r.category,
                label: r.label.clone(),
                average: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
                coverage: if m.bin_count == 0 { 0.0 } else { qualifying as f64 / m.bin_count as f64 },
            }
        })
        .collect())
}
