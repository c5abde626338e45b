use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::timeline::{ProcedureSegment, TimelineRow, WorkloadSegment};
use crate::stream_bus::WorkloadCategory;

/// Per-procedure aggregate across sessions. Arrays are indexed like
/// `WorkloadCategory::ALL` (underload, optimal, overload).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub label: String,
    pub frequency: usize,
    pub error_rate: f64,
    /// Time-weighted category shares during the procedure; `None` when no
    /// workload sample covers any of its instances.
    pub workload_distribution: Option<[f64; 3]>,
    /// Numerators of the distribution, in nanoseconds.
    pub workload_ns: [u64; 3],
    /// Phi between "instance has an error" and "category dominates the instance".
    pub correlation: [f64; 3],
}

/// Phi coefficient of a 2x2 table `[[n11, n10], [n01, n00]]`; 0 when any
/// marginal is empty.
pub fn phi_coefficient(n11: u64, n10: u64, n01: u64, n00: u64) -> f64 {
    let r1 = (n11 + n10) as f64;
    let r0 = (n01 + n00) as f64;
    let c1 = (n11 + n01) as f64;
    let c0 = (n10 + n00) as f64;
    let denom = r1 * r0 * c1 * c0;
    if denom == 0.0 {
        return 0.0;
    }
    let phi = (n11 as f64 * n00 as f64 - n10 as f64 * n01 as f64) / denom.sqrt();
    phi.clamp(-1.0, 1.0)
}

fn overlap(a0: u64, a1: u64, b0: u64, b1: u64) -> u64 {
    a1.min(b1).saturating_sub(a0.max(b0))
}

fn instance_workload(seg: &ProcedureSegment, workload: &[WorkloadSegment]) -> [u64; 3] {
    let mut t = [0u64; 3];
    for w in workload {
        t[w.category.index()] += overlap(seg.t_start_ns, seg.t_end_ns, w.t_start_ns, w.t_end_ns);
    }
    t
}

/// Category with the most time in the instance; lowest index on ties, none
/// when the instance has no workload coverage.
fn dominant(t: &[u64; 3]) -> Option<usize> {
    let max = *t.iter().max()?;
    if max == 0 {
        return None;
    }
    t.iter().position(|&v| v == max)
}

pub fn summary_matrix(rows: &[TimelineRow]) -> Vec<SummaryCell> {
    let mut by_label: BTreeMap<&str, Vec<(bool, [u64; 3])>> = BTreeMap::new();
    for row in rows {
        for seg in &row.procedure_segments {
            by_label
                .entry(seg.label.as_str())
                .or_default()
                .push((seg.error, instance_workload(seg, &row.workload_segments)));
        }
    }
    by_label
        .into_iter()
        .map(|(label, instances)| {
            let n = instances.len();
            let errors = instances.iter().filter(|(e, _)| *e).count();
            let mut totals = [0u64; 3];
            for (_, t) in &instances {
                for (acc, v) in totals.iter_mut().zip(t) {
                    *acc += v;
                }
            }
            let sum: u64 = totals.iter().sum();
            let workload_distribution =
                (sum > 0).then(|| totals.map(|v| v as f64 / sum as f64));
            let mut correlation = [0.0; 3];
            for cat in WorkloadCategory::ALL {
                let c = cat.index();
                let (mut n11, mut n10, mut n01, mut n00) = (0, 0, 0, 0);
                for (err, t) in &instances {
                    match (*err, dominant(t) == Some(c)) {
                        (true, true) => n11 += 1,
                        (true, false) => n10 += 1,
                        (false, true) => n01 += 1,
                        (false, false) => n00 += 1,
                    }
                }
                correlation[c] = phi_coefficient(n11, n10, n01, n00);
            }
            SummaryCell {
                label: label.to_string(),
                frequency: n,
                error_rate: errors as f64 / n as f64,
                workload_distribution,
                workload_ns: totals,
                correlation,
            }
        })
        .collect()
}
