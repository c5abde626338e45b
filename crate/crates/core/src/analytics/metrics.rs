use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::AnalyticsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Occurrences in the truth sequence.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub weighted_recall: f64,
    pub accuracy: f64,
}

impl EvalReport {
    /// One line in the tables' "mean±std" layout.
    pub fn table_row(&self) -> String {
        format!(
            "precision {} recall {} f1 {} accuracy {:.2}",
            self.precision, self.recall, self.f1, self.accuracy
        )
    }
}

/// Per-class precision, recall and F1 over the union of labels seen in
/// either sequence; a class never predicted has precision 0, and F1 is 0
/// when precision and recall are both 0.
pub fn eval_metrics(predictions: &[String], truth: &[String]) -> Result<EvalReport, AnalyticsError> {
    if predictions.len() != truth.len() {
        return Err(AnalyticsError::LengthMismatch(predictions.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    // (true positives, predicted count, truth count)
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for (p, t) in predictions.iter().zip(truth) {
        counts.entry(p).or_default().1 += 1;
        let e = counts.entry(t).or_default();
        e.2 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let classes: Vec<ClassMetrics> = counts
        .into_iter()
        .map(|(label, (tp, predicted, support))| {
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics { label: label.to_string(), precision, recall, f1, support }
        })
        .collect();
    let n = truth.len();
    let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    let weighted_recall = classes.iter().map(|c| c.recall * c.support as f64).sum::<f64>() / n as f64;
    let col = |f: fn(&ClassMetrics) -> f64| MeanStd::of(&classes.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        precision: col(|c| c.precision),
        recall: col(|c| c.recall),
        f1: col(|c| c.f1),
        weighted_recall,
        accuracy: correct as f64 / n as f64,
        classes,
    })
}
