use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{cosine_similarity, norm, FeatureSource, FeatureVector, PerceptionError};

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectStateExample {
    pub embedding: FeatureVector,
    pub object_class: String,
    pub state_label: String,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ExampleLine {
    embedding: Vec<f64>,
    class: String,
    state: String,
}

/// Reads an example corpus: one `{embedding, class, state}` JSON object per line.
pub fn load_examples(reader: impl BufRead) -> Result<Vec<ObjectStateExample>, PerceptionError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let err = |message: String| PerceptionError::Corpus { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(ObjectStateExample {
            embedding: FeatureVector::new(FeatureSource::Region, rec.embedding)
                .map_err(|e| err(e.to_string()))?,
            object_class: rec.class,
            state_label: rec.state,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnPrediction {
    pub object_class: String,
    pub state_label: String,
    /// Fraction of the `k` neighbours voting for the winning label.
    pub score: f64,
}

/// Majority vote over the `k` nearest examples by cosine distance. Ties go to
/// the label whose voters have the smaller mean distance, then to the
/// lexicographically smaller `(class, state)`.
pub fn knn_classify(
    examples: &[ObjectStateExample],
    query: &FeatureVector,
    k: usize,
) -> Result<KnnPrediction, PerceptionError> {
    if examples.is_empty() {
        return Err(PerceptionError::Empty("example set"));
    }
    if k == 0 || k > examples.len() {
        return Err(PerceptionError::InvalidParameter(format!(
            "k must be in 1..={}, got {k}",
            examples.len()
        )));
    }
    if norm(&query.values) == 0.0 {
        return Err(PerceptionError::ZeroNorm("query"));
    }
    let mut scored = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        if ex.embedding.dims() != query.dims() {
            return Err(PerceptionError::DimensionMismatch {
                expected: query.dims(),
                got: ex.embedding.dims(),
                context: "example embedding",
            });
        }
        let sim = cosine_similarity(&query.values, &ex.embedding.values)
            .ok_or(PerceptionError::ZeroNorm("example"))?;
        scored.push((1.0 - sim, i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut votes: BTreeMap<(&str, &str), (usize, f64)> = BTreeMap::new();
    for &(dist, i) in &scored[..k] {
        let ex = &examples[i];
        let slot = votes
            .entry((ex.object_class.as_str(), ex.state_label.as_str()))
            .or_insert((0, 0.0));
        slot.0 += 1;
        slot.1 += dist;
    }
    // BTreeMap iterates in label order, so a strict comparison keeps the
    // lexicographically smallest label among exact ties.
    let mut best: Option<((&str, &str), usize, f64)> = None;
    for (label, (count, dist_sum)) in votes {
        let mean = dist_sum / count as f64;
        let better = match best {
            None => true,
            Some((_, bc, bm)) => count > bc || (count == bc && mean < bm),
        };
        if better {
            best = Some((label, count, mean));
        }
    }
    let ((class, state), count, _) = best.expect("k >= 1 yields at least one vote");
    Ok(KnnPrediction {
        object_class: class.to_string(),
        state_label: state.to_string(),
        score: count as f64 / k as f64,
    })
}
