//! Desk-scale perception: sliding feature windows, global/region feature
//! fusion, a GRU step predictor and a kNN object-state classifier.
//!
//! Feature vectors arrive from fixtures or replayed streams; no pretrained
//! network runs here.

mod fusion;
mod gru;
mod knn;
mod window;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fusion::{fuse_features, fusion_weights, gru_input, FusionConfig};
pub use gru::{
    gru_backward, gru_forward, gru_train_epoch, sequence_loss, GruForward, GruGradients, GruWeights,
};
pub use knn::{knn_classify, load_examples, KnnPrediction, ObjectStateExample};
pub use window::{assemble_windows, FeatureStreams, FrameFeatures, WindowSample, WindowSlot};

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("zero-norm {0} vector")]
    ZeroNorm(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("wrong feature source: expected {expected:?}, got {got:?}")]
    WrongSource {
        expected: FeatureSource,
        got: FeatureSource,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("label index {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("malformed example corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Action,
    Global,
    Region,
    Sound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source: FeatureSource,
}

impl FeatureVector {
    pub fn new(source: FeatureSource, values: Vec<f64>) -> Result<Self, PerceptionError> {
        if values.is_empty() {
            return Err(PerceptionError::Empty("feature vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PerceptionError::NonFinite("feature vector"));
        }
        Ok(FeatureVector { values, source })
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(dot / (na * nb))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Affine map `y = W x + b`. Serialized as a row-major weight matrix and a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self, PerceptionError> {
        if weight.nrows() != bias.len() {
            return Err(PerceptionError::DimensionMismatch {
                expected: weight.nrows(),
                got: bias.len(),
                context: "linear bias",
            });
        }
        Ok(Linear { weight, bias })
    }

    pub fn identity(n: usize) -> Self {
        Linear {
            weight: DMatrix::identity(n, n),
            bias: DVector::zeros(n),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>, PerceptionError> {
        if x.len() != self.input_dim() {
            return Err(PerceptionError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
                context: "linear input",
            });
        }
        Ok(&self.weight * DVector::from_column_slice(x) + &self.bias)
    }
}

#[derive(Serialize, Deserialize)]
struct LinearDoc {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Serialize for Linear {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        LinearDoc {
            weight: matrix_rows(&self.weight),
            bias: self.bias.iter().copied().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Linear {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = LinearDoc::deserialize(d)?;
        let weight = matrix_from_rows(&doc.weight, None).map_err(serde::de::Error::custom)?;
        Linear::new(weight, DVector::from_vec(doc.bias)).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Builds a matrix from row-major nested arrays. `cols_hint` fixes the column
/// count for matrices with zero rows.
pub(crate) fn matrix_from_rows(
    rows: &[Vec<f64>],
    cols_hint: Option<usize>,
) -> Result<DMatrix<f64>, String> {
    let ncols = rows.first().map(Vec::len).or(cols_hint).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite matrix entry".into());
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}
