//! GRU step predictor with a softmax readout, plus backpropagation through time.
//!
//! Per timestep, with input `x` and previous hidden state `h`:
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! h~ = tanh(W_h x + U_h (r * h) + b_h)
//! h' = (1 - z) * h + z * h~
//! p  = softmax(W_out h' + b_out)
//! ```
//!
//! The update gate blends toward the candidate state. The training loss is the
//! cross-entropy summed over timesteps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{matrix_from_rows, matrix_rows, softmax, FeatureVector, PerceptionError};

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_steps: usize,
    pub w_z: DMatrix<f64>,
    pub w_r: DMatrix<f64>,
    pub w_h: DMatrix<f64>,
    pub u_z: DMatrix<f64>,
    pub u_r: DMatrix<f64>,
    pub u_h: DMatrix<f64>,
    pub b_z: DVector<f64>,
    pub b_r: DVector<f64>,
    pub b_h: DVector<f64>,
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

/// Gradients share the weight layout.
pub type GruGradients = GruWeights;

impl GruWeights {
    pub fn zeros(input_dim: usize, hidden_dim: usize, n_steps: usize) -> Self {
        let m = |r, c| DMatrix::zeros(r, c);
        GruWeights {
            input_dim,
            hidden_dim,
            n_steps,
            w_z: m(hidden_dim, input_dim),
            w_r: m(hidden_dim, input_dim),
            w_h: m(hidden_dim, input_dim),
            u_z: m(hidden_dim, hidden_dim),
            u_r: m(hidden_dim, hidden_dim),
            u_h: m(hidden_dim, hidden_dim),
            b_z: DVector::zeros(hidden_dim),
            b_r: DVector::zeros(hidden_dim),
            b_h: DVector::zeros(hidden_dim),
            w_out: m(n_steps, hidden_dim),
            b_out: DVector::zeros(n_steps),
        }
    }

    /// Uniform initialization in `[-scale, scale]` from a seeded generator.
    pub fn random(input_dim: usize, hidden_dim: usize, n_steps: usize, scale: f64, rng: &mut impl rand::Rng) -> Self {
        let mut w = Self::zeros(input_dim, hidden_dim, n_steps);
        let mut flat = w.to_flat();
        for v in &mut flat {
            *v = rng.gen_range(-scale..=scale);
        }
        w.set_flat(&flat);
        w
    }

    fn matrices(&self) -> [&DMatrix<f64>; 7] {
        [&self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.w_out]
    }

    fn vectors(&self) -> [&DVector<f64>; 4] {
        [&self.b_z, &self.b_r, &self.b_h, &self.b_out]
    }

    /// All parameters in a fixed order: the seven matrices (column-major
    /// storage order), then the four bias vectors.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in self.matrices() {
            out.extend_from_slice(m.as_slice());
        }
        for v in self.vectors() {
            out.extend_from_slice(v.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for m in [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.w_out,
        ] {
            for v in m.as_mut_slice() {
                *v = it.next().expect("flat parameter vector too short");
            }
        }
        for b in [&mut self.b_z, &mut self.b_r, &mut self.b_h, &mut self.b_out] {
            for v in b.as_mut_slice() {
                *v = it.next().expect("flat parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum::<usize>()
            + self.vectors().iter().map(|v| v.len()).sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        let (i, h, n) = (self.input_dim, self.hidden_dim, self.n_steps);
        if i == 0 || h == 0 || n == 0 {
            return Err(PerceptionError::InvalidParameter("GRU dimensions must be positive".into()));
        }
        let checks: [(&DMatrix<f64>, usize, usize, &'static str); 7] = [
            (&self.w_z, h, i, "w_z"),
            (&self.w_r, h, i, "w_r"),
            (&self.w_h, h, i, "w_h"),
            (&self.u_z, h, h, "u_z"),
            (&self.u_r, h, h, "u_r"),
            (&self.u_h, h, h, "u_h"),
            (&self.w_out, n, h, "w_out"),
        ];
        for (m, r, c, name) in checks {
            if m.nrows() != r || m.ncols() != c {
                return Err(PerceptionError::DimensionMismatch {
                    expected: r * c,
                    got: m.len(),
                    context: name,
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(PerceptionError::NonFinite(name));
            }
        }
        for (v, len, name) in [
            (&self.b_z, h, "b_z"),
            (&self.b_r, h, "b_r"),
            (&self.b_h, h, "b_h"),
            (&self.b_out, n, "b_out"),
        ] {
            if v.len() != len {
                return Err(PerceptionError::DimensionMismatch {
                    expected: len,
                    got: v.len(),
                    context: name,
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(PerceptionError::NonFinite(name));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GruDoc {
    input_dim: usize,
    hidden_dim: usize,
    n_steps: usize,
    w_z: Vec<Vec<f64>>,
    w_r: Vec<Vec<f64>>,
    w_h: Vec<Vec<f64>>,
    u_z: Vec<Vec<f64>>,
    u_r: Vec<Vec<f64>>,
    u_h: Vec<Vec<f64>>,
    b_z: Vec<f64>,
    b_r: Vec<f64>,
    b_h: Vec<f64>,
    w_out: Vec<Vec<f64>>,
    b_out: Vec<f64>,
}

impl Serialize for GruWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v = |x: &DVector<f64>| x.iter().copied().collect::<Vec<_>>();
        GruDoc {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            n_steps: self.n_steps,
            w_z: matrix_rows(&self.w_z),
            w_r: matrix_rows(&self.w_r),
            w_h: matrix_rows(&self.w_h),
            u_z: matrix_rows(&self.u_z),
            u_r: matrix_rows(&self.u_r),
            u_h: matrix_rows(&self.u_h),
            b_z: v(&self.b_z),
            b_r: v(&self.b_r),
            b_h: v(&self.b_h),
            w_out: matrix_rows(&self.w_out),
            b_out: v(&self.b_out),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GruWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let doc = GruDoc::deserialize(d)?;
        let (i, h) = (doc.input_dim, doc.hidden_dim);
        let m = |rows: &[Vec<f64>], cols| matrix_from_rows(rows, Some(cols)).map_err(D::Error::custom);
        let w = GruWeights {
            input_dim: i,
            hidden_dim: h,
            n_steps: doc.n_steps,
            w_z: m(&doc.w_z, i)?,
            w_r: m(&doc.w_r, i)?,
            w_h: m(&doc.w_h, i)?,
            u_z: m(&doc.u_z, h)?,
            u_r: m(&doc.u_r, h)?,
            u_h: m(&doc.u_h, h)?,
            b_z: DVector::from_vec(doc.b_z),
            b_r: DVector::from_vec(doc.b_r),
            b_h: DVector::from_vec(doc.b_h),
            w_out: m(&doc.w_out, h)?,
            b_out: DVector::from_vec(doc.b_out),
        };
        w.validate().map_err(D::Error::custom)?;
        Ok(w)
    }
}

/// Hidden states and per-timestep class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct GruForward {
    pub hidden: Vec<DVector<f64>>,
    pub probabilities: Vec<Vec<f64>>,
}

struct StepTrace {
    x: DVector<f64>,
    h_prev: DVector<f64>,
    z: DVector<f64>,
    r: DVector<f64>,
    cand: DVector<f64>,
    h: DVector<f64>,
    p: Vec<f64>,
}

fn sigmoid(v: DVector<f64>) -> DVector<f64> {
    v.map(|a| 1.0 / (1.0 + (-a).exp()))
}

fn check_inputs<X: AsRef<[f64]>>(w: &GruWeights, xs: &[X], h0: &[f64]) -> Result<(), PerceptionError> {
    w.validate()?;
    if h0.len() != w.hidden_dim {
        return Err(PerceptionError::DimensionMismatch {
            expected: w.hidden_dim,
            got: h0.len(),
            context: "initial hidden state",
        });
    }
    for x in xs {
        if x.as_ref().len() != w.input_dim {
            return Err(PerceptionError::DimensionMismatch {
                expected: w.input_dim,
                got: x.as_ref().len(),
                context: "GRU input",
            });
        }
    }
    Ok(())
}

fn run<X: AsRef<[f64]>>(w: &GruWeights, xs: &[X], h0: &[f64]) -> Result<Vec<StepTrace>, PerceptionError> {
    check_inputs(w, xs, h0)?;
    let mut h = DVector::from_column_slice(h0);
    let mut trace = Vec::with_capacity(xs.len());
    for x in xs {
        let x = DVector::from_column_slice(x.as_ref());
        let z = sigmoid(&w.w_z * &x + &w.u_z * &h + &w.b_z);
        let r = sigmoid(&w.w_r * &x + &w.u_r * &h + &w.b_r);
        let cand = (&w.w_h * &x + &w.u_h * r.component_mul(&h) + &w.b_h).map(f64::tanh);
        let h_next = (DVector::repeat(w.hidden_dim, 1.0) - &z).component_mul(&h) + z.component_mul(&cand);
        let logits = &w.w_out * &h_next + &w.b_out;
        if h_next.iter().chain(logits.iter()).any(|v| !v.is_finite()) {
            return Err(PerceptionError::NonFinite("GRU activation"));
        }
        let p = softmax(logits.as_slice());
        trace.push(StepTrace {
            x,
            h_prev: h,
            z,
            r,
            cand,
            h: h_next.clone(),
            p,
        });
        h = h_next;
    }
    Ok(trace)
}

pub fn gru_forward<X: AsRef<[f64]>>(
    w: &GruWeights,
    xs: &[X],
    h0: &[f64],
) -> Result<GruForward, PerceptionError> {
    let trace = run(w, xs, h0)?;
    Ok(GruForward {
        hidden: trace.iter().map(|t| t.h.clone()).collect(),
        probabilities: trace.into_iter().map(|t| t.p).collect(),
    })
}

fn check_targets(w: &GruWeights, targets: &[usize], len: usize) -> Result<(), PerceptionError> {
    if targets.len() != len {
        return Err(PerceptionError::DimensionMismatch {
            expected: len,
            got: targets.len(),
            context: "target labels",
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= w.n_steps) {
        return Err(PerceptionError::BadLabel {
            label: bad,
            classes: w.n_steps,
        });
    }
    Ok(())
}

/// Cross-entropy summed over the sequence.
pub fn sequence_loss<X: AsRef<[f64]>>(
    w: &GruWeights,
    xs: &[X],
    h0: &[f64],
    targets: &[usize],
) -> Result<f64, PerceptionError> {
    check_targets(w, targets, xs.len())?;
    let trace = run(w, xs, h0)?;
    Ok(trace.iter().zip(targets).map(|(t, &y)| -t.p[y].ln()).sum())
}

/// Gradient of the summed cross-entropy with respect to every weight, by
/// backpropagation through time over the whole sequence.
pub fn gru_backward<X: AsRef<[f64]>>(
    w: &GruWeights,
    xs: &[X],
    h0: &[f64],
    targets: &[usize],
) -> Result<GruGradients, PerceptionError> {
    check_targets(w, targets, xs.len())?;
    let trace = run(w, xs, h0)?;
    let mut g = GruWeights::zeros(w.input_dim, w.hidden_dim, w.n_steps);
    let ones = DVector::repeat(w.hidden_dim, 1.0);
    let mut dh_next = DVector::zeros(w.hidden_dim);

    for (t, &y) in trace.iter().zip(targets).rev() {
        let mut d_logits = DVector::from_column_slice(&t.p);
        d_logits[y] -= 1.0;
        g.w_out += &d_logits * t.h.transpose();
        g.b_out += &d_logits;
        let dh = w.w_out.transpose() * &d_logits + &dh_next;

        let dz = dh.component_mul(&(&t.cand - &t.h_prev));
        let dcand = dh.component_mul(&t.z);
        let mut dh_prev = dh.component_mul(&(&ones - &t.z));

        let da_h = dcand.component_mul(&t.cand.map(|c| 1.0 - c * c));
        let rh = t.r.component_mul(&t.h_prev);
        g.w_h += &da_h * t.x.transpose();
        g.u_h += &da_h * rh.transpose();
        g.b_h += &da_h;
        let d_rh = w.u_h.transpose() * &da_h;
        let dr = d_rh.component_mul(&t.h_prev);
        dh_prev += d_rh.component_mul(&t.r);

        let da_z = dz.component_mul(&t.z.map(|s| s * (1.0 - s)));
        g.w_z += &da_z * t.x.transpose();
        g.u_z += &da_z * t.h_prev.transpose();
        g.b_z += &da_z;
        dh_prev += w.u_z.transpose() * &da_z;

        let da_r = dr.component_mul(&t.r.map(|s| s * (1.0 - s)));
        g.w_r += &da_r * t.x.transpose();
        g.u_r += &da_r * t.h_prev.transpose();
        g.b_r += &da_r;
        dh_prev += w.u_r.transpose() * &da_r;

        dh_next = dh_prev;
    }
    Ok(g)
}

/// One pass of plain gradient descent, one update per sequence. Returns the
/// summed loss measured before each update.
pub fn gru_train_epoch(
    w: &mut GruWeights,
    sequences: &[(Vec<Vec<f64>>, Vec<usize>)],
    learning_rate: f64,
) -> Result<f64, PerceptionError> {
    let h0 = vec![0.0; w.hidden_dim];
    let mut total = 0.0;
    for (xs, ys) in sequences {
        total += sequence_loss(w, xs, &h0, ys)?;
        let g = gru_backward(w, xs, &h0, ys)?;
        let flat: Vec<f64> = w
            .to_flat()
            .iter()
            .zip(g.to_flat())
            .map(|(p, d)| p - learning_rate * d)
            .collect();
        w.set_flat(&flat);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_fixed_point() {
        let w = GruWeights::zeros(3, 4, 5);
        let xs = vec![vec![1.0, -2.0, 0.5]; 3];
        let out = gru_forward(&w, &xs, &[0.0; 4]).unwrap();
        for (h, p) in out.hidden.iter().zip(&out.probabilities) {
            assert!(h.iter().all(|&v| v == 0.0));
            assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn wrong_input_dims() {
        let w = GruWeights::zeros(3, 2, 2);
        assert!(matches!(
            gru_forward(&w, &[vec![1.0, 2.0]], &[0.0; 2]),
            Err(PerceptionError::DimensionMismatch { .. })
        ));
        assert!(gru_forward(&w, &[vec![1.0; 3]], &[0.0; 3]).is_err());
        assert!(matches!(
            gru_backward(&w, &[vec![1.0; 3]], &[0.0; 2], &[7]),
            Err(PerceptionError::BadLabel { .. })
        ));
    }

    #[test]
    fn empty_sequence_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = GruWeights::random(2, 3, 2, 0.5, &mut rng);
        let g = gru_backward::<Vec<f64>>(&w, &[], &[0.1, 0.2, 0.3], &[]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert_eq!(g.param_count(), w.param_count());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = GruWeights::random(2, 3, 2, 0.8, &mut rng);
        let xs = vec![vec![0.3, -0.7], vec![1.1, 0.4], vec![-0.5, 0.9]];
        let h0 = [0.05, -0.1, 0.2];
        let ys = [0, 1, 1];
        let g = gru_backward(&w, &xs, &h0, &ys).unwrap().to_flat();
        let base = w.to_flat();
        let eps = 1e-5;
        for i in 0..base.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            let mut p = base.clone();
            p[i] += eps;
            plus.set_flat(&p);
            p[i] -= 2.0 * eps;
            minus.set_flat(&p);
            let fd = (sequence_loss(&plus, &xs, &h0, &ys).unwrap()
                - sequence_loss(&minus, &xs, &h0, &ys).unwrap())
                / (2.0 * eps);
            let scale = g[i].abs().max(fd.abs()).max(1e-8);
            assert!((g[i] - fd).abs() / scale < 1e-4 || (g[i] - fd).abs() < 1e-9, "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn json_round_trip_is_row_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = GruWeights::random(2, 3, 4, 1.0, &mut rng);
        let v = serde_json::to_value(&w).unwrap();
        assert_eq!(v["w_z"].as_array().unwrap().len(), 3);
        assert_eq!(v["w_z"][0].as_array().unwrap().len(), 2);
        assert_eq!(v["w_z"][1][0].as_f64().unwrap(), w.w_z[(1, 0)]);
        let back: GruWeights = serde_json::from_value(v).unwrap();
        assert_eq!(back, w);
    }
}
