use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ReasoningError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(sqrt(d))`.
    pub m_try: Option<usize>,
    /// Off only in tests: every tree then sees the full dataset.
    #[serde(default = "yes")]
    pub bootstrap: bool,
}

fn yes() -> bool {
    true
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            max_depth: None,
            min_leaf: 1,
            m_try: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    /// Training-sample counts per class, indexed like `Forest::classes`.
    Leaf { counts: Vec<u32> },
}

impl TreeNode {
    fn leaf<'a>(&'a self, x: &[f64]) -> &'a [u32] {
        let mut node = self;
        loop {
            match node {
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
                TreeNode::Leaf { counts } => return counts,
            }
        }
    }

    fn check(&self, n_features: usize, n_classes: usize) -> Result<(), String> {
        match self {
            TreeNode::Split { feature, threshold, left, right } => {
                if *feature >= n_features {
                    return Err(format!("feature index {feature} out of range"));
                }
                if !threshold.is_finite() {
                    return Err("non-finite threshold".into());
                }
                left.check(n_features, n_classes)?;
                right.check(n_features, n_classes)
            }
            TreeNode::Leaf { counts } => {
                if counts.len() != n_classes {
                    return Err("leaf count vector has the wrong length".into());
                }
                if counts.iter().all(|&c| c == 0) {
                    return Err("empty leaf".into());
                }
                Ok(())
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
            TreeNode::Leaf { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub params: ForestParams,
    pub seed: u64,
    pub n_features: usize,
    /// Sorted class labels.
    pub classes: Vec<String>,
    pub trees: Vec<TreeNode>,
}

impl Forest {
    pub fn validate(&self) -> Result<(), ReasoningError> {
        let bad = |m: String| Err(ReasoningError::InvalidParams(m));
        if self.trees.len() != self.params.n_trees {
            return bad(format!("{} trees, expected {}", self.trees.len(), self.params.n_trees));
        }
        if self.classes.is_empty() || self.classes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("class labels must be non-empty, sorted and distinct".into());
        }
        for t in &self.trees {
            t.check(self.n_features, self.classes.len()).map_err(ReasoningError::InvalidParams)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("forest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ReasoningError> {
        let f: Forest = serde_json::from_str(text).map_err(|e| ReasoningError::InvalidParams(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfPrediction {
    pub label: String,
    /// `(label, probability)` for every class, in class order.
    pub distribution: Vec<(String, f64)>,
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    m_try: usize,
    params: &'a ForestParams,
}

fn gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

impl Grower<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<u32> {
        let mut c = vec![0u32; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    fn grow(&self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> TreeNode {
        let counts = self.counts(&idx);
        let n = idx.len() as u32;
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = self.params.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || idx.len() < 2 * self.params.min_leaf {
            return TreeNode::Leaf { counts };
        }
        let parent = gini(&counts, n);
        let d = self.x[0].len();
        let mut features = sample(rng, d, self.m_try).into_vec();
        // Candidate order must not influence the chosen split.
        features.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.clone();
        for &f in &features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = vec![0u32; self.n_classes];
            let mut right = counts.clone();
            for k in 0..order.len() - 1 {
                let cls = self.y[order[k]];
                left[cls] += 1;
                right[cls] -= 1;
                let (a, b) = (self.x[order[k]][f], self.x[order[k + 1]][f]);
                if a == b {
                    continue;
                }
                let nl = (k + 1) as u32;
                let nr = n - nl;
                if (nl as usize) < self.params.min_leaf || (nr as usize) < self.params.min_leaf {
                    continue;
                }
                let child = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                let gain = parent - child;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g + 1e-12) {
                    best = Some((gain, f, a + (b - a) / 2.0));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return TreeNode::Leaf { counts };
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| self.x[i][feature] <= threshold);
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(self.grow(l, depth + 1, rng)),
            right: Box::new(self.grow(r, depth + 1, rng)),
        }
    }
}

/// Grows a forest of Gini trees. Tree `i` draws from its own ChaCha stream
/// of `seed`, so the result does not depend on thread scheduling.
pub fn rf_train(dataset: &[(Vec<f64>, String)], params: &ForestParams, seed: u64) -> Result<Forest, ReasoningError> {
    let Some((first, _)) = dataset.first() else {
        return Err(ReasoningError::EmptyDataset);
    };
    let d = first.len();
    if d == 0 {
        return Err(ReasoningError::InvalidParams("feature vectors are empty".into()));
    }
    for (x, _) in dataset {
        if x.len() != d {
            return Err(ReasoningError::DimensionMismatch { expected: d, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ReasoningError::InvalidParams("non-finite feature value".into()));
        }
    }
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(ReasoningError::InvalidParams("n_trees and min_leaf must be positive".into()));
    }
    let m_try = params.m_try.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize);
    if m_try == 0 || m_try > d {
        return Err(ReasoningError::InvalidParams(format!("m_try must be in 1..={d}")));
    }

    let mut classes: Vec<String> = dataset.iter().map(|(_, l)| l.clone()).collect();
    classes.sort();
    classes.dedup();
    let x: Vec<Vec<f64>> = dataset.iter().map(|(v, _)| v.clone()).collect();
    let y: Vec<usize> = dataset
        .iter()
        .map(|(_, l)| classes.binary_search(l).expect("label collected above"))
        .collect();
    let grower = Grower {
        x: &x,
        y: &y,
        n_classes: classes.len(),
        m_try,
        params,
    };
    let n = dataset.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let idx: Vec<usize> = if params.bootstrap {
                use rand::Rng;
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grower.grow(idx, 0, &mut rng)
        })
        .collect();

    Ok(Forest {
        params: ForestParams { m_try: Some(m_try), ..params.clone() },
        seed,
        n_features: d,
        classes,
        trees,
    })
}

/// Averages the trees' normalized leaf distributions.
pub fn rf_predict(forest: &Forest, features: &[f64]) -> Result<RfPrediction, ReasoningError> {
    if features.len() != forest.n_features {
        return Err(ReasoningError::DimensionMismatch {
            expected: forest.n_features,
            got: features.len(),
        });
    }
    if forest.trees.is_empty() {
        return Err(ReasoningError::InvalidParams("forest has no trees".into()));
    }
    let mut probs = vec![0.0; forest.classes.len()];
    for tree in &forest.trees {
        let counts = tree.leaf(features);
        let total: u32 = counts.iter().sum();
        for (p, &c) in probs.iter_mut().zip(counts) {
            *p += c as f64 / total as f64;
        }
    }
    let n = forest.trees.len() as f64;
    probs.iter_mut().for_each(|p| *p /= n);
    // Classes are sorted, so the first maximum is the lexicographically smallest.
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(RfPrediction {
        label: forest.classes[best].clone(),
        distribution: forest.classes.iter().cloned().zip(probs).collect(),
    })
}
