//! Second-order gradient-boosted decision trees for binary classification.
//!
//! Each round computes logistic gradients `g = p - y` and hessians
//! `h = p(1 - p)`, draws a row and a column subsample from the seeded
//! generator, and grows one tree level by level with exact greedy split
//! search. Candidate thresholds are midpoints between consecutive distinct
//! feature values within a node; a row goes left when `x[f] < threshold`.
//!
//! Split gain:
//!
//! ```text
//! gain = 1/2 [ GL^2/(HL+lambda) + GR^2/(HR+lambda) - (GL+GR)^2/(HL+HR+lambda) ] - gamma
//! ```
//!
//! Leaf weight is `-G/(H+lambda)`. Gradient and hessian totals of a node
//! are accumulated over its rows in ascending row order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Xoshiro256;
use crate::scalar::{logit, sigmoid};
use crate::Scalar;

/// Relative tolerance under which two candidate split scores count as tied,
/// and below which a gain counts as zero.
const TIE_RTOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub reg_lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    pub base_score: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            max_depth: 6,
            learning_rate: 0.1,
            subsample: 0.8,
            colsample_bytree: 0.8,
            reg_lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            base_score: 0.5,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_depth == 0 {
            return fail("max_depth must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return fail("subsample must lie in (0, 1]");
        }
        if !(self.colsample_bytree > 0.0 && self.colsample_bytree <= 1.0) {
            return fail("colsample_bytree must lie in (0, 1]");
        }
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return fail("reg_lambda must be non-negative");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail("gamma must be non-negative");
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return fail("min_child_weight must be non-negative");
        }
        if !(self.base_score > 0.0 && self.base_score < 1.0) {
            return fail("base_score must lie in (0, 1)");
        }
        Ok(())
    }

    /// Number of items kept when subsampling `n` by `fraction`: half-up rounding, at least one.
    pub fn subsample_count(n: usize, fraction: f64) -> usize {
        ((n as f64 * fraction + 0.5).floor() as usize).clamp(1, n.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode<T> {
    Split {
        feature: usize,
        threshold: T,
        left: Box<TreeNode<T>>,
        right: Box<TreeNode<T>>,
    },
    Leaf {
        weight: T,
    },
}

impl<T: Scalar> TreeNode<T> {
    #[inline]
    pub fn predict(&self, x: &[T]) -> T {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { weight } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] < *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    /// Depth of the deepest leaf (a lone leaf has depth 0).
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel<T> {
    pub config: GbdtConfig,
    pub n_features: usize,
    pub trees: Vec<TreeNode<T>>,
}

impl<T: Scalar> GbdtModel<T> {
    fn check_dim(&self, features: &Matrix<T>) -> Result<()> {
        if features.cols() != self.n_features {
            return Err(Error::Validation(format!(
                "model expects {} features, got {}",
                self.n_features,
                features.cols()
            )));
        }
        Ok(())
    }

    /// Sum of tree outputs for one row, trees visited in order.
    fn raw_sum(&self, x: &[T]) -> T {
        let mut s = T::zero();
        for t in &self.trees {
            s += t.predict(x);
        }
        s
    }

    pub fn predict_margin(&self, features: &Matrix<T>) -> Result<Vec<T>> {
        self.check_dim(features)?;
        let origin = logit(T::of(self.config.base_score));
        let lr = T::of(self.config.learning_rate);
        Ok(features
            .row_iter()
            .map(|x| origin + lr * self.raw_sum(x))
            .collect())
    }

    pub fn predict_proba(&self, features: &Matrix<T>) -> Result<Vec<T>> {
        Ok(self
            .predict_margin(features)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }
}

impl<T: Scalar + Serialize + for<'de> Deserialize<'de>> GbdtModel<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.config.validate()?;
        Ok(model)
    }
}

pub fn predict_margin<T: Scalar>(model: &GbdtModel<T>, features: &Matrix<T>) -> Result<Vec<T>> {
    model.predict_margin(features)
}

pub fn predict_proba<T: Scalar>(model: &GbdtModel<T>, features: &Matrix<T>) -> Result<Vec<T>> {
    model.predict_proba(features)
}

/// Mean logistic loss of margins against labels.
pub fn log_loss<T: Scalar>(margins: &[T], labels: &[u8]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| {
            let m = m.to_f64_lossy();
            // log(1 + e^m) - y*m, stable for large |m|
            let softplus = if m > 0.0 {
                m + (-m).exp().ln_1p()
            } else {
                m.exp().ln_1p()
            };
            softplus - y as f64 * m
        })
        .sum();
    total / margins.len() as f64
}

struct Candidate<T> {
    score: T,
    feature: usize,
    threshold: T,
}

enum Slot<T> {
    Pending,
    Leaf(T),
    Split {
        feature: usize,
        threshold: T,
        left: usize,
        right: usize,
    },
}

const NO_NODE: u32 = u32::MAX;

struct Grower<'a, T> {
    x: &'a Matrix<T>,
    order: &'a [Vec<u32>],
    grad: &'a [T],
    hess: &'a [T],
    lambda: T,
    gamma: T,
    min_child_weight: T,
    max_depth: usize,
}

impl<T: Scalar> Grower<'_, T> {
    fn leaf_weight(&self, g: T, h: T) -> T {
        let den = h + self.lambda;
        if den > T::zero() {
            -g / den
        } else {
            T::zero()
        }
    }

    #[inline]
    fn midpoint(lo: T, hi: T) -> T {
        let m = (lo + hi) / T::of(2.0);
        if m > lo {
            m
        } else {
            hi
        }
    }

    /// Best split of every frontier node along one feature.
    fn scan_feature(
        &self,
        f: usize,
        positions: &[u32],
        totals: &[(T, T)],
    ) -> Vec<Option<Candidate<T>>> {
        let k = totals.len();
        let mut gl = vec![T::zero(); k];
        let mut hl = vec![T::zero(); k];
        let mut last: Vec<Option<T>> = vec![None; k];
        let mut best: Vec<Option<Candidate<T>>> = (0..k).map(|_| None).collect();
        for &r in &self.order[f] {
            let r = r as usize;
            let node = positions[r];
            if node == NO_NODE {
                continue;
            }
            let node = node as usize;
            let v = self.x.get(r, f);
            if let Some(prev) = last[node] {
                if v > prev {
                    let (g, h) = totals[node];
                    let (gleft, hleft) = (gl[node], hl[node]);
                    let (gright, hright) = (g - gleft, h - hleft);
                    // Right sums come from a subtraction, so allow rounding at the bound.
                    let mcw = self.min_child_weight - T::of(TIE_RTOL) * h;
                    if hleft >= mcw && hright >= mcw {
                        let score = gleft * gleft / (hleft + self.lambda)
                            + gright * gright / (hright + self.lambda);
                        let parent = g * g / (h + self.lambda);
                        let gain = T::of(0.5) * (score - parent) - self.gamma;
                        if positive_gain(gain, score, parent) && beats(score, best[node].as_ref()) {
                            best[node] = Some(Candidate {
                                score,
                                feature: f,
                                threshold: Self::midpoint(prev, v),
                            });
                        }
                    }
                }
            }
            gl[node] += self.grad[r];
            hl[node] += self.hess[r];
            last[node] = Some(v);
        }
        best
    }

    fn grow(&self, sampled_rows: &[usize], features: &[usize]) -> TreeNode<T> {
        let n = self.x.rows();
        let mut positions = vec![NO_NODE; n];
        for &r in sampled_rows {
            positions[r] = 0;
        }
        let mut slots = vec![Slot::Pending];
        let mut frontier: Vec<usize> = vec![0];
        let mut totals = node_totals(&positions, 1, self.grad, self.hess);

        for depth in 0..=self.max_depth {
            if frontier.is_empty() {
                break;
            }
            let best: Vec<Option<Candidate<T>>> = if depth == self.max_depth {
                (0..frontier.len()).map(|_| None).collect()
            } else {
                let per_feature: Vec<Vec<Option<Candidate<T>>>> = features
                    .par_iter()
                    .map(|&f| self.scan_feature(f, &positions, &totals))
                    .collect();
                // Features are reduced in ascending index order, so ties resolve
                // to the lowest feature whatever the thread schedule.
                let mut best: Vec<Option<Candidate<T>>> =
                    (0..frontier.len()).map(|_| None).collect();
                for per_node in per_feature {
                    for (b, c) in best.iter_mut().zip(per_node) {
                        if let Some(c) = c {
                            if beats(c.score, b.as_ref()) {
                                *b = Some(c);
                            }
                        }
                    }
                }
                best
            };

            // child slot for (frontier index, side)
            let mut remap = vec![(NO_NODE, NO_NODE); frontier.len()];
            let mut next_frontier = Vec::new();
            for (k, (&slot, cand)) in frontier.iter().zip(&best).enumerate() {
                match cand {
                    Some(c) => {
                        let left = slots.len();
                        slots.push(Slot::Pending);
                        slots.push(Slot::Pending);
                        slots[slot] = Slot::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            left,
                            right: left + 1,
                        };
                        remap[k] = (next_frontier.len() as u32, next_frontier.len() as u32 + 1);
                        next_frontier.push(left);
                        next_frontier.push(left + 1);
                    }
                    None => {
                        let (g, h) = totals[k];
                        slots[slot] = Slot::Leaf(self.leaf_weight(g, h));
                    }
                }
            }
            for (r, pos) in positions.iter_mut().enumerate() {
                if *pos == NO_NODE {
                    continue;
                }
                let k = *pos as usize;
                *pos = match &best[k] {
                    Some(c) if self.x.get(r, c.feature) < c.threshold => remap[k].0,
                    Some(_) => remap[k].1,
                    None => NO_NODE,
                };
            }
            totals = node_totals(&positions, next_frontier.len(), self.grad, self.hess);
            frontier = next_frontier;
        }
        build_tree(&slots, 0)
    }
}

/// Gain counts as positive only above the rounding noise of its terms.
#[inline]
fn positive_gain<T: Scalar>(gain: T, score: T, parent: T) -> bool {
    gain > T::of(TIE_RTOL) * score.abs().max(parent.abs())
}

/// True when `score` should replace the incumbent. Near-equal scores keep
/// the incumbent, which was found earlier in (feature, threshold) order.
#[inline]
fn beats<T: Scalar>(score: T, incumbent: Option<&Candidate<T>>) -> bool {
    match incumbent {
        None => true,
        Some(b) => score - b.score > T::of(TIE_RTOL) * b.score.abs().max(score.abs()),
    }
}

fn node_totals<T: Scalar>(positions: &[u32], k: usize, grad: &[T], hess: &[T]) -> Vec<(T, T)> {
    let mut totals = vec![(T::zero(), T::zero()); k];
    for (r, &p) in positions.iter().enumerate() {
        if p != NO_NODE {
            let t = &mut totals[p as usize];
            t.0 += grad[r];
            t.1 += hess[r];
        }
    }
    totals
}

fn build_tree<T: Scalar>(slots: &[Slot<T>], at: usize) -> TreeNode<T> {
    match &slots[at] {
        Slot::Leaf(w) => TreeNode::Leaf { weight: *w },
        Slot::Split {
            feature,
            threshold,
            left,
            right,
        } => TreeNode::Split {
            feature: *feature,
            threshold: *threshold,
            left: Box::new(build_tree(slots, *left)),
            right: Box::new(build_tree(slots, *right)),
        },
        Slot::Pending => unreachable!("every slot is resolved before the tree is built"),
    }
}

fn validate_inputs<T: Scalar>(features: &Matrix<T>, labels: &[u8]) -> Result<()> {
    if features.rows() == 0 || features.cols() == 0 {
        return Err(Error::Validation("training matrix is empty".into()));
    }
    if features.rows() < 2 {
        return Err(Error::Validation("training needs at least two rows".into()));
    }
    if features.rows() >= NO_NODE as usize {
        return Err(Error::Validation("too many rows".into()));
    }
    if labels.len() != features.rows() {
        return Err(Error::Validation(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::Validation(format!(
            "label {} at row {i} is not 0 or 1",
            labels[i]
        )));
    }
    if let Some(k) = features.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite feature at row {}, column {}",
            k / features.cols(),
            k % features.cols()
        )));
    }
    Ok(())
}

/// Trains a boosted ensemble. Output is a pure function of the arguments.
pub fn train<T: Scalar>(
    features: &Matrix<T>,
    labels: &[u8],
    config: &GbdtConfig,
) -> Result<GbdtModel<T>> {
    config.validate()?;
    validate_inputs(features, labels)?;
    let (n, d) = (features.rows(), features.cols());

    let order: Vec<Vec<u32>> = (0..d)
        .into_par_iter()
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                features
                    .get(a as usize, f)
                    .partial_cmp(&features.get(b as usize, f))
                    .expect("finite")
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let origin = logit(T::of(config.base_score));
    let lr = T::of(config.learning_rate);
    let y: Vec<T> = labels.iter().map(|&l| T::of(l as f64)).collect();
    let mut raw = vec![T::zero(); n];
    let mut rng = Xoshiro256::seed_from_u64(config.seed);
    let k_rows = GbdtConfig::subsample_count(n, config.subsample);
    let k_cols = GbdtConfig::subsample_count(d, config.colsample_bytree);
    let mut trees = Vec::with_capacity(config.n_rounds);

    for _ in 0..config.n_rounds {
        let mut grad = Vec::with_capacity(n);
        let mut hess = Vec::with_capacity(n);
        for i in 0..n {
            let p = sigmoid(origin + lr * raw[i]);
            grad.push(p - y[i]);
            hess.push(p * (T::one() - p));
        }
        let rows = rng.sample_indices(n, k_rows);
        let cols = rng.sample_indices(d, k_cols);
        let grower = Grower {
            x: features,
            order: &order,
            grad: &grad,
            hess: &hess,
            lambda: T::of(config.reg_lambda),
            gamma: T::of(config.gamma),
            min_child_weight: T::of(config.min_child_weight),
            max_depth: config.max_depth,
        };
        let tree = grower.grow(&rows, &cols);
        for (i, x) in features.row_iter().enumerate() {
            raw[i] += tree.predict(x);
        }
        trees.push(tree);
    }
    Ok(GbdtModel {
        config: config.clone(),
        n_features: d,
        trees,
    })
}
