//! Multi-class gradient-boosted decision trees with a softmax objective.
//!
//! Each boosting round fits one regression tree per class to the first and
//! second derivatives of the multi-class log loss at the current margins.
//! Splits are chosen greedily and exactly: every boundary between two
//! consecutive distinct feature values present in a node is a candidate, with
//! the threshold at their midpoint. A sample goes left when
//! `x[feature] < threshold`.

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::features::NUM_FEATURES;

/// Node count of a complete tree of this depth must fit in a signed 16-bit
/// index, which the flat model format uses.
pub const MAX_TREE_DEPTH: usize = 14;

const PROB_CLAMP: f64 = 1e-15;

#[derive(Debug, Error, PartialEq)]
pub enum GbdtError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("expected {expected} features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid training parameter: {0}")]
    InvalidParams(String),
    #[error("sample {index} has label {label} but the model has {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf {
        value: f32,
    },
    Split {
        feature: usize,
        threshold: f32,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn evaluate(&self, x: &[f32]) -> f32 {
        match self {
            TreeNode::Leaf { value } => *value,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] < *threshold {
                    left.evaluate(x)
                } else {
                    right.evaluate(x)
                }
            }
        }
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => 1 + left.num_nodes() + right.num_nodes(),
        }
    }

    /// Number of splits on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f32,
    pub l2_lambda: f64,
    pub min_child_weight: f64,
    pub min_split_gain: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            rounds: 60,
            max_depth: 6,
            learning_rate: 0.3,
            l2_lambda: 1.0,
            min_child_weight: 1.0,
            min_split_gain: 0.0,
            seed: 42,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<(), GbdtError> {
        let bad = |m: String| Err(GbdtError::InvalidParams(m));
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if !(1..=MAX_TREE_DEPTH).contains(&self.max_depth) {
            return bad(format!("max_depth must be in [1, {MAX_TREE_DEPTH}]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]".into());
        }
        if !(self.l2_lambda >= 0.0) || !self.l2_lambda.is_finite() {
            return bad("l2_lambda must be non-negative".into());
        }
        if !(self.min_child_weight >= 0.0) || !(self.min_split_gain >= 0.0) {
            return bad("min_child_weight and min_split_gain must be non-negative".into());
        }
        Ok(())
    }
}

/// Trees indexed `[round][class]`; tree `[r][c]` adds to class `c`'s margin.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub num_classes: usize,
    pub num_features: usize,
    pub learning_rate: f32,
    pub base_score: f32,
    pub trees: Vec<Vec<TreeNode>>,
}

impl Ensemble {
    pub fn rounds(&self) -> usize {
        self.trees.len()
    }

    /// `base_score + sum over rounds of learning_rate * leaf`, accumulated in
    /// round order in `f32`.
    pub fn predict_margins(&self, x: &[f32]) -> Result<Vec<f32>, GbdtError> {
        if x.len() != self.num_features {
            return Err(GbdtError::DimensionMismatch {
                expected: self.num_features,
                found: x.len(),
            });
        }
        let mut m = vec![self.base_score; self.num_classes];
        for round in &self.trees {
            for (c, tree) in round.iter().enumerate() {
                m[c] += self.learning_rate * tree.evaluate(x);
            }
        }
        Ok(m)
    }

    pub fn predict_class(&self, x: &[f32]) -> Result<usize, GbdtError> {
        Ok(argmax(&self.predict_margins(x)?))
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax in `f64`.
pub fn softmax(margins: &[f32]) -> Vec<f64> {
    let max = margins.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = margins.iter().map(|&m| (m as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-class gradient and hessian of `-ln softmax(margins)[true_class]`.
pub fn softmax_grad_hess(margins: &[f64], true_class: usize) -> Vec<(f64, f64)> {
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = margins.iter().map(|&m| (m - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter()
        .enumerate()
        .map(|(c, e)| {
            let q = e / sum;
            let indicator = if c == true_class { 1.0 } else { 0.0 };
            (q - indicator, q * (1.0 - q))
        })
        .collect()
}

/// Log loss of one sample with probabilities clamped away from 0 and 1.
pub fn sample_logloss(margins: &[f32], label: usize) -> f64 {
    let q = softmax(margins)[label].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -q.ln()
}

pub fn eval_logloss(e: &Ensemble, d: &Dataset) -> Result<f64, GbdtError> {
    if d.is_empty() {
        return Err(GbdtError::EmptyDataset);
    }
    let mut total = 0.0;
    for s in &d.samples {
        total += sample_logloss(&e.predict_margins(s.x.as_slice())?, s.y);
    }
    Ok(total / d.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub ensemble: Ensemble,
    /// Mean training log loss after each round.
    pub train_logloss: Vec<f64>,
}

/// Column-major view of the training features, with each value replaced by
/// its rank among the column's distinct values.
struct BinnedMatrix {
    distinct: Vec<Vec<f32>>,
    bins: Vec<Vec<u32>>,
}

impl BinnedMatrix {
    fn new(d: &Dataset, num_features: usize) -> Self {
        let n = d.len();
        let mut distinct = Vec::with_capacity(num_features);
        let mut bins = Vec::with_capacity(num_features);
        for f in 0..num_features {
            let mut vals: Vec<f32> = d.samples.iter().map(|s| s.x.0[f]).collect();
            vals.sort_by(f32::total_cmp);
            vals.dedup_by(|a, b| a == b);
            let col: Vec<u32> = (0..n)
                .map(|i| {
                    let v = d.samples[i].x.0[f];
                    vals.partition_point(|&u| u < v) as u32
                })
                .collect();
            distinct.push(vals);
            bins.push(col);
        }
        BinnedMatrix { distinct, bins }
    }
}

struct SplitChoice {
    feature: usize,
    threshold: f32,
    /// Samples with bin index below this go left.
    right_bin: u32,
    gain: f64,
}

/// Threshold strictly above `lo` and at most `hi`.
fn midpoint(lo: f32, hi: f32) -> f32 {
    let mid = ((lo as f64 + hi as f64) / 2.0) as f32;
    if mid > lo {
        mid
    } else {
        hi
    }
}

struct TreeBuilder<'a> {
    matrix: &'a BinnedMatrix,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a TrainParams,
    /// Leaf value reached by each training sample.
    leaf_of: Vec<f32>,
}

impl TreeBuilder<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.params.l2_lambda;
        if denom > 0.0 {
            g * g / denom
        } else {
            0.0
        }
    }

    fn leaf(&mut self, idx: &[u32], g: f64, h: f64) -> TreeNode {
        let denom = h + self.params.l2_lambda;
        let value = if denom > 0.0 { (-g / denom) as f32 } else { 0.0 };
        for &i in idx {
            self.leaf_of[i as usize] = value;
        }
        TreeNode::Leaf { value }
    }

    fn best_split(&self, idx: &[u32], g: f64, h: f64) -> Option<SplitChoice> {
        let p = self.params;
        let parent = self.score(g, h);
        let mut best: Option<SplitChoice> = None;
        for (f, vals) in self.matrix.distinct.iter().enumerate() {
            if vals.len() < 2 {
                continue;
            }
            let col = &self.matrix.bins[f];
            let mut hist = vec![(0.0f64, 0.0f64, 0u32); vals.len()];
            for &i in idx {
                let slot = &mut hist[col[i as usize] as usize];
                slot.0 += self.grad[i as usize];
                slot.1 += self.hess[i as usize];
                slot.2 += 1;
            }
            let (mut gl, mut hl) = (0.0, 0.0);
            let mut prev: Option<usize> = None;
            for (b, &(bg, bh, count)) in hist.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                if let Some(pb) = prev {
                    let (gr, hr) = (g - gl, h - hl);
                    if hl >= p.min_child_weight && hr >= p.min_child_weight {
                        let gain = 0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent);
                        let better = best.as_ref().map_or(true, |s| gain > s.gain);
                        if gain > 0.0 && gain >= p.min_split_gain && better {
                            best = Some(SplitChoice {
                                feature: f,
                                threshold: midpoint(vals[pb], vals[b]),
                                right_bin: b as u32,
                                gain,
                            });
                        }
                    }
                }
                gl += bg;
                hl += bh;
                prev = Some(b);
            }
        }
        best
    }

    fn build(&mut self, idx: Vec<u32>, depth: usize) -> TreeNode {
        let (mut g, mut h) = (0.0, 0.0);
        for &i in &idx {
            g += self.grad[i as usize];
            h += self.hess[i as usize];
        }
        if depth >= self.params.max_depth || idx.len() < 2 {
            return self.leaf(&idx, g, h);
        }
        let Some(split) = self.best_split(&idx, g, h) else {
            return self.leaf(&idx, g, h);
        };
        let col = &self.matrix.bins[split.feature];
        let (left_idx, right_idx): (Vec<u32>, Vec<u32>) =
            idx.iter().partition(|&&i| col[i as usize] < split.right_bin);
        drop(idx);
        let left = self.build(left_idx, depth + 1);
        let right = self.build(right_idx, depth + 1);
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

fn mean_logloss(margins: &[f32], labels: &[usize], k: usize) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| sample_logloss(&margins[i * k..(i + 1) * k], y))
        .sum();
    total / labels.len() as f64
}

/// Fits an ensemble. The result depends only on the data and `params`;
/// `params.seed` is reserved for sampling options and does not change the
/// exact-greedy fit.
pub fn train(d: &Dataset, params: &TrainParams) -> Result<TrainOutput, GbdtError> {
    params.validate()?;
    if d.is_empty() {
        return Err(GbdtError::EmptyDataset);
    }
    let k = d.num_classes;
    if k < 2 {
        return Err(GbdtError::InvalidParams("need at least 2 classes".into()));
    }
    if let Some((index, s)) = d.samples.iter().enumerate().find(|(_, s)| s.y >= k) {
        return Err(GbdtError::LabelOutOfRange {
            index,
            label: s.y,
            num_classes: k,
        });
    }
    let n = d.len();
    let matrix = BinnedMatrix::new(d, NUM_FEATURES);
    let labels: Vec<usize> = d.samples.iter().map(|s| s.y).collect();

    let base_score = 0.0f32;
    let lr = params.learning_rate;
    let mut margins = vec![base_score; n * k];
    let mut trees = Vec::with_capacity(params.rounds);
    let mut history = Vec::with_capacity(params.rounds);

    let mut grad = vec![vec![0.0f64; n]; k];
    let mut hess = vec![vec![0.0f64; n]; k];
    let mut row = vec![0.0f64; k];
    for _ in 0..params.rounds {
        for i in 0..n {
            for (c, r) in row.iter_mut().enumerate() {
                *r = margins[i * k + c] as f64;
            }
            for (c, (gv, hv)) in softmax_grad_hess(&row, labels[i]).into_iter().enumerate() {
                grad[c][i] = gv;
                hess[c][i] = hv;
            }
        }

        let fitted: Vec<(TreeNode, Vec<f32>)> = (0..k)
            .into_par_iter()
            .map(|c| {
                let mut b = TreeBuilder {
                    matrix: &matrix,
                    grad: &grad[c],
                    hess: &hess[c],
                    params,
                    leaf_of: vec![0.0; n],
                };
                let tree = b.build((0..n as u32).collect(), 0);
                (tree, b.leaf_of)
            })
            .collect();

        let mut round = Vec::with_capacity(k);
        for (c, (tree, leaf_of)) in fitted.into_iter().enumerate() {
            for (i, v) in leaf_of.iter().enumerate() {
                margins[i * k + c] += lr * *v;
            }
            round.push(tree);
        }
        trees.push(round);
        let loss = mean_logloss(&margins, &labels, k);
        log::debug!("round {}: train logloss {loss:.6}", trees.len());
        history.push(loss);
    }

    Ok(TrainOutput {
        ensemble: Ensemble {
            num_classes: k,
            num_features: NUM_FEATURES,
            learning_rate: lr,
            base_score,
            trees,
        },
        train_logloss: history,
    })
}
