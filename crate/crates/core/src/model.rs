//! Flat-array tree ensembles for in-compiler inference.
//!
//! Every tree is stored as four parallel arrays: the feature index tested at
//! each node (`-1` marks a leaf), the threshold or leaf value, and the left
//! and right child indices. Inference walks each tree with a small loop,
//! adds the leaf into its class bucket and picks the largest bucket.
//!
//! The same tables can be written as a compact binary file (`.bcml`) or as
//! C source to be compiled into a host program.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use thiserror::Error;

use crate::dataset::class_probability;
use crate::features::{extract_function, schema_hash, FeatureVector, NUM_FEATURES};
use crate::gbdt::{argmax, softmax, Ensemble, TreeNode};
use crate::ir::{BranchWeights, CfgModule};

pub const MAGIC: [u8; 4] = *b"BCML";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_TREE_NODES: usize = i16::MAX as usize;
/// Sum of predicted `weights` written back into a CFG.
pub const PREDICTED_WEIGHT_SCALE: u64 = 1000;

const LEAF: i16 = -1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 2 + 4 + 4 + 8;
/// Bytes per node in the binary format: i16 + f32 + i16 + i16.
pub const NODE_RECORD_LEN: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("model was trained for feature schema {found:#018x}, extractor uses {expected:#018x}")]
    SchemaMismatch { expected: u64, found: u64 },
    #[error("expected {expected} features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("tree has {nodes} nodes; at most {MAX_TREE_NODES} fit the table format")]
    TreeTooLarge { nodes: usize },
    #[error("not a model file (bad magic at offset 0)")]
    BadMagic,
    #[error("unsupported model format version {found} at offset 4 (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("model file truncated at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("{trailing} unexpected trailing bytes at offset {offset}")]
    TrailingData { offset: usize, trailing: usize },
    #[error("tree {tree}, node {node}: {message}")]
    Structure {
        tree: usize,
        node: usize,
        message: String,
    },
    #[error("invalid model header: {0}")]
    Header(String),
}

/// One tree as parallel `feature` / `value` / `left` / `right` arrays.
/// Index 0 is the root. At leaves `feature` is -1, `value` is the output and
/// both children are -1.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatTree {
    pub feature: Vec<i16>,
    pub value: Vec<f32>,
    pub left: Vec<i16>,
    pub right: Vec<i16>,
}

impl FlatTree {
    pub fn len(&self) -> usize {
        self.feature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature.is_empty()
    }

    /// Walks from the root: stop at a leaf, go left when
    /// `input[feature] < value`, otherwise right.
    #[inline]
    pub fn interpret(&self, input: &[f32]) -> f32 {
        let mut idx = 0usize;
        loop {
            let f = self.feature[idx];
            if f == LEAF {
                return self.value[idx];
            }
            if input[f as usize] < self.value[idx] {
                idx = self.left[idx] as usize;
            } else {
                idx = self.right[idx] as usize;
            }
        }
    }

    /// Checks that the arrays describe a single tree rooted at 0 whose
    /// feature indices are below `num_features`.
    pub fn validate(&self, tree: usize, num_features: usize) -> Result<(), ModelError> {
        let err = |node: usize, message: String| ModelError::Structure { tree, node, message };
        let n = self.len();
        if n == 0 {
            return Err(err(0, "tree has no nodes".into()));
        }
        if n > MAX_TREE_NODES {
            return Err(err(0, format!("{n} nodes exceed the limit of {MAX_TREE_NODES}")));
        }
        if self.value.len() != n || self.left.len() != n || self.right.len() != n {
            return Err(err(0, "array lengths differ".into()));
        }
        let mut parent = vec![usize::MAX; n];
        for i in 0..n {
            let f = self.feature[i];
            if f == LEAF {
                if self.left[i] != LEAF || self.right[i] != LEAF {
                    return Err(err(i, "leaf has children".into()));
                }
                if !self.value[i].is_finite() {
                    return Err(err(i, "leaf value is not finite".into()));
                }
                continue;
            }
            if f < 0 || f as usize >= num_features {
                return Err(err(i, format!("feature index {f} out of range [0, {num_features})")));
            }
            if self.value[i].is_nan() {
                return Err(err(i, "threshold is NaN".into()));
            }
            for child in [self.left[i], self.right[i]] {
                if child <= 0 || child as usize >= n {
                    return Err(err(i, format!("child index {child} out of range [1, {n})")));
                }
                let c = child as usize;
                if parent[c] != usize::MAX {
                    return Err(err(i, format!("node {c} has more than one parent")));
                }
                parent[c] = i;
            }
        }
        // Every non-root node has exactly one parent; rule out detached cycles.
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        let mut visited = 0;
        while let Some(i) = stack.pop() {
            seen[i] = true;
            visited += 1;
            if self.feature[i] != LEAF {
                stack.push(self.left[i] as usize);
                stack.push(self.right[i] as usize);
            }
        }
        if visited != n {
            let orphan = seen.iter().position(|s| !s).unwrap_or(0);
            return Err(err(orphan, "node is not reachable from the root".into()));
        }
        Ok(())
    }
}

/// Pre-order layout: a node's left subtree immediately follows it.
pub fn flatten(t: &TreeNode) -> Result<FlatTree, ModelError> {
    flatten_scaled(t, None)
}

fn flatten_scaled(t: &TreeNode, scale: Option<f32>) -> Result<FlatTree, ModelError> {
    let nodes = t.num_nodes();
    if nodes > MAX_TREE_NODES {
        return Err(ModelError::TreeTooLarge { nodes });
    }
    let mut ft = FlatTree {
        feature: Vec::with_capacity(nodes),
        value: Vec::with_capacity(nodes),
        left: Vec::with_capacity(nodes),
        right: Vec::with_capacity(nodes),
    };
    fn visit(t: &TreeNode, scale: Option<f32>, ft: &mut FlatTree) -> usize {
        let me = ft.feature.len();
        match t {
            TreeNode::Leaf { value } => {
                ft.feature.push(LEAF);
                ft.value.push(match scale {
                    Some(s) => s * *value,
                    None => *value,
                });
                ft.left.push(LEAF);
                ft.right.push(LEAF);
            }
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                ft.feature.push(*feature as i16);
                ft.value.push(*threshold);
                ft.left.push(0);
                ft.right.push(0);
                let l = visit(left, scale, ft);
                let r = visit(right, scale, ft);
                ft.left[me] = l as i16;
                ft.right[me] = r as i16;
            }
        }
        me
    }
    visit(t, scale, &mut ft);
    Ok(ft)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatModel {
    pub num_classes: usize,
    pub num_rounds: usize,
    pub num_features: usize,
    pub learning_rate: f32,
    pub base_score: f32,
    pub schema_hash: u64,
    /// Round-major: tree `r * num_classes + c` feeds class `c`. Leaf values
    /// are already multiplied by the learning rate.
    pub trees: Vec<FlatTree>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
    /// Bin center of `class`.
    pub p_taken: f64,
}

impl FlatModel {
    pub fn from_ensemble(e: &Ensemble) -> Result<FlatModel, ModelError> {
        let mut trees = Vec::with_capacity(e.rounds() * e.num_classes);
        for round in &e.trees {
            for t in round {
                trees.push(flatten_scaled(t, Some(e.learning_rate))?);
            }
        }
        Ok(FlatModel {
            num_classes: e.num_classes,
            num_rounds: e.rounds(),
            num_features: e.num_features,
            learning_rate: e.learning_rate,
            base_score: e.base_score,
            schema_hash: schema_hash(),
            trees,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return Err(ModelError::Header(format!("class count {}", self.num_classes)));
        }
        if self.num_features == 0 || self.num_features > i16::MAX as usize {
            return Err(ModelError::Header(format!("feature count {}", self.num_features)));
        }
        if self.trees.len() != self.num_rounds * self.num_classes {
            return Err(ModelError::Header(format!(
                "{} trees for {} rounds x {} classes",
                self.trees.len(),
                self.num_rounds,
                self.num_classes
            )));
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.validate(i, self.num_features)?;
        }
        Ok(())
    }

    pub fn check_schema(&self) -> Result<(), ModelError> {
        let expected = schema_hash();
        if self.schema_hash != expected || self.num_features != NUM_FEATURES {
            return Err(ModelError::SchemaMismatch {
                expected,
                found: self.schema_hash,
            });
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.trees.iter().map(FlatTree::len).sum()
    }

    /// Accumulates every tree into its class bucket.
    #[inline]
    pub fn margins_into(&self, input: &[f32], bucket: &mut [f32]) {
        let k = self.num_classes;
        bucket[..k].fill(self.base_score);
        for round in self.trees.chunks_exact(k) {
            for (b, t) in bucket.iter_mut().zip(round) {
                *b += t.interpret(input);
            }
        }
    }

    pub fn margins(&self, input: &[f32]) -> Result<Vec<f32>, ModelError> {
        if input.len() != self.num_features {
            return Err(ModelError::DimensionMismatch {
                expected: self.num_features,
                found: input.len(),
            });
        }
        let mut bucket = vec![0.0; self.num_classes];
        self.margins_into(input, &mut bucket);
        Ok(bucket)
    }

    pub fn infer_class(&self, x: &FeatureVector) -> Result<Prediction, ModelError> {
        self.check_schema()?;
        let margins = self.margins(x.as_slice())?;
        let class = argmax(&margins);
        Ok(Prediction {
            class,
            probabilities: softmax(&margins),
            p_taken: class_probability(class, self.num_classes),
        })
    }

    /// Arg-max class without the softmax, using `bucket` as scratch space.
    #[inline]
    pub fn classify_into(&self, input: &[f32], bucket: &mut [f32]) -> usize {
        self.margins_into(input, bucket);
        argmax(&bucket[..self.num_classes])
    }

    pub fn save(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.trees.len() * 2 + self.num_nodes() * NODE_RECORD_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        out.extend_from_slice(&(self.num_rounds as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_features as u16).to_le_bytes());
        out.extend_from_slice(&self.learning_rate.to_le_bytes());
        out.extend_from_slice(&self.base_score.to_le_bytes());
        out.extend_from_slice(&self.schema_hash.to_le_bytes());
        for t in &self.trees {
            out.extend_from_slice(&(t.len() as u16).to_le_bytes());
            t.feature.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            t.value.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            t.left.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            t.right.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    /// Parses and fully validates a binary model.
    pub fn load(bytes: &[u8]) -> Result<FlatModel, ModelError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion { found: version });
        }
        let num_classes = r.u16()? as usize;
        let num_rounds = r.u32()? as usize;
        let num_features = r.u16()? as usize;
        let learning_rate = r.f32()?;
        let base_score = r.f32()?;
        let schema_hash = r.u64()?;
        if num_classes < 2 {
            return Err(ModelError::Header(format!("class count {num_classes}")));
        }
        let num_trees = num_rounds
            .checked_mul(num_classes)
            .ok_or_else(|| ModelError::Header("tree count overflows".into()))?;
        // Each tree needs at least a length prefix and one node.
        let min_bytes = num_trees.saturating_mul(2 + NODE_RECORD_LEN);
        if min_bytes > r.remaining() {
            return Err(ModelError::Truncated {
                offset: bytes.len(),
                needed: min_bytes - r.remaining(),
            });
        }
        let mut trees = Vec::with_capacity(num_trees);
        for ti in 0..num_trees {
            let at = r.pos;
            let n = r.u16()? as usize;
            if n == 0 || n > MAX_TREE_NODES {
                return Err(ModelError::Structure {
                    tree: ti,
                    node: 0,
                    message: format!("node count {n} at offset {at} out of range [1, {MAX_TREE_NODES}]"),
                });
            }
            let feature = r.i16s(n)?;
            let value = r.f32s(n)?;
            let left = r.i16s(n)?;
            let right = r.i16s(n)?;
            trees.push(FlatTree {
                feature,
                value,
                left,
                right,
            });
        }
        if r.remaining() > 0 {
            return Err(ModelError::TrailingData {
                offset: r.pos,
                trailing: r.remaining(),
            });
        }
        let m = FlatModel {
            num_classes,
            num_rounds,
            num_features,
            learning_rate,
            base_score,
            schema_hash,
            trees,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Trees walked side by side by [`CompiledModel`].
const LANES: usize = 8;

/// Children are adjacent: the left child sits `offset` slots after its
/// parent and the right one directly after that. Trees are capped at
/// [`MAX_TREE_NODES`] nodes, so the offset fits in 16 bits.
#[derive(Debug, Clone, Copy)]
struct PackedNode {
    threshold: f32,
    feature: u16,
    offset: u16,
}

#[derive(Debug, Clone)]
struct Lane {
    roots: [u32; LANES],
    slots: [u32; LANES],
    used: usize,
    depth: usize,
}

/// Evaluation layout of a [`FlatModel`] with identical results.
///
/// Nodes live in one array with siblings stored next to each other. A leaf
/// tests an extra input slot that always holds 0 against `+inf` and points
/// back at itself, so a tree of depth `d` is resolved by exactly `d`
/// branch-free steps. Trees of similar depth are walked [`LANES`] at a
/// time; their outputs are then added into the class buckets in the
/// original tree order.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    num_classes: usize,
    num_features: usize,
    base_score: f32,
    nodes: Vec<PackedNode>,
    leaf_values: Vec<f32>,
    lanes: Vec<Lane>,
    num_trees: usize,
}

/// Per-call buffers for [`CompiledModel`].
#[derive(Debug, Clone)]
pub struct Scratch {
    input: Vec<f32>,
    outputs: Vec<f32>,
}

impl CompiledModel {
    pub fn new(m: &FlatModel) -> CompiledModel {
        let pad_feature = m.num_features as u16;
        let mut nodes: Vec<PackedNode> = Vec::with_capacity(m.num_nodes() + 1);
        let mut leaf_values = Vec::with_capacity(m.num_nodes() + 1);
        let push = |nodes: &mut Vec<PackedNode>, leaf_values: &mut Vec<f32>| {
            nodes.push(PackedNode {
                threshold: f32::INFINITY,
                feature: pad_feature,
                offset: 0,
            });
            leaf_values.push(0.0);
            nodes.len() - 1
        };
        let mut trees = Vec::with_capacity(m.trees.len());
        for t in &m.trees {
            let root = push(&mut nodes, &mut leaf_values);
            // (flat index, packed index)
            let mut stack = vec![(0usize, root)];
            while let Some((i, at)) = stack.pop() {
                if t.feature[i] == LEAF {
                    leaf_values[at] = t.value[i];
                    continue;
                }
                let l = push(&mut nodes, &mut leaf_values);
                let r = push(&mut nodes, &mut leaf_values);
                debug_assert_eq!(l + 1, r);
                nodes[at] = PackedNode {
                    threshold: t.value[i],
                    feature: t.feature[i] as u16,
                    offset: (l - at) as u16,
                };
                stack.push((t.right[i] as usize, r));
                stack.push((t.left[i] as usize, l));
            }
            trees.push((tree_depth(t), root as u32));
        }
        // Padding lanes run on a private leaf.
        let pad = push(&mut nodes, &mut leaf_values) as u32;
        let mut order: Vec<usize> = (0..trees.len()).collect();
        order.sort_by_key(|&i| (trees[i].0, i));
        let lanes = order
            .chunks(LANES)
            .map(|chunk| {
                let mut lane = Lane {
                    roots: [pad; LANES],
                    slots: [0; LANES],
                    used: chunk.len(),
                    depth: 0,
                };
                for (j, &t) in chunk.iter().enumerate() {
                    lane.roots[j] = trees[t].1;
                    lane.slots[j] = t as u32;
                    lane.depth = lane.depth.max(trees[t].0);
                }
                lane
            })
            .collect();
        CompiledModel {
            num_classes: m.num_classes,
            num_features: m.num_features,
            base_score: m.base_score,
            nodes,
            leaf_values,
            lanes,
            num_trees: trees.len(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn scratch(&self) -> Scratch {
        Scratch {
            input: vec![0.0; self.num_features + 1],
            outputs: vec![0.0; self.num_trees],
        }
    }

    /// Same margins as [`FlatModel::margins_into`], bit for bit.
    #[inline]
    pub fn margins_into(&self, input: &[f32], bucket: &mut [f32], scratch: &mut Scratch) {
        let buf = &mut scratch.input;
        buf[..self.num_features].copy_from_slice(&input[..self.num_features]);
        buf[self.num_features] = 0.0;
        let buf = &buf[..];
        let nodes = &self.nodes[..];
        for lane in &self.lanes {
            let mut idx = lane.roots;
            for _ in 0..lane.depth {
                for slot in idx.iter_mut() {
                    // SAFETY: `new` only stores offsets that land on a child
                    // inside `nodes` and feature indices up to
                    // `num_features`; `buf` has `num_features + 1` entries.
                    let n = unsafe { *nodes.get_unchecked(*slot as usize) };
                    let v = unsafe { *buf.get_unchecked(n.feature as usize) };
                    *slot += n.offset as u32 + !(v < n.threshold) as u32;
                }
            }
            let outputs = &mut scratch.outputs[..self.num_trees];
            for j in 0..lane.used {
                // SAFETY: slots are tree numbers below `num_trees` and the
                // final indices are nodes, as above.
                unsafe {
                    *outputs.get_unchecked_mut(lane.slots[j] as usize) =
                        *self.leaf_values.get_unchecked(idx[j] as usize);
                }
            }
        }
        let k = self.num_classes;
        bucket[..k].fill(self.base_score);
        for round in scratch.outputs[..self.num_trees].chunks_exact(k) {
            for (b, v) in bucket.iter_mut().zip(round) {
                *b += *v;
            }
        }
    }

    #[inline]
    pub fn classify_into(&self, input: &[f32], bucket: &mut [f32], scratch: &mut Scratch) -> usize {
        self.margins_into(input, bucket, scratch);
        argmax(&bucket[..self.num_classes])
    }
}

fn tree_depth(t: &FlatTree) -> usize {
    let mut max = 0;
    let mut stack = vec![(0usize, 0usize)];
    while let Some((i, d)) = stack.pop() {
        max = max.max(d);
        if t.feature[i] != LEAF {
            stack.push((t.left[i] as usize, d + 1));
            stack.push((t.right[i] as usize, d + 1));
        }
    }
    max
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.remaining() < n {
            return Err(ModelError::Truncated {
                offset: self.bytes.len(),
                needed: n - self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, ModelError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn i16s(&mut self, n: usize) -> Result<Vec<i16>, ModelError> {
        Ok(self
            .take(n * 2)?
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ModelError> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Shortest decimal that reads back as the same `f32`; always a valid C
/// floating literal.
fn c_float(v: f32) -> String {
    format!("{v:?}")
}

fn c_array<T>(out: &mut String, ty: &str, name: &str, items: &[T], fmt: impl Fn(&T) -> String) {
    let _ = write!(out, "static const {ty} {name}[] = {{");
    for (i, v) in items.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&fmt(v));
    }
    out.push_str("};\n");
}

/// C source with one table set per tree (`F<r>_<c>`, `C<r>_<c>`,
/// `L<r>_<c>`, `R<r>_<c>`), the shared `intrp` walker and a `predict`
/// entry point that returns the arg-max class.
pub fn emit_c(m: &FlatModel) -> String {
    let k = m.num_classes;
    let mut out = String::new();
    let _ = writeln!(out, "/* Branch probability model: {k} classes, {} rounds, {} features.", m.num_rounds, m.num_features);
    let _ = writeln!(out, " * Feature schema {:#018x}. Class c means taken probability c/{}. */", m.schema_hash, k - 1);
    out.push_str("\n#include <stddef.h>\n\n");
    let _ = writeln!(out, "#define BCML_NUM_CLASSES {k}");
    let _ = writeln!(out, "#define BCML_NUM_FEATURES {}", m.num_features);
    let _ = writeln!(out, "#define BCML_NUM_ROUNDS {}", m.num_rounds);
    out.push_str(
        "
float intrp(const float *input,
            const short *F, const float *C,
            const short *L, const short *R) {
    int idx = 0;
    while (1) {
      if (F[idx] == -1) return C[idx];
      if (input[F[idx]] < C[idx])
        idx = L[idx];
      else
        idx = R[idx];
    }
}

",
    );
    for (i, t) in m.trees.iter().enumerate() {
        let tag = format!("{}_{}", i / k, i % k);
        c_array(&mut out, "short", &format!("F{tag}"), &t.feature, |v| v.to_string());
        c_array(&mut out, "float", &format!("C{tag}"), &t.value, |v| c_float(*v));
        c_array(&mut out, "short", &format!("L{tag}"), &t.left, |v| v.to_string());
        c_array(&mut out, "short", &format!("R{tag}"), &t.right, |v| v.to_string());
    }
    out.push_str("\n/* Writes the class margins to `margins` when it is not NULL. */\n");
    out.push_str("int predict(const float *input, float *margins) {\n");
    out.push_str("    float bucket[BCML_NUM_CLASSES];\n");
    let _ = writeln!(out, "    for (int c = 0; c < BCML_NUM_CLASSES; ++c) bucket[c] = {};", c_float(m.base_score));
    for i in 0..m.trees.len() {
        let tag = format!("{}_{}", i / k, i % k);
        let _ = writeln!(
            out,
            "    bucket[{}] += intrp(input, F{tag}, C{tag}, L{tag}, R{tag});",
            i % k
        );
    }
    out.push_str(
        "    int best = 0;
    for (int c = 1; c < BCML_NUM_CLASSES; ++c)
        if (bucket[c] > bucket[best]) best = c;
    if (margins != NULL)
        for (int c = 0; c < BCML_NUM_CLASSES; ++c) margins[c] = bucket[c];
    return best;
}
",
    );
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub inferences_per_rep: usize,
    /// Inferences per second of each repetition.
    pub per_rep: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
}

/// Single-threaded throughput of arg-max classification over `pool`,
/// cycling through it for `n` inferences per repetition. Runs the
/// [`CompiledModel`] layout.
pub fn bench_inference(m: &FlatModel, pool: &[FeatureVector], n: usize, reps: usize) -> BenchReport {
    assert!(!pool.is_empty(), "benchmark needs at least one input");
    let reps = reps.max(1);
    let cm = CompiledModel::new(m);
    let mut bucket = vec![0.0f32; m.num_classes];
    let mut scratch = cm.scratch();
    // Warm-up pass over the pool.
    for x in pool {
        black_box(cm.classify_into(black_box(x.as_slice()), &mut bucket, &mut scratch));
    }
    let mut per_rep = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let mut acc = 0usize;
        for x in pool.iter().cycle().take(n) {
            acc = acc.wrapping_add(cm.classify_into(black_box(x.as_slice()), &mut bucket, &mut scratch));
        }
        black_box(acc);
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        per_rep.push(n as f64 / secs);
    }
    let mean = per_rep.iter().sum::<f64>() / reps as f64;
    let var = per_rep.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / reps as f64;
    BenchReport {
        inferences_per_rep: n,
        per_rep,
        mean,
        stddev: var.sqrt(),
    }
}

/// Attaches predicted `weights` to every conditional branch. Existing
/// weights are kept unless `overwrite` is set.
pub fn annotate_module(m: &FlatModel, module: &CfgModule, overwrite: bool) -> Result<CfgModule, ModelError> {
    m.check_schema()?;
    let mut out = module.clone();
    for f in &mut out.functions {
        for (bi, x) in extract_function(f) {
            let block = &mut f.blocks[bi];
            if block.weights.is_some() && !overwrite {
                continue;
            }
            let p = m.infer_class(&x)?.p_taken;
            let taken = (PREDICTED_WEIGHT_SCALE as f64 * p).round() as u64;
            block.weights = Some(BranchWeights::new(taken, PREDICTED_WEIGHT_SCALE - taken));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_bcfg;
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_split() -> TreeNode {
        TreeNode::Split {
            feature: 0,
            threshold: 1.0,
            left: Box::new(TreeNode::Leaf { value: 2.0 }),
            right: Box::new(TreeNode::Leaf { value: 3.0 }),
        }
    }

    fn model_of(trees: Vec<FlatTree>, k: usize, rounds: usize) -> FlatModel {
        FlatModel {
            num_classes: k,
            num_rounds: rounds,
            num_features: NUM_FEATURES,
            learning_rate: 0.3,
            base_score: 0.0,
            schema_hash: schema_hash(),
            trees,
        }
    }

    fn leaf(v: f32) -> FlatTree {
        flatten(&TreeNode::Leaf { value: v }).unwrap()
    }

    #[test]
    fn single_leaf_layout() {
        let ft = leaf(0.5);
        assert_eq!(ft.feature, vec![-1]);
        assert_eq!(ft.value, vec![0.5]);
    }

    #[test]
    fn one_split_layout_and_strict_compare() {
        let ft = flatten(&one_split()).unwrap();
        assert_eq!(ft.feature, vec![0, -1, -1]);
        assert_eq!(ft.value, vec![1.0, 2.0, 3.0]);
        assert_eq!((ft.left[0], ft.right[0]), (1, 2));
        let mut x = [0.0f32; NUM_FEATURES];
        x[0] = 0.5;
        assert_eq!(ft.interpret(&x), 2.0);
        x[0] = 1.0;
        assert_eq!(ft.interpret(&x), 3.0);
        ft.validate(0, NUM_FEATURES).unwrap();
    }

    #[test]
    fn flat_equals_recursive_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let t = synth::random_tree(&mut rng, 7, NUM_FEATURES);
            let ft = flatten(&t).unwrap();
            ft.validate(0, NUM_FEATURES).unwrap();
            for _ in 0..30 {
                let x = synth::random_input(&mut rng, NUM_FEATURES);
                assert_eq!(ft.interpret(&x).to_bits(), t.evaluate(&x).to_bits());
            }
        }
    }

    #[test]
    fn compiled_matches_flat_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let k = rng.gen_range(2..12);
            let rounds = rng.gen_range(0..6);
            let trees = (0..k * rounds)
                .map(|_| flatten(&synth::random_tree(&mut rng, 7, NUM_FEATURES)).unwrap())
                .collect();
            let mut m = model_of(trees, k, rounds);
            m.base_score = rng.gen_range(-1.0..1.0);
            let cm = CompiledModel::new(&m);
            let (mut b1, mut b2, mut scratch) = (vec![0.0; k], vec![0.0; k], cm.scratch());
            for _ in 0..40 {
                let x = synth::random_input(&mut rng, NUM_FEATURES);
                m.margins_into(&x, &mut b1);
                cm.margins_into(&x, &mut b2, &mut scratch);
                assert_eq!(
                    b1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    b2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn zero_round_model_picks_class_zero() {
        let m = model_of(Vec::new(), 11, 0);
        let p = m.infer_class(&FeatureVector::zeros()).unwrap();
        assert_eq!(p.class, 0);
        assert!(p.probabilities.iter().all(|q| (q - 1.0 / 11.0).abs() < 1e-12));
    }

    #[test]
    fn dominant_class() {
        let trees = (0..2 * 11).map(|i| leaf(if i % 11 == 9 { 10.0 } else { 0.0 })).collect();
        let m = model_of(trees, 11, 2);
        let p = m.infer_class(&FeatureVector::zeros()).unwrap();
        assert_eq!(p.class, 9);
        assert_eq!(p.p_taken, 0.9);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let mut m = model_of(Vec::new(), 3, 0);
        m.schema_hash ^= 1;
        assert!(matches!(m.infer_class(&FeatureVector::zeros()), Err(ModelError::SchemaMismatch { .. })));
    }

    #[test]
    fn emitted_tables() {
        let m = model_of(vec![leaf(0.5), leaf(-1.25)], 2, 1);
        let src = emit_c(&m);
        assert!(src.contains("F0_0[] = {-1}"), "{src}");
        assert!(src.contains("C0_0[] = {0.5}"), "{src}");
        assert!(src.contains("C0_1[] = {-1.25}"), "{src}");
        assert!(src.contains("if (input[F[idx]] < C[idx])"));
        assert_eq!(src, emit_c(&m));
    }

    #[test]
    fn binary_round_trip_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let trees: Vec<_> = (0..12)
            .map(|_| flatten(&synth::random_tree(&mut rng, 5, NUM_FEATURES)).unwrap())
            .collect();
        let m = model_of(trees, 3, 4);
        let bytes = m.save();
        assert_eq!(FlatModel::load(&bytes).unwrap(), m);
        assert!(bytes.len() <= 2 * m.num_nodes() * NODE_RECORD_LEN);
    }

    #[test]
    fn load_rejects_damage() {
        let m = model_of(vec![flatten(&one_split()).unwrap(), leaf(1.0)], 2, 1);
        let bytes = m.save();

        assert_eq!(FlatModel::load(b"NOPE"), Err(ModelError::BadMagic));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert_eq!(FlatModel::load(&v2), Err(ModelError::UnsupportedVersion { found: 2 }));
        for cut in [3, HEADER_LEN - 1, HEADER_LEN + 5, bytes.len() - 1] {
            assert!(
                matches!(FlatModel::load(&bytes[..cut]), Err(ModelError::Truncated { .. }) | Err(ModelError::BadMagic)),
                "cut {cut}"
            );
        }
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(FlatModel::load(&trailing), Err(ModelError::TrailingData { .. })));

        // First tree: [len][F x3][C x3][L x3][R x3]; corrupt L[0].
        let l0 = HEADER_LEN + 2 + 3 * 2 + 3 * 4;
        let mut bad = bytes.clone();
        bad[l0..l0 + 2].copy_from_slice(&7i16.to_le_bytes());
        assert_eq!(
            FlatModel::load(&bad),
            Err(ModelError::Structure {
                tree: 0,
                node: 0,
                message: "child index 7 out of range [1, 3)".into()
            })
        );
        // Both children pointing at the same node.
        let mut shared = bytes.clone();
        let r0 = l0 + 3 * 2;
        shared[r0..r0 + 2].copy_from_slice(&1i16.to_le_bytes());
        assert!(matches!(FlatModel::load(&shared), Err(ModelError::Structure { tree: 0, .. })));
        // Feature index beyond the schema.
        let mut feat = bytes;
        feat[HEADER_LEN + 2..HEADER_LEN + 4].copy_from_slice(&56i16.to_le_bytes());
        assert!(matches!(FlatModel::load(&feat), Err(ModelError::Structure { tree: 0, node: 0, .. })));
    }

    #[test]
    fn detached_cycle_is_rejected() {
        let ft = FlatTree {
            feature: vec![-1, 0, 0],
            value: vec![1.0, 0.0, 0.0],
            left: vec![-1, 2, 1],
            right: vec![-1, 2, 1],
        };
        assert!(ft.validate(0, NUM_FEATURES).is_err());
    }

    #[test]
    fn annotate_predicts_and_preserves() {
        let src = "func f\nblock e\n term cond_br c a b\n weights 3 4\nblock a\n term cond_br d b a\nblock b\n term ret\n";
        let module = parse_bcfg(src).unwrap();
        let trees = (0..11).map(|c| leaf(if c == 9 { 5.0 } else { 0.0 })).collect();
        let m = model_of(trees, 11, 1);
        let out = annotate_module(&m, &module, false).unwrap();
        let f = &out.functions[0];
        assert_eq!(f.blocks[0].weights, Some(BranchWeights::new(3, 4)));
        assert_eq!(f.blocks[1].weights, Some(BranchWeights::new(900, 100)));
        let over = annotate_module(&m, &module, true).unwrap();
        assert_eq!(over.functions[0].blocks[0].weights, Some(BranchWeights::new(900, 100)));

        let mid = (0..11).map(|c| leaf(if c == 5 { 5.0 } else { 0.0 })).collect();
        let out = annotate_module(&model_of(mid, 11, 1), &module, true).unwrap();
        assert_eq!(out.functions[0].blocks[1].weights, Some(BranchWeights::new(500, 500)));
    }

    #[test]
    fn bench_reports_every_rep() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool: Vec<_> = (0..64).map(|_| FeatureVector(synth::random_input(&mut rng, NUM_FEATURES).try_into().unwrap())).collect();
        let m = model_of(vec![leaf(1.0), leaf(2.0), leaf(0.0)], 3, 1);
        let r = bench_inference(&m, &pool, 10_000, 5);
        assert_eq!(r.per_rep.len(), 5);
        assert!(r.mean > 0.0 && r.stddev >= 0.0);
        let _ = rng.gen::<u8>();
    }
}
