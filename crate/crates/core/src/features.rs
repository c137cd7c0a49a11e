//! Per-branch feature vectors.
//!
//! Each conditional branch is described by 56 numbers: 23 branch-level
//! features followed by 11 basic-block features for the branch's own block,
//! its left (taken) successor and its right successor, in that order.

use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{dominators_of, loops_of, Cfg, DomTree, LoopInfo};
use crate::ir::{Function, Opcode, Predicate, Terminator};

pub const NUM_BRANCH_FEATURES: usize = 23;
pub const NUM_BLOCK_FEATURES: usize = 11;
pub const NUM_FEATURES: usize = NUM_BRANCH_FEATURES + 3 * NUM_BLOCK_FEATURES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// 0.0 or 1.0.
    Flag,
    /// Non-negative integer count.
    Count,
    /// Small non-negative integer code.
    Category { cardinality: u8 },
}

const BRANCH_FEATURES: [(&str, FeatureKind); NUM_BRANCH_FEATURES] = [
    ("is_entry_block", FeatureKind::Flag),
    ("num_blocks_in_fn", FeatureKind::Count),
    ("condition_cmp", FeatureKind::Category { cardinality: 3 }),
    ("condition_predicate", FeatureKind::Category { cardinality: 9 }),
    ("condition_in_block", FeatureKind::Flag),
    ("predicate_is_eq", FeatureKind::Flag),
    ("predicate_is_fp", FeatureKind::Flag),
    ("cmp_to_const", FeatureKind::Flag),
    ("left_self_edge", FeatureKind::Flag),
    ("right_self_edge", FeatureKind::Flag),
    ("left_is_backedge", FeatureKind::Flag),
    ("right_is_backedge", FeatureKind::Flag),
    ("right_points_to_left", FeatureKind::Flag),
    ("left_points_to_right", FeatureKind::Flag),
    ("loop_depth", FeatureKind::Count),
    ("is_loop_header", FeatureKind::Flag),
    ("is_left_exiting", FeatureKind::Flag),
    ("is_right_exiting", FeatureKind::Flag),
    ("dominates_left", FeatureKind::Flag),
    ("dominates_right", FeatureKind::Flag),
    ("dominated_by_left", FeatureKind::Flag),
    ("dominated_by_right", FeatureKind::Flag),
    ("num_blocks_dominated", FeatureKind::Count),
];

const BLOCK_FEATURES: [(&str, FeatureKind); NUM_BLOCK_FEATURES] = [
    ("num_instr", FeatureKind::Count),
    ("num_phis", FeatureKind::Count),
    ("num_calls", FeatureKind::Count),
    ("num_loads", FeatureKind::Count),
    ("num_stores", FeatureKind::Count),
    ("num_preds", FeatureKind::Count),
    ("num_succ", FeatureKind::Count),
    ("ends_with_unreachable", FeatureKind::Flag),
    ("ends_with_return", FeatureKind::Flag),
    ("ends_with_cond_branch", FeatureKind::Flag),
    ("ends_with_branch", FeatureKind::Flag),
];

macro_rules! feature_names {
    ($($prefix:literal: [$($name:literal),*]),*) => {
        [$($(concat!($prefix, ".", $name)),*),*]
    };
}

macro_rules! block_names {
    ($prefix:literal) => {
        feature_names!($prefix: [
            "num_instr", "num_phis", "num_calls", "num_loads", "num_stores", "num_preds",
            "num_succ", "ends_with_unreachable", "ends_with_return", "ends_with_cond_branch",
            "ends_with_branch"
        ])
    };
}

const fn concat_names(
    br: [&'static str; NUM_BRANCH_FEATURES],
    cur: [&'static str; NUM_BLOCK_FEATURES],
    left: [&'static str; NUM_BLOCK_FEATURES],
    right: [&'static str; NUM_BLOCK_FEATURES],
) -> [&'static str; NUM_FEATURES] {
    let mut out = [""; NUM_FEATURES];
    let mut i = 0;
    while i < NUM_BRANCH_FEATURES {
        out[i] = br[i];
        i += 1;
    }
    let mut j = 0;
    while j < NUM_BLOCK_FEATURES {
        out[NUM_BRANCH_FEATURES + j] = cur[j];
        out[NUM_BRANCH_FEATURES + NUM_BLOCK_FEATURES + j] = left[j];
        out[NUM_BRANCH_FEATURES + 2 * NUM_BLOCK_FEATURES + j] = right[j];
        j += 1;
    }
    out
}

/// Column names, in vector order. This is the dataset column contract.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = concat_names(
    feature_names!("br": [
        "is_entry_block", "num_blocks_in_fn", "condition_cmp", "condition_predicate",
        "condition_in_block", "predicate_is_eq", "predicate_is_fp", "cmp_to_const",
        "left_self_edge", "right_self_edge", "left_is_backedge", "right_is_backedge",
        "right_points_to_left", "left_points_to_right", "loop_depth", "is_loop_header",
        "is_left_exiting", "is_right_exiting", "dominates_left", "dominates_right",
        "dominated_by_left", "dominated_by_right", "num_blocks_dominated"
    ]),
    block_names!("cur"),
    block_names!("left"),
    block_names!("right"),
);

/// Offsets of the three block-feature groups.
pub const CUR_OFFSET: usize = NUM_BRANCH_FEATURES;
pub const LEFT_OFFSET: usize = NUM_BRANCH_FEATURES + NUM_BLOCK_FEATURES;
pub const RIGHT_OFFSET: usize = NUM_BRANCH_FEATURES + 2 * NUM_BLOCK_FEATURES;

/// Index of a feature by its schema name.
pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|n| *n == name)
}

pub fn feature_kind(index: usize) -> FeatureKind {
    if index < NUM_BRANCH_FEATURES {
        BRANCH_FEATURES[index].1
    } else {
        BLOCK_FEATURES[(index - NUM_BRANCH_FEATURES) % NUM_BLOCK_FEATURES].1
    }
}

/// First 8 bytes (little-endian) of SHA-256 over the newline-joined names.
pub fn schema_hash() -> u64 {
    let mut h = Sha256::new();
    for name in FEATURE_NAMES {
        h.update(name.as_bytes());
        h.update(b"\n");
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f32; NUM_FEATURES]);

impl FeatureVector {
    pub fn zeros() -> Self {
        FeatureVector([0.0; NUM_FEATURES])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<f32> {
        feature_index(name).map(|i| self.0[i])
    }
}

impl fmt::Debug for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(FEATURE_NAMES.iter().zip(self.0.iter()).filter(|(_, v)| **v != 0.0))
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeatureError {
    #[error("block `{block}` in `{function}` does not end in a conditional branch")]
    NotConditional { function: String, block: String },
}

/// CFG-level facts shared by every branch of one function.
#[derive(Debug, Clone)]
pub struct FunctionAnalysis {
    pub cfg: Cfg,
    pub dom: DomTree,
    pub loops: LoopInfo,
}

impl FunctionAnalysis {
    pub fn new(f: &Function) -> Self {
        let cfg = Cfg::new(f);
        let dom = dominators_of(&cfg);
        let loops = loops_of(&cfg, &dom);
        FunctionAnalysis { cfg, dom, loops }
    }
}

fn flag(b: bool) -> f32 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn extract_block_features(f: &Function, cfg: &Cfg, block: usize) -> [f32; NUM_BLOCK_FEATURES] {
    let b = &f.blocks[block];
    let count = |op: Opcode| b.instrs.iter().filter(|i| i.opcode == op).count() as f32;
    [
        b.instrs.len() as f32,
        count(Opcode::Phi),
        count(Opcode::Call),
        count(Opcode::Load),
        count(Opcode::Store),
        cfg.preds[block].len() as f32,
        cfg.succs[block].len() as f32,
        flag(matches!(b.term, Terminator::Unreachable)),
        flag(matches!(b.term, Terminator::Ret)),
        flag(b.term.is_cond_br()),
        flag(matches!(b.term, Terminator::CondBr { .. } | Terminator::Jmp { .. })),
    ]
}

fn predicate_code(p: Predicate) -> f32 {
    1.0 + Predicate::ALL.iter().position(|q| *q == p).expect("listed") as f32
}

pub fn extract_branch_features(
    f: &Function,
    an: &FunctionAnalysis,
    block: usize,
) -> Result<FeatureVector, FeatureError> {
    let b = &f.blocks[block];
    let Terminator::CondBr { cond, .. } = &b.term else {
        return Err(FeatureError::NotConditional {
            function: f.name.clone(),
            block: b.label.clone(),
        });
    };
    let (left, right) = match an.cfg.succs[block][..] {
        [l, r] => (l, r),
        _ => unreachable!("cond_br has two successor edges"),
    };
    let (cfg, dt, li) = (&an.cfg, &an.dom, &an.loops);

    let mut v = [0.0f32; NUM_FEATURES];
    v[0] = flag(block == 0);
    v[1] = f.blocks.len() as f32;
    if let Some((def_block, instr)) = f.condition_def(cond) {
        let cmp = instr.cmp.as_ref().expect("condition defined by a compare");
        let is_fp = instr.opcode == Opcode::Fcmp;
        v[2] = if is_fp { 2.0 } else { 1.0 };
        v[3] = predicate_code(cmp.predicate);
        v[4] = flag(def_block == block);
        v[5] = flag(cmp.predicate.is_equality());
        v[6] = flag(is_fp);
        v[7] = flag(cmp.lhs.is_constant() || cmp.rhs.is_constant());
    }
    v[8] = flag(left == block);
    v[9] = flag(right == block);
    v[10] = flag(li.is_backedge(block, left));
    v[11] = flag(li.is_backedge(block, right));
    v[12] = flag(cfg.succs[right].contains(&left));
    v[13] = flag(cfg.succs[left].contains(&right));
    v[14] = li.loop_depth[block] as f32;
    v[15] = flag(li.is_header[block]);
    v[16] = flag(li.exiting[left]);
    v[17] = flag(li.exiting[right]);
    v[18] = flag(dt.dominates(block, left));
    v[19] = flag(dt.dominates(block, right));
    v[20] = flag(dt.dominates(left, block));
    v[21] = flag(dt.dominates(right, block));
    v[22] = dt.dom_count[block] as f32;

    for (offset, which) in [(CUR_OFFSET, block), (LEFT_OFFSET, left), (RIGHT_OFFSET, right)] {
        v[offset..offset + NUM_BLOCK_FEATURES].copy_from_slice(&extract_block_features(f, cfg, which));
    }
    Ok(FeatureVector(v))
}

/// Feature vectors of every conditional branch in `f`, keyed by block index.
pub fn extract_function(f: &Function) -> Vec<(usize, FeatureVector)> {
    let an = FunctionAnalysis::new(f);
    f.blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.term.is_cond_br())
        .map(|(i, _)| {
            let v = extract_branch_features(f, &an, i).expect("filtered to cond_br");
            (i, v)
        })
        .collect()
}
