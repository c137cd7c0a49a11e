//! Random and synthetic inputs: arbitrary CFGs, trees and feature vectors
//! for property tests, and a labeled corpus whose branch probabilities
//! follow a handful of fixed structural rules.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::features::{extract_function, feature_index, FeatureVector};
use crate::gbdt::TreeNode;
use crate::ir::{Block, BranchWeights, CfgModule, Function, Instr, Opcode, OperandKind, Predicate, Terminator};

const BODY_OPCODES: [Opcode; 5] = [Opcode::Load, Opcode::Store, Opcode::Call, Opcode::Other, Opcode::Other];

fn random_body<R: Rng>(rng: &mut R, max: usize) -> Vec<Instr> {
    let mut instrs: Vec<Instr> = (0..rng.gen_range(0..=2)).map(|_| Instr::simple(Opcode::Phi)).collect();
    if rng.gen_bool(0.6) {
        instrs.clear();
    }
    for _ in 0..rng.gen_range(0..=max) {
        instrs.push(Instr::simple(*BODY_OPCODES.choose(rng).expect("non-empty")));
    }
    instrs
}

fn random_compare<R: Rng>(rng: &mut R, defines: Option<&str>) -> Instr {
    let opcode = if rng.gen_bool(0.8) { Opcode::Icmp } else { Opcode::Fcmp };
    let predicate = *Predicate::ALL.choose(rng).expect("non-empty");
    let lhs = *OperandKind::ALL.choose(rng).expect("non-empty");
    let rhs = *OperandKind::ALL.choose(rng).expect("non-empty");
    Instr::compare(opcode, predicate, lhs, rhs, defines)
}

/// An arbitrary function of 1..=`max_blocks` blocks. Edges are random, so
/// the result may contain unreachable blocks, irreducible regions, self
/// loops and parallel edges. Conditions may be defined in the branching
/// block, in another block, or nowhere.
pub fn random_function<R: Rng>(rng: &mut R, name: &str, max_blocks: usize) -> Function {
    let n = rng.gen_range(1..=max_blocks.max(1));
    let label = |i: usize| format!("b{i}");
    let mut blocks: Vec<Block> = (0..n)
        .map(|i| Block {
            label: label(i),
            instrs: random_body(rng, 3),
            term: Terminator::Ret,
            weights: None,
        })
        .collect();
    for i in 0..n {
        let roll = rng.gen_range(0..10);
        blocks[i].term = match roll {
            0..=4 => {
                let cond = format!("c{i}");
                match rng.gen_range(0..10) {
                    0..=6 => blocks[i].instrs.push(random_compare(rng, Some(&cond))),
                    7..=8 => {
                        let other = rng.gen_range(0..n);
                        blocks[other].instrs.push(random_compare(rng, Some(&cond)));
                    }
                    _ => {}
                }
                if rng.gen_bool(0.5) {
                    let taken = rng.gen_range(0..2000);
                    blocks[i].weights = Some(BranchWeights::new(taken, rng.gen_range(0..2000)));
                }
                Terminator::CondBr {
                    cond,
                    left: label(rng.gen_range(0..n)),
                    right: label(rng.gen_range(0..n)),
                }
            }
            5..=7 => Terminator::Jmp {
                target: label(rng.gen_range(0..n)),
            },
            8 => Terminator::Ret,
            _ => Terminator::Unreachable,
        };
    }
    // Compares placed into other blocks may have landed after a terminator
    // was chosen, which is fine; they may also have landed before phis.
    for b in &mut blocks {
        b.instrs.sort_by_key(|i| i.opcode != Opcode::Phi);
    }
    Function {
        name: name.to_owned(),
        blocks,
    }
}

/// A module of 1..=4 random functions with unique names.
pub fn random_module<R: Rng>(rng: &mut R, max_blocks: usize) -> CfgModule {
    let source_name = if rng.gen_bool(0.5) {
        format!("m{}", rng.gen_range(0..1000))
    } else {
        String::new()
    };
    let functions = (0..rng.gen_range(1..=4))
        .map(|i| random_function(rng, &format!("f{i}"), max_blocks))
        .collect();
    CfgModule { source_name, functions }
}

/// Thresholds and inputs share a coarse grid so that `input == threshold`
/// is common.
fn grid_value<R: Rng>(rng: &mut R) -> f32 {
    rng.gen_range(-8i32..=8) as f32 * 0.5
}

/// A random tree of depth at most `max_depth` over `num_features` features.
pub fn random_tree<R: Rng>(rng: &mut R, max_depth: usize, num_features: usize) -> TreeNode {
    if max_depth == 0 || rng.gen_bool(0.25) {
        return TreeNode::Leaf {
            value: rng.gen_range(-4.0f32..4.0),
        };
    }
    TreeNode::Split {
        feature: rng.gen_range(0..num_features),
        threshold: grid_value(rng),
        left: Box::new(random_tree(rng, max_depth - 1, num_features)),
        right: Box::new(random_tree(rng, max_depth - 1, num_features)),
    }
}

pub fn random_input<R: Rng>(rng: &mut R, num_features: usize) -> Vec<f32> {
    (0..num_features).map(|_| grid_value(rng)).collect()
}

/// Settings for [`planted_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    /// Minimum number of branches carrying at least 100 samples.
    pub num_branches: usize,
    /// Fraction of branches whose probability is replaced by a uniform draw.
    pub noise: f64,
    pub functions_per_module: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_branches: 3000,
            noise: 0.05,
            functions_per_module: 20,
            seed: 42,
        }
    }
}

struct Rules {
    left_backedge: usize,
    right_backedge: usize,
    left_unreachable: usize,
    right_unreachable: usize,
    is_eq: usize,
    to_const: usize,
    predicate: usize,
    loop_header: usize,
    left_return: usize,
    right_return: usize,
}

impl Rules {
    fn new() -> Rules {
        let ix = |n: &str| feature_index(n).expect("known feature");
        Rules {
            left_backedge: ix("br.left_is_backedge"),
            right_backedge: ix("br.right_is_backedge"),
            left_unreachable: ix("left.ends_with_unreachable"),
            right_unreachable: ix("right.ends_with_unreachable"),
            is_eq: ix("br.predicate_is_eq"),
            to_const: ix("br.cmp_to_const"),
            predicate: ix("br.condition_predicate"),
            loop_header: ix("br.is_loop_header"),
            left_return: ix("left.ends_with_return"),
            right_return: ix("right.ends_with_return"),
        }
    }

    fn probability(&self, x: &FeatureVector) -> f64 {
        let on = |i: usize| x.0[i] != 0.0;
        let ne_code = 1.0 + Predicate::ALL.iter().position(|p| *p == Predicate::Ne).expect("listed") as f32;
        if on(self.left_backedge) {
            0.9
        } else if on(self.right_backedge) {
            0.1
        } else if on(self.left_unreachable) {
            0.0
        } else if on(self.right_unreachable) {
            1.0
        } else if on(self.is_eq) && on(self.to_const) {
            if x.0[self.predicate] == ne_code {
                0.8
            } else {
                0.2
            }
        } else if on(self.loop_header) {
            0.7
        } else if on(self.left_return) && !on(self.right_return) {
            0.3
        } else if on(self.right_return) && !on(self.left_return) {
            0.7
        } else {
            0.5
        }
    }
}

/// Noise-free taken probability the synthetic corpus assigns to a branch.
/// The first matching rule wins:
///
/// 1. left edge is a backedge: 0.9; right edge is a backedge: 0.1
/// 2. left successor ends in `unreachable`: 0.0; right successor: 1.0
/// 3. equality compare against a constant: `ne` 0.8, `eq` 0.2
/// 4. loop header: 0.7
/// 5. only the left successor returns: 0.3; only the right one: 0.7
///
/// Everything else is 0.5.
pub fn planted_probability(x: &FeatureVector) -> f64 {
    Rules::new().probability(x)
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    blocks: Vec<Block>,
    next_label: usize,
}

impl Builder<'_> {
    fn fresh(&mut self) -> String {
        self.next_label += 1;
        format!("bb{}", self.next_label)
    }

    fn push(&mut self, label: String, instrs: Vec<Instr>, term: Terminator) {
        self.blocks.push(Block {
            label,
            instrs,
            term,
            weights: None,
        });
    }

    /// A compare defining `cond`, or nothing when the condition is a plain
    /// value such as a function argument.
    fn condition(&mut self, cond: &str) -> Option<Instr> {
        let r = &mut *self.rng;
        let pick = |r: &mut ChaCha8Rng, ps: &[Predicate]| *ps.choose(r).expect("non-empty");
        let eq = [Predicate::Eq, Predicate::Ne];
        let rel = [Predicate::Lt, Predicate::Le, Predicate::Gt, Predicate::Ge];
        let (opcode, pred, lhs, rhs) = match r.gen_range(0..20) {
            0..=5 => {
                let (a, b) = if r.gen_bool(0.8) {
                    (OperandKind::Var, OperandKind::Const)
                } else {
                    (OperandKind::Const, OperandKind::Var)
                };
                (Opcode::Icmp, pick(r, &eq), a, b)
            }
            6..=8 => (Opcode::Icmp, pick(r, &eq), OperandKind::Pointer, OperandKind::NullPtr),
            9..=10 => (Opcode::Icmp, pick(r, &eq), OperandKind::Pointer, OperandKind::Pointer),
            11..=14 => {
                let rhs = if r.gen_bool(0.5) { OperandKind::Var } else { OperandKind::Const };
                (Opcode::Icmp, pick(r, &rel), OperandKind::Var, rhs)
            }
            15..=16 => (Opcode::Icmp, pick(r, &eq), OperandKind::Var, OperandKind::Var),
            17..=18 => {
                let all = Predicate::ALL;
                (Opcode::Fcmp, pick(r, &all), OperandKind::Var, OperandKind::Var)
            }
            _ => return None,
        };
        Some(Instr::compare(opcode, pred, lhs, rhs, Some(cond)))
    }

    fn branch(&mut self, label: String, taken: String, fallthrough: String) {
        let cond = format!("c_{label}");
        let mut instrs = random_body(self.rng, 4);
        if let Some(c) = self.condition(&cond) {
            instrs.push(c);
        }
        self.push(
            label,
            instrs,
            Terminator::CondBr {
                cond,
                left: taken,
                right: fallthrough,
            },
        );
    }

    /// Emits `targets` in random left/right order.
    fn branch_either(&mut self, label: String, a: String, b: String) {
        if self.rng.gen_bool(0.5) {
            self.branch(label, a, b);
        } else {
            self.branch(label, b, a);
        }
    }

    fn sequence(&mut self, depth: usize, next: String) -> String {
        let n = self.rng.gen_range(1..=3);
        let mut cur = next;
        for _ in 0..n {
            cur = self.statement(depth, cur);
        }
        cur
    }

    fn statement(&mut self, depth: usize, next: String) -> String {
        let roll = if depth >= 3 { self.rng.gen_range(0..5) } else { self.rng.gen_range(0..10) };
        match roll {
            0 => {
                let l = self.fresh();
                let body = random_body(self.rng, 5);
                self.push(l.clone(), body, Terminator::Jmp { target: next });
                l
            }
            1 => {
                // Guard: one side aborts.
                let c = self.fresh();
                let u = self.fresh();
                let body = vec![Instr::simple(Opcode::Call)];
                self.push(u.clone(), body, Terminator::Unreachable);
                self.branch_either(c.clone(), u, next);
                c
            }
            2 => {
                // Early return.
                let c = self.fresh();
                let r = self.fresh();
                let body = random_body(self.rng, 2);
                self.push(r.clone(), body, Terminator::Ret);
                self.branch_either(c.clone(), r, next);
                c
            }
            3 | 4 => {
                // Branch straight into the join: a triangle.
                let c = self.fresh();
                let l = self.fresh();
                let body = random_body(self.rng, 4);
                self.push(l.clone(), body, Terminator::Jmp { target: next.clone() });
                self.branch_either(c.clone(), l, next);
                c
            }
            5 | 6 => {
                let c = self.fresh();
                let t = self.sequence(depth + 1, next.clone());
                if roll == 5 {
                    self.branch_either(c.clone(), t, next);
                } else {
                    let e = self.sequence(depth + 1, next);
                    self.branch_either(c.clone(), t, e);
                }
                c
            }
            7 | 8 => {
                // While loop: the header tests, the body jumps back.
                let h = self.fresh();
                let body = self.sequence(depth + 1, h.clone());
                self.branch_either(h.clone(), body, next);
                h
            }
            _ => {
                // Do-while loop: the latch tests and jumps back.
                let h = self.fresh();
                let latch = self.fresh();
                let body = self.sequence(depth + 1, latch.clone());
                let instrs = random_body(self.rng, 3);
                self.push(h.clone(), instrs, Terminator::Jmp { target: body });
                self.branch_either(latch, h.clone(), next);
                h
            }
        }
    }
}

/// One structured function: nested if/else, guards, early returns and
/// loops. Weights are not assigned.
pub fn structured_function(rng: &mut ChaCha8Rng, name: &str) -> Function {
    let mut b = Builder {
        rng,
        blocks: Vec::new(),
        next_label: 0,
    };
    let exit = b.fresh();
    let instrs = random_body(b.rng, 2);
    b.push(exit.clone(), instrs, Terminator::Ret);
    let entry = b.sequence(0, exit);
    let pos = b.blocks.iter().position(|blk| blk.label == entry).expect("entry was emitted");
    let first = b.blocks.remove(pos);
    b.blocks.insert(0, first);
    Function {
        name: name.to_owned(),
        blocks: b.blocks,
    }
}

/// Generates modules of structured functions and profiles every branch
/// from [`planted_probability`]: sample count uniform in [100, 5000] and
/// `taken = floor(p * count)`. A `noise` fraction of branches draws `p`
/// uniformly instead. A few branches get fewer than 100 samples or no
/// weights at all.
pub fn planted_corpus(cfg: &CorpusConfig) -> Vec<CfgModule> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rules = Rules::new();
    let mut modules = Vec::new();
    let mut labeled = 0;
    while labeled < cfg.num_branches {
        let mut module = CfgModule {
            source_name: format!("synthetic{}", modules.len()),
            functions: Vec::new(),
        };
        for fi in 0..cfg.functions_per_module.max(1) {
            if labeled >= cfg.num_branches {
                break;
            }
            let mut f = structured_function(&mut rng, &format!("fn{fi}"));
            for (bi, x) in extract_function(&f) {
                let roll: f64 = rng.gen();
                if roll < 0.03 {
                    continue;
                }
                let count = if roll < 0.06 {
                    rng.gen_range(1..100u64)
                } else {
                    labeled += 1;
                    rng.gen_range(100..=5000u64)
                };
                let p = if rng.gen_bool(cfg.noise) {
                    rng.gen::<f64>()
                } else {
                    rules.probability(&x)
                };
                let taken = (p * count as f64).floor() as u64;
                f.blocks[bi].weights = Some(BranchWeights::new(taken, count - taken));
            }
            module.functions.push(f);
        }
        modules.push(module);
    }
    modules
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_bcfg, write_bcfg};

    #[test]
    fn random_functions_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = random_module(&mut rng, 12);
            m.validate().unwrap();
            assert_eq!(parse_bcfg(&write_bcfg(&m)).unwrap(), m);
        }
    }

    #[test]
    fn corpus_is_valid_and_deterministic() {
        let cfg = CorpusConfig {
            num_branches: 300,
            ..CorpusConfig::default()
        };
        let a = planted_corpus(&cfg);
        assert_eq!(a, planted_corpus(&cfg));
        let mut labeled = 0;
        for m in &a {
            m.validate().unwrap();
            for f in &m.functions {
                labeled += f.blocks.iter().filter(|b| b.weights.map_or(false, |w| w.total() >= 100)).count();
            }
        }
        assert!(labeled >= 300);
    }

    #[test]
    fn every_rule_fires() {
        let cfg = CorpusConfig {
            num_branches: 2000,
            noise: 0.0,
            ..CorpusConfig::default()
        };
        let mut seen = std::collections::BTreeSet::new();
        for m in planted_corpus(&cfg) {
            for f in &m.functions {
                for (_, x) in extract_function(f) {
                    seen.insert((planted_probability(&x) * 10.0).round() as u32);
                }
            }
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3, 5, 7, 8, 9, 10]);
    }

    #[test]
    fn structured_functions_reach_every_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..100 {
            let f = structured_function(&mut rng, &format!("f{i}"));
            let dt = crate::analysis::compute_dominators(&f);
            assert!((0..f.blocks.len()).all(|b| dt.is_reachable(b)));
        }
    }
}
