//! Hand-written static branch heuristics, used as partial predictors.
//!
//! Each heuristic looks only at the compare that defines the branch
//! condition and either abstains or predicts whether the taken (left)
//! successor is the likely one. When several apply, the first in
//! [`Heuristic::ALL`] claims the branch.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::dataset::branch_label;
use crate::ir::{CfgModule, Instr, Opcode, OperandKind, Predicate, Terminator};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BaselineError {
    #[error("no labeled branches to evaluate")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Heuristic {
    Pointer,
    Zero,
    FloatingPoint,
}

impl Heuristic {
    /// Priority order.
    pub const ALL: [Heuristic; 3] = [Heuristic::Pointer, Heuristic::Zero, Heuristic::FloatingPoint];

    pub fn as_str(self) -> &'static str {
        match self {
            Heuristic::Pointer => "pointer",
            Heuristic::Zero => "zero",
            Heuristic::FloatingPoint => "floating_point",
        }
    }

    pub fn predict(self, compare: Option<&Instr>) -> Option<HeuristicPrediction> {
        match self {
            Heuristic::Pointer => pointer_heuristic(compare),
            Heuristic::Zero => zero_heuristic(compare),
            Heuristic::FloatingPoint => fp_heuristic(compare),
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeuristicPrediction {
    pub heuristic: Heuristic,
    pub taken_is_likely: bool,
}

fn prediction(heuristic: Heuristic, taken_is_likely: bool) -> Option<HeuristicPrediction> {
    Some(HeuristicPrediction {
        heuristic,
        taken_is_likely,
    })
}

/// Equality compare of a pointer against another pointer or null: pointers
/// are expected to differ.
pub fn pointer_heuristic(compare: Option<&Instr>) -> Option<HeuristicPrediction> {
    let i = compare?;
    let c = i.cmp.as_ref()?;
    let is_ptr = |k: OperandKind| matches!(k, OperandKind::Pointer | OperandKind::NullPtr);
    let has_pointer = c.lhs == OperandKind::Pointer || c.rhs == OperandKind::Pointer;
    if i.opcode != Opcode::Icmp || !c.predicate.is_equality() || !has_pointer || !is_ptr(c.lhs) || !is_ptr(c.rhs) {
        return None;
    }
    prediction(Heuristic::Pointer, c.predicate == Predicate::Ne)
}

/// Integer compare of a variable against a constant, taken as zero:
/// `x == 0` and `x < 0` are unlikely, `x != 0` and `x > 0` likely.
pub fn zero_heuristic(compare: Option<&Instr>) -> Option<HeuristicPrediction> {
    let i = compare?;
    let c = i.cmp.as_ref()?;
    if i.opcode != Opcode::Icmp {
        return None;
    }
    let pred = match (c.lhs, c.rhs) {
        (OperandKind::Var, OperandKind::Const) => c.predicate,
        (OperandKind::Const, OperandKind::Var) => c.predicate.swapped(),
        _ => return None,
    };
    match pred {
        Predicate::Eq | Predicate::Lt => prediction(Heuristic::Zero, false),
        Predicate::Ne | Predicate::Gt => prediction(Heuristic::Zero, true),
        _ => None,
    }
}

/// Floating-point equality is rare.
pub fn fp_heuristic(compare: Option<&Instr>) -> Option<HeuristicPrediction> {
    let i = compare?;
    let c = i.cmp.as_ref()?;
    if i.opcode != Opcode::Fcmp {
        return None;
    }
    match c.predicate {
        Predicate::Eq => prediction(Heuristic::FloatingPoint, false),
        Predicate::Ne => prediction(Heuristic::FloatingPoint, true),
        _ => None,
    }
}

/// First applicable heuristic in priority order.
pub fn predict(compare: Option<&Instr>) -> Option<HeuristicPrediction> {
    Heuristic::ALL.iter().find_map(|h| h.predict(compare))
}

/// What the heuristics need to know about one profiled branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBranch {
    /// Defining compare of the condition, if it has one.
    pub compare: Option<Instr>,
    pub p_taken: f64,
    pub total_count: u64,
}

/// Every conditional branch with at least `min_samples` profiled
/// executions, in corpus order.
pub fn collect_branches(corpus: &[CfgModule], min_samples: u64) -> Vec<LabeledBranch> {
    let mut out = Vec::new();
    for f in corpus.iter().flat_map(|m| &m.functions) {
        for b in &f.blocks {
            let (Terminator::CondBr { cond, .. }, Some((p_taken, total_count))) = (&b.term, branch_label(b, min_samples))
            else {
                continue;
            };
            out.push(LabeledBranch {
                compare: f.condition_def(cond).map(|(_, i)| i.clone()),
                p_taken,
                total_count,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicRow {
    pub heuristic: Heuristic,
    pub branches: u64,
    /// Fraction of all labeled branches this heuristic claimed.
    pub weight: f64,
    /// Fraction of claimed branches predicted in the majority direction;
    /// `None` when nothing was claimed.
    pub correct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicTable {
    pub total_branches: u64,
    pub rows: Vec<HeuristicRow>,
}

impl HeuristicTable {
    /// Highest correct fraction among heuristics that claimed anything.
    pub fn best_correct(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.correct).reduce(f64::max)
    }

    pub fn coverage(&self) -> f64 {
        self.rows.iter().map(|r| r.weight).sum()
    }
}

/// A prediction is correct when it agrees with `p_taken > 0.5`; a branch
/// taken exactly half the time counts against the heuristic.
pub fn evaluate_heuristics(branches: &[LabeledBranch]) -> Result<HeuristicTable, BaselineError> {
    if branches.is_empty() {
        return Err(BaselineError::EmptyCorpus);
    }
    let mut claimed = [0u64; 3];
    let mut correct = [0u64; 3];
    for b in branches {
        if let Some(p) = predict(b.compare.as_ref()) {
            let h = Heuristic::ALL.iter().position(|h| *h == p.heuristic).expect("listed");
            claimed[h] += 1;
            if p.taken_is_likely == (b.p_taken > 0.5) {
                correct[h] += 1;
            }
        }
    }
    let total = branches.len() as u64;
    let rows = Heuristic::ALL
        .iter()
        .enumerate()
        .map(|(h, &heuristic)| HeuristicRow {
            heuristic,
            branches: claimed[h],
            weight: claimed[h] as f64 / total as f64,
            correct: (claimed[h] > 0).then(|| correct[h] as f64 / claimed[h] as f64),
        })
        .collect();
    Ok(HeuristicTable {
        total_branches: total,
        rows,
    })
}

/// Published figures for the production heuristics on a large corpus:
/// `(name, branches, weight, correct)`.
pub const BPI_REFERENCE: [(&str, u64, f64, f64); 4] = [
    ("estimated", 2_965_889, 0.29, 0.70),
    ("pointer", 4_961_307, 0.49, 0.56),
    ("zero", 2_133_775, 0.21, 0.76),
    ("floating_point", 6_227, 0.00, 0.45),
];

fn fmt_fraction(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"))
}

/// Aligned text table with the reference figures alongside.
pub fn render_table(t: &HeuristicTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>10} {:>8} {:>8}   {:>12} {:>8} {:>8}",
        "heuristic", "branches", "weight", "correct", "ref.branches", "ref.wt", "ref.corr"
    );
    for r in &t.rows {
        let (_, rb, rw, rc) = BPI_REFERENCE
            .iter()
            .find(|(n, ..)| *n == r.heuristic.as_str())
            .expect("every heuristic has a reference row");
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>8.4} {:>8}   {:>12} {:>8.2} {:>8.2}",
            r.heuristic.as_str(),
            r.branches,
            r.weight,
            fmt_fraction(r.correct),
            rb,
            rw,
            rc
        );
    }
    let _ = writeln!(out, "{:<16} {:>10} {:>8.4}", "total", t.total_branches, t.coverage());
    out
}

pub fn table_csv(t: &HeuristicTable) -> String {
    let mut out = String::from("heuristic,branches,weight,correct\n");
    for r in &t.rows {
        let correct = r.correct.map_or_else(|| "n/a".to_owned(), |c| c.to_string());
        let _ = writeln!(out, "{},{},{},{}", r.heuristic.as_str(), r.branches, r.weight, correct);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_bcfg;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn icmp(p: Predicate, l: OperandKind, r: OperandKind) -> Instr {
        Instr::compare(Opcode::Icmp, p, l, r, Some("c"))
    }

    fn fcmp(p: Predicate) -> Instr {
        Instr::compare(Opcode::Fcmp, p, OperandKind::Var, OperandKind::Var, Some("c"))
    }

    fn likely(h: Heuristic, i: &Instr) -> Option<bool> {
        h.predict(Some(i)).map(|p| p.taken_is_likely)
    }

    use OperandKind::{Const, NullPtr, Pointer, Var};
    use Predicate::*;

    #[test]
    fn pointer_truth_table() {
        let p = Heuristic::Pointer;
        assert_eq!(likely(p, &icmp(Ne, Pointer, NullPtr)), Some(true));
        assert_eq!(likely(p, &icmp(Eq, Pointer, NullPtr)), Some(false));
        assert_eq!(likely(p, &icmp(Ne, Pointer, Pointer)), Some(true));
        assert_eq!(likely(p, &icmp(Eq, Pointer, Pointer)), Some(false));
        assert_eq!(likely(p, &icmp(Eq, NullPtr, Pointer)), Some(false));
        assert_eq!(likely(p, &icmp(Lt, Pointer, Pointer)), None);
        assert_eq!(likely(p, &icmp(Eq, Var, NullPtr)), None);
        assert_eq!(likely(p, &icmp(Eq, NullPtr, NullPtr)), None);
        assert_eq!(pointer_heuristic(None), None);
    }

    #[test]
    fn zero_cases() {
        let z = Heuristic::Zero;
        assert_eq!(likely(z, &icmp(Eq, Var, Const)), Some(false));
        assert_eq!(likely(z, &icmp(Ne, Var, Const)), Some(true));
        assert_eq!(likely(z, &icmp(Lt, Var, Const)), Some(false));
        assert_eq!(likely(z, &icmp(Gt, Var, Const)), Some(true));
        // 0 < x is x > 0.
        assert_eq!(likely(z, &icmp(Lt, Const, Var)), Some(true));
        assert_eq!(likely(z, &icmp(Le, Var, Const)), None);
        assert_eq!(likely(z, &icmp(Eq, Var, Var)), None);
        assert_eq!(likely(z, &fcmp(Eq)), None);
    }

    #[test]
    fn fp_cases() {
        let f = Heuristic::FloatingPoint;
        assert_eq!(likely(f, &fcmp(Eq)), Some(false));
        assert_eq!(likely(f, &fcmp(Ne)), Some(true));
        assert_eq!(likely(f, &fcmp(Lt)), None);
        assert_eq!(likely(f, &icmp(Eq, Var, Var)), None);
    }

    fn branch(i: Instr, p: f64) -> LabeledBranch {
        LabeledBranch {
            compare: Some(i),
            p_taken: p,
            total_count: 1000,
        }
    }

    #[test]
    fn pointer_fixture_all_correct() {
        let bs: Vec<_> = (0..10).map(|_| branch(icmp(Ne, Pointer, NullPtr), 0.9)).collect();
        let t = evaluate_heuristics(&bs).unwrap();
        assert_eq!(t.rows[0].correct, Some(1.0));
        assert_eq!(t.rows[0].weight, 1.0);
        assert_eq!(t.rows[2].branches, 0);
        assert_eq!(t.rows[2].correct, None);
        assert!(table_csv(&t).contains("floating_point,0,0,n/a\n"));
    }

    #[test]
    fn half_taken_counts_as_wrong() {
        let t = evaluate_heuristics(&[branch(icmp(Eq, Var, Const), 0.5)]).unwrap();
        assert_eq!(t.rows[1].correct, Some(1.0));
        let t = evaluate_heuristics(&[branch(icmp(Ne, Var, Const), 0.5)]).unwrap();
        assert_eq!(t.rows[1].correct, Some(0.0));
    }

    #[test]
    fn empty_corpus() {
        assert_eq!(evaluate_heuristics(&[]), Err(BaselineError::EmptyCorpus));
    }

    #[test]
    fn exclusive_and_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let corpus = crate::synth::planted_corpus(&crate::synth::CorpusConfig {
            num_branches: 500,
            ..Default::default()
        });
        let mut bs = collect_branches(&corpus, 100);
        let t = evaluate_heuristics(&bs).unwrap();
        assert!(t.coverage() <= 1.0 + 1e-12);
        assert!(t.rows.iter().map(|r| r.branches).sum::<u64>() <= t.total_branches);
        bs.shuffle(&mut rng);
        assert_eq!(evaluate_heuristics(&bs).unwrap(), t);
    }

    #[test]
    fn collects_defining_compare() {
        let src = "\
func f
block a
  instr icmp pred=ne lhs=pointer rhs=null_ptr def=c
  term cond_br c b d
  weights 90 10
block b
  term cond_br z d a
  weights 5 5
block d
  term ret
";
        let bs = collect_branches(&[parse_bcfg(src).unwrap()], 11);
        assert_eq!(bs.len(), 1);
        assert_eq!(bs[0].p_taken, 0.9);
        assert!(predict(bs[0].compare.as_ref()).unwrap().taken_is_likely);
        assert_eq!(collect_branches(&[parse_bcfg(src).unwrap()], 1).len(), 2);
    }

    #[test]
    fn table_renders_every_row() {
        let t = evaluate_heuristics(&[branch(fcmp(Ne), 0.7)]).unwrap();
        let text = render_table(&t);
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("4961307"));
        assert_eq!(table_csv(&t).lines().count(), 4);
    }
}
