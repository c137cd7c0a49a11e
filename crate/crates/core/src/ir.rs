//! Control-flow graph data model and the line-oriented `.bcfg` text format.
//!
//! A `.bcfg` document describes one module: a list of functions, each an
//! ordered list of basic blocks. Blocks carry a summary of their instructions
//! (enough to compute branch features and static heuristics), one terminator,
//! and optionally the profiled `weights` of a conditional branch.
//!
//! ```text
//! module demo
//! func main
//! block entry
//!   instr icmp pred=ne lhs=pointer rhs=null_ptr def=c0
//!   term cond_br c0 body exit
//!   weights 90 10
//! block body
//!   instr call
//!   term jmp exit
//! block exit
//!   term ret
//! ```
//!
//! The left target of `cond_br` is always the taken (true) successor.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CfgModule {
    pub source_name: String,
    pub functions: Vec<Function>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    /// Block 0 is the entry block.
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub instrs: Vec<Instr>,
    pub term: Terminator,
    pub weights: Option<BranchWeights>,
}

/// Profiled execution counts of a conditional branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BranchWeights {
    pub taken: u64,
    pub not_taken: u64,
}

impl BranchWeights {
    pub fn new(taken: u64, not_taken: u64) -> Self {
        BranchWeights { taken, not_taken }
    }

    pub fn total(&self) -> u64 {
        self.taken.saturating_add(self.not_taken)
    }

    /// Fraction of executions that took the left successor, or `None` when
    /// the branch never executed.
    pub fn taken_probability(&self) -> Option<f64> {
        let total = self.taken as f64 + self.not_taken as f64;
        if total > 0.0 {
            Some(self.taken as f64 / total)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Phi,
    Load,
    Store,
    Call,
    Icmp,
    Fcmp,
    RetVal,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Predicate {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Ord,
    Uno,
}

impl Predicate {
    pub const ALL: [Predicate; 8] = [
        Predicate::Eq,
        Predicate::Ne,
        Predicate::Lt,
        Predicate::Le,
        Predicate::Gt,
        Predicate::Ge,
        Predicate::Ord,
        Predicate::Uno,
    ];

    pub fn is_equality(self) -> bool {
        matches!(self, Predicate::Eq | Predicate::Ne)
    }

    /// Predicate obtained by exchanging the two operands.
    pub fn swapped(self) -> Predicate {
        match self {
            Predicate::Lt => Predicate::Gt,
            Predicate::Le => Predicate::Ge,
            Predicate::Gt => Predicate::Lt,
            Predicate::Ge => Predicate::Le,
            p => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperandKind {
    Var,
    Const,
    NullPtr,
    Pointer,
}

impl OperandKind {
    pub const ALL: [OperandKind; 4] = [
        OperandKind::Var,
        OperandKind::Const,
        OperandKind::NullPtr,
        OperandKind::Pointer,
    ];

    pub fn is_constant(self) -> bool {
        matches!(self, OperandKind::Const | OperandKind::NullPtr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmpDetail {
    pub predicate: Predicate,
    pub lhs: OperandKind,
    pub rhs: OperandKind,
    /// Name of the branch condition this compare produces, if any.
    pub defines: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instr {
    pub opcode: Opcode,
    /// Present iff `opcode` is `Icmp` or `Fcmp`.
    pub cmp: Option<CmpDetail>,
}

impl Instr {
    pub fn simple(opcode: Opcode) -> Self {
        debug_assert!(!matches!(opcode, Opcode::Icmp | Opcode::Fcmp));
        Instr { opcode, cmp: None }
    }

    pub fn compare(
        opcode: Opcode,
        predicate: Predicate,
        lhs: OperandKind,
        rhs: OperandKind,
        defines: Option<&str>,
    ) -> Self {
        debug_assert!(matches!(opcode, Opcode::Icmp | Opcode::Fcmp));
        Instr {
            opcode,
            cmp: Some(CmpDetail {
                predicate,
                lhs,
                rhs,
                defines: defines.map(str::to_owned),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    /// `left` is the taken successor, `right` the fall-through.
    CondBr {
        cond: String,
        left: String,
        right: String,
    },
    Jmp {
        target: String,
    },
    Ret,
    Unreachable,
}

impl Terminator {
    /// Successor labels in edge order (left before right).
    pub fn targets(&self) -> Vec<&str> {
        match self {
            Terminator::CondBr { left, right, .. } => vec![left.as_str(), right.as_str()],
            Terminator::Jmp { target } => vec![target.as_str()],
            Terminator::Ret | Terminator::Unreachable => Vec::new(),
        }
    }

    pub fn is_cond_br(&self) -> bool {
        matches!(self, Terminator::CondBr { .. })
    }
}

impl Function {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    /// Finds the compare instruction that defines `cond`, returning the
    /// index of its block alongside it.
    pub fn condition_def(&self, cond: &str) -> Option<(usize, &Instr)> {
        self.blocks.iter().enumerate().find_map(|(bi, b)| {
            b.instrs
                .iter()
                .find(|i| matches!(&i.cmp, Some(c) if c.defines.as_deref() == Some(cond)))
                .map(|i| (bi, i))
        })
    }
}

impl CfgModule {
    /// Checks every structural invariant that `parse_bcfg` enforces.
    pub fn validate(&self) -> Result<(), ParseError> {
        let mut seen = HashSet::new();
        for f in &self.functions {
            if !seen.insert(f.name.as_str()) {
                return Err(ParseError::semantic(0, format!("duplicate function `{}`", f.name)));
            }
            validate_function(f, 0)?;
        }
        Ok(())
    }

    pub fn num_cond_branches(&self) -> usize {
        self.functions
            .iter()
            .flat_map(|f| &f.blocks)
            .filter(|b| b.term.is_cond_br())
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{column}: expected {expected}, found {found}")]
    Syntax {
        line: usize,
        column: usize,
        expected: String,
        found: String,
    },
    #[error("line {line}: {message}")]
    Semantic { line: usize, message: String },
    #[error("input is not valid UTF-8 (byte offset {offset})")]
    Encoding { offset: usize },
}

impl ParseError {
    fn semantic(line: usize, message: String) -> Self {
        ParseError::Semantic { line, message }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            ParseError::Syntax { line, .. } | ParseError::Semantic { line, .. } => Some(*line),
            ParseError::Encoding { .. } => None,
        }
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.')
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, { $($text:literal => $variant:path),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = ();
            fn from_str(s: &str) -> Result<Self, ()> {
                match s {
                    $($text => Ok($variant),)+
                    _ => Err(()),
                }
            }
        }

        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $($variant => $text,)+
                }
            }

            fn expected() -> String {
                let names: &[&str] = &[$($text),+];
                format!("{} ({})", $what, names.join("|"))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(Opcode, "opcode", {
    "phi" => Opcode::Phi,
    "load" => Opcode::Load,
    "store" => Opcode::Store,
    "call" => Opcode::Call,
    "icmp" => Opcode::Icmp,
    "fcmp" => Opcode::Fcmp,
    "ret_val" => Opcode::RetVal,
    "other" => Opcode::Other,
});

keyword_enum!(Predicate, "predicate", {
    "eq" => Predicate::Eq,
    "ne" => Predicate::Ne,
    "lt" => Predicate::Lt,
    "le" => Predicate::Le,
    "gt" => Predicate::Gt,
    "ge" => Predicate::Ge,
    "ord" => Predicate::Ord,
    "uno" => Predicate::Uno,
});

keyword_enum!(OperandKind, "operand kind", {
    "var" => OperandKind::Var,
    "const" => OperandKind::Const,
    "null_ptr" => OperandKind::NullPtr,
    "pointer" => OperandKind::Pointer,
});

#[derive(Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    column: usize,
}

struct Line<'a> {
    number: usize,
    tokens: Vec<Token<'a>>,
    end_column: usize,
}

impl<'a> Line<'a> {
    fn tokenize(number: usize, raw: &'a str) -> Self {
        let content = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let mut tokens = Vec::new();
        let mut start = None;
        for (i, ch) in content.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    tokens.push(Token {
                        text: &content[s..i],
                        column: content[..s].chars().count() + 1,
                    });
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            tokens.push(Token {
                text: &content[s..],
                column: content[..s].chars().count() + 1,
            });
        }
        Line {
            number,
            tokens,
            end_column: content.chars().count() + 1,
        }
    }

    fn token(&self, i: usize, expected: &str) -> Result<Token<'a>, ParseError> {
        self.tokens.get(i).copied().ok_or_else(|| ParseError::Syntax {
            line: self.number,
            column: self.end_column,
            expected: expected.to_owned(),
            found: "end of line".to_owned(),
        })
    }

    fn error(&self, tok: Token<'_>, expected: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            line: self.number,
            column: tok.column,
            expected: expected.into(),
            found: format!("`{}`", tok.text),
        }
    }

    fn ident(&self, i: usize, what: &str) -> Result<&'a str, ParseError> {
        let tok = self.token(i, what)?;
        if is_ident(tok.text) {
            Ok(tok.text)
        } else {
            Err(self.error(tok, what))
        }
    }

    fn keyword<T: FromStr>(&self, tok: Token<'_>, expected: impl FnOnce() -> String) -> Result<T, ParseError> {
        tok.text.parse().map_err(|_| self.error(tok, expected()))
    }

    fn count(&self, i: usize) -> Result<u64, ParseError> {
        let tok = self.token(i, "non-negative integer")?;
        if !tok.text.bytes().all(|b| b.is_ascii_digit()) {
            return Err(self.error(tok, "non-negative integer"));
        }
        tok.text
            .parse()
            .map_err(|_| self.error(tok, "integer that fits in 64 bits"))
    }

    fn expect_end(&self, i: usize) -> Result<(), ParseError> {
        match self.tokens.get(i) {
            None => Ok(()),
            Some(tok) => Err(self.error(*tok, "end of line")),
        }
    }
}

struct PendingBlock {
    label: String,
    line: usize,
    instrs: Vec<Instr>,
    term: Option<Terminator>,
    weights: Option<(BranchWeights, usize)>,
}

struct PendingFunction {
    name: String,
    line: usize,
    blocks: Vec<Block>,
    block_lines: Vec<usize>,
}

/// Parses raw bytes, reporting invalid UTF-8 as an error rather than failing.
pub fn parse_bcfg_bytes(bytes: &[u8]) -> Result<CfgModule, ParseError> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_bcfg(text),
        Err(e) => Err(ParseError::Encoding {
            offset: e.valid_up_to(),
        }),
    }
}

pub fn parse_bcfg(text: &str) -> Result<CfgModule, ParseError> {
    let mut module = CfgModule::default();
    let mut module_seen = false;
    let mut func: Option<PendingFunction> = None;
    let mut block: Option<PendingBlock> = None;
    let mut func_names = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = Line::tokenize(idx + 1, raw);
        let Some(head) = line.tokens.first().copied() else {
            continue;
        };
        match head.text {
            "module" => {
                if module_seen || func.is_some() {
                    return Err(line.error(head, "`module` only once, before any `func`"));
                }
                module.source_name = line.ident(1, "module name")?.to_owned();
                line.expect_end(2)?;
                module_seen = true;
            }
            "func" => {
                let name = line.ident(1, "function name")?;
                line.expect_end(2)?;
                finish_function(&mut module, &mut func, &mut block)?;
                if !func_names.insert(name.to_owned()) {
                    return Err(ParseError::semantic(
                        line.number,
                        format!("duplicate function `{name}`"),
                    ));
                }
                func = Some(PendingFunction {
                    name: name.to_owned(),
                    line: line.number,
                    blocks: Vec::new(),
                    block_lines: Vec::new(),
                });
            }
            "block" => {
                let label = line.ident(1, "block label")?;
                line.expect_end(2)?;
                let Some(f) = func.as_mut() else {
                    return Err(line.error(head, "`func` before the first `block`"));
                };
                finish_block(f, &mut block)?;
                block = Some(PendingBlock {
                    label: label.to_owned(),
                    line: line.number,
                    instrs: Vec::new(),
                    term: None,
                    weights: None,
                });
            }
            "instr" | "term" | "weights" => {
                let Some(b) = block.as_mut() else {
                    return Err(line.error(head, "`block` before block contents"));
                };
                match head.text {
                    "instr" => {
                        if b.term.is_some() {
                            return Err(line.error(head, "`weights` or a new `block` after the terminator"));
                        }
                        b.instrs.push(parse_instr(&line)?);
                    }
                    "term" => {
                        if b.term.is_some() {
                            return Err(line.error(head, "a single terminator per block"));
                        }
                        b.term = Some(parse_term(&line)?);
                    }
                    _ => {
                        if b.weights.is_some() {
                            return Err(line.error(head, "a single `weights` line per block"));
                        }
                        let taken = line.count(1)?;
                        let not_taken = line.count(2)?;
                        line.expect_end(3)?;
                        b.weights = Some((BranchWeights { taken, not_taken }, line.number));
                    }
                }
            }
            _ => {
                return Err(line.error(head, "one of `module`, `func`, `block`, `instr`, `term`, `weights`"));
            }
        }
    }
    finish_function(&mut module, &mut func, &mut block)?;
    Ok(module)
}

fn parse_instr(line: &Line<'_>) -> Result<Instr, ParseError> {
    let op_tok = line.token(1, &Opcode::expected())?;
    let opcode: Opcode = line.keyword(op_tok, Opcode::expected)?;
    let is_cmp = matches!(opcode, Opcode::Icmp | Opcode::Fcmp);
    if !is_cmp {
        line.expect_end(2)?;
        return Ok(Instr { opcode, cmp: None });
    }

    let mut pred = None;
    let mut lhs = None;
    let mut rhs = None;
    let mut def = None;
    for tok in &line.tokens[2..] {
        let Some((key, value)) = tok.text.split_once('=') else {
            return Err(line.error(*tok, "`key=value` attribute"));
        };
        let value_tok = Token {
            text: value,
            column: tok.column + key.len() + 1,
        };
        let dup = |present: bool| -> Result<(), ParseError> {
            if present {
                Err(line.error(*tok, format!("`{key}` at most once")))
            } else {
                Ok(())
            }
        };
        match key {
            "pred" => {
                dup(pred.is_some())?;
                pred = Some(line.keyword::<Predicate>(value_tok, Predicate::expected)?);
            }
            "lhs" => {
                dup(lhs.is_some())?;
                lhs = Some(line.keyword::<OperandKind>(value_tok, OperandKind::expected)?);
            }
            "rhs" => {
                dup(rhs.is_some())?;
                rhs = Some(line.keyword::<OperandKind>(value_tok, OperandKind::expected)?);
            }
            "def" => {
                dup(def.is_some())?;
                if !is_ident(value) {
                    return Err(line.error(value_tok, "condition name"));
                }
                def = Some(value.to_owned());
            }
            _ => return Err(line.error(*tok, "one of `pred=`, `lhs=`, `rhs=`, `def=`")),
        }
    }
    let missing = |what: &str| ParseError::Syntax {
        line: line.number,
        column: line.end_column,
        expected: format!("`{what}=` attribute on {opcode}"),
        found: "end of line".to_owned(),
    };
    Ok(Instr {
        opcode,
        cmp: Some(CmpDetail {
            predicate: pred.ok_or_else(|| missing("pred"))?,
            lhs: lhs.ok_or_else(|| missing("lhs"))?,
            rhs: rhs.ok_or_else(|| missing("rhs"))?,
            defines: def,
        }),
    })
}

fn parse_term(line: &Line<'_>) -> Result<Terminator, ParseError> {
    const KINDS: &str = "terminator (cond_br|jmp|ret|unreachable)";
    let kind = line.token(1, KINDS)?;
    let term = match kind.text {
        // `br` is accepted as a synonym of `cond_br`.
        "cond_br" | "br" => {
            let cond = line.ident(2, "condition name")?.to_owned();
            let left = line.ident(3, "taken target label")?.to_owned();
            let right = line.ident(4, "not-taken target label")?.to_owned();
            line.expect_end(5)?;
            Terminator::CondBr { cond, left, right }
        }
        "jmp" => {
            let target = line.ident(2, "target label")?.to_owned();
            line.expect_end(3)?;
            Terminator::Jmp { target }
        }
        "ret" => {
            line.expect_end(2)?;
            Terminator::Ret
        }
        "unreachable" => {
            line.expect_end(2)?;
            Terminator::Unreachable
        }
        _ => return Err(line.error(kind, KINDS)),
    };
    Ok(term)
}

fn finish_block(f: &mut PendingFunction, block: &mut Option<PendingBlock>) -> Result<(), ParseError> {
    let Some(b) = block.take() else {
        return Ok(());
    };
    let Some(term) = b.term else {
        return Err(ParseError::semantic(
            b.line,
            format!("block `{}` in `{}` has no terminator", b.label, f.name),
        ));
    };
    let weights = match b.weights {
        Some((w, wline)) => {
            if !term.is_cond_br() {
                return Err(ParseError::semantic(
                    wline,
                    format!(
                        "weights on block `{}` in `{}`, which does not end in cond_br",
                        b.label, f.name
                    ),
                ));
            }
            Some(w)
        }
        None => None,
    };
    f.blocks.push(Block {
        label: b.label,
        instrs: b.instrs,
        term,
        weights,
    });
    f.block_lines.push(b.line);
    Ok(())
}

fn finish_function(
    module: &mut CfgModule,
    func: &mut Option<PendingFunction>,
    block: &mut Option<PendingBlock>,
) -> Result<(), ParseError> {
    let Some(mut f) = func.take() else {
        return Ok(());
    };
    finish_block(&mut f, block)?;
    let function = Function {
        name: f.name,
        blocks: f.blocks,
    };
    if function.blocks.is_empty() {
        return Err(ParseError::semantic(
            f.line,
            format!("function `{}` has no blocks", function.name),
        ));
    }
    validate_function_lines(&function, &f.block_lines)?;
    module.functions.push(function);
    Ok(())
}

fn validate_function(f: &Function, line: usize) -> Result<(), ParseError> {
    if f.blocks.is_empty() {
        return Err(ParseError::semantic(line, format!("function `{}` has no blocks", f.name)));
    }
    for b in &f.blocks {
        if b.weights.is_some() && !b.term.is_cond_br() {
            return Err(ParseError::semantic(
                line,
                format!(
                    "weights on block `{}` in `{}`, which does not end in cond_br",
                    b.label, f.name
                ),
            ));
        }
        for i in &b.instrs {
            let is_cmp = matches!(i.opcode, Opcode::Icmp | Opcode::Fcmp);
            if is_cmp != i.cmp.is_some() {
                return Err(ParseError::semantic(
                    line,
                    format!("malformed {} in block `{}` of `{}`", i.opcode, b.label, f.name),
                ));
            }
        }
    }
    validate_function_lines(f, &vec![line; f.blocks.len()])
}

fn validate_function_lines(f: &Function, lines: &[usize]) -> Result<(), ParseError> {
    let mut labels: HashMap<&str, usize> = HashMap::new();
    for (b, &line) in f.blocks.iter().zip(lines) {
        if labels.insert(b.label.as_str(), line).is_some() {
            return Err(ParseError::semantic(
                line,
                format!("duplicate block label `{}` in `{}`", b.label, f.name),
            ));
        }
    }
    let mut conds = HashSet::new();
    for (b, &line) in f.blocks.iter().zip(lines) {
        for t in b.term.targets() {
            if !labels.contains_key(t) {
                return Err(ParseError::semantic(
                    line,
                    format!(
                        "block `{}` in `{}` branches to unknown label `{t}`",
                        b.label, f.name
                    ),
                ));
            }
        }
        let mut past_phis = false;
        for i in &b.instrs {
            if i.opcode == Opcode::Phi {
                if past_phis {
                    return Err(ParseError::semantic(
                        line,
                        format!("phi after non-phi instruction in block `{}` of `{}`", b.label, f.name),
                    ));
                }
            } else {
                past_phis = true;
            }
            if let Some(name) = i.cmp.as_ref().and_then(|c| c.defines.as_deref()) {
                if !conds.insert(name) {
                    return Err(ParseError::semantic(
                        line,
                        format!("condition `{name}` defined twice in `{}`", f.name),
                    ));
                }
            }
        }
    }
    Ok(())
}

pub fn write_bcfg(module: &CfgModule) -> String {
    let mut out = String::new();
    if !module.source_name.is_empty() {
        let _ = writeln!(out, "module {}", module.source_name);
    }
    for f in &module.functions {
        let _ = writeln!(out, "func {}", f.name);
        for b in &f.blocks {
            let _ = writeln!(out, "block {}", b.label);
            for i in &b.instrs {
                match &i.cmp {
                    None => {
                        let _ = writeln!(out, "  instr {}", i.opcode);
                    }
                    Some(c) => {
                        let _ = write!(
                            out,
                            "  instr {} pred={} lhs={} rhs={}",
                            i.opcode, c.predicate, c.lhs, c.rhs
                        );
                        if let Some(d) = &c.defines {
                            let _ = write!(out, " def={d}");
                        }
                        out.push('\n');
                    }
                }
            }
            let _ = match &b.term {
                Terminator::CondBr { cond, left, right } => {
                    writeln!(out, "  term cond_br {cond} {left} {right}")
                }
                Terminator::Jmp { target } => writeln!(out, "  term jmp {target}"),
                Terminator::Ret => writeln!(out, "  term ret"),
                Terminator::Unreachable => writeln!(out, "  term unreachable"),
            };
            if let Some(w) = b.weights {
                let _ = writeln!(out, "  weights {} {}", w.taken, w.not_taken);
            }
        }
    }
    out
}
