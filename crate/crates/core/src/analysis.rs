//! Dominator trees and natural loops over a [`Function`]'s control-flow graph.
//!
//! Dominators are computed with the iterative reverse-postorder algorithm of
//! Cooper, Harvey and Kennedy. Loops are natural loops: an edge `u -> h` is a
//! backedge when `h` dominates `u`, and the loop body is every block that can
//! reach `u` without passing through `h`. Edges into irreducible regions are
//! not backedges and form no loop.

use crate::ir::Function;

/// Index-based adjacency for one function. Parallel edges (a `cond_br` whose
/// targets coincide) are kept, so `succs[b].len()` is the edge count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cfg {
    pub succs: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
}

impl Cfg {
    /// # Panics
    ///
    /// If a terminator names a label that is not in `f` (the parser rejects
    /// such functions).
    pub fn new(f: &Function) -> Self {
        let n = f.blocks.len();
        let mut succs = vec![Vec::new(); n];
        let mut preds = vec![Vec::new(); n];
        for (i, b) in f.blocks.iter().enumerate() {
            for t in b.term.targets() {
                let j = f
                    .block_index(t)
                    .unwrap_or_else(|| panic!("unknown branch target `{t}` in `{}`", f.name));
                succs[i].push(j);
                preds[j].push(i);
            }
        }
        Cfg { succs, preds }
    }

    pub fn len(&self) -> usize {
        self.succs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.succs.is_empty()
    }

    /// Blocks reachable from the entry, in reverse postorder.
    pub fn reverse_postorder(&self) -> Vec<usize> {
        let n = self.len();
        if n == 0 {
            return Vec::new();
        }
        let mut visited = vec![false; n];
        let mut post = Vec::with_capacity(n);
        let mut stack = vec![(0usize, 0usize)];
        visited[0] = true;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(&s) = self.succs[node].get(*next) {
                *next += 1;
                if !visited[s] {
                    visited[s] = true;
                    stack.push((s, 0));
                }
            } else {
                post.push(node);
                stack.pop();
            }
        }
        post.reverse();
        post
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomTree {
    /// Immediate dominator per block; the entry maps to itself and
    /// unreachable blocks to `None`.
    pub idom: Vec<Option<usize>>,
    /// Number of blocks each block dominates, itself included.
    pub dom_count: Vec<usize>,
    // Pre/post numbering of the dominator tree for O(1) queries.
    pre: Vec<usize>,
    post: Vec<usize>,
}

impl DomTree {
    pub fn is_reachable(&self, b: usize) -> bool {
        self.idom[b].is_some()
    }

    /// Whether `a` dominates `b` (reflexive). Unreachable blocks only
    /// dominate themselves and are dominated only by themselves.
    pub fn dominates(&self, a: usize, b: usize) -> bool {
        if a == b {
            return true;
        }
        if !self.is_reachable(a) || !self.is_reachable(b) {
            return false;
        }
        self.pre[a] <= self.pre[b] && self.post[b] <= self.post[a]
    }

    pub fn strictly_dominates(&self, a: usize, b: usize) -> bool {
        a != b && self.dominates(a, b)
    }

    /// Children of `b` in the dominator tree, in block order.
    pub fn children(&self, b: usize) -> Vec<usize> {
        (0..self.idom.len())
            .filter(|&c| c != b && self.idom[c] == Some(b))
            .collect()
    }
}

pub fn compute_dominators(f: &Function) -> DomTree {
    dominators_of(&Cfg::new(f))
}

pub fn dominators_of(cfg: &Cfg) -> DomTree {
    let n = cfg.len();
    let rpo = cfg.reverse_postorder();
    let mut order = vec![usize::MAX; n];
    for (i, &b) in rpo.iter().enumerate() {
        order[b] = i;
    }

    let mut idom: Vec<Option<usize>> = vec![None; n];
    if n > 0 {
        idom[0] = Some(0);
    }
    let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
        while a != b {
            while order[a] > order[b] {
                a = idom[a].expect("processed block has an idom");
            }
            while order[b] > order[a] {
                b = idom[b].expect("processed block has an idom");
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for &b in rpo.iter().skip(1) {
            let mut new_idom = None;
            for &p in &cfg.preds[b] {
                if idom[p].is_none() {
                    continue;
                }
                new_idom = Some(match new_idom {
                    None => p,
                    Some(cur) => intersect(&idom, p, cur),
                });
            }
            if new_idom.is_some() && idom[b] != new_idom {
                idom[b] = new_idom;
                changed = true;
            }
        }
    }

    let mut children = vec![Vec::new(); n];
    for b in 0..n {
        if let Some(d) = idom[b] {
            if d != b {
                children[d].push(b);
            }
        }
    }
    let mut pre = vec![0; n];
    let mut post = vec![0; n];
    let mut dom_count = vec![1; n];
    if n > 0 {
        let mut clock = 0;
        let mut stack = vec![(0usize, 0usize)];
        pre[0] = clock;
        clock += 1;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(&c) = children[node].get(*next) {
                *next += 1;
                pre[c] = clock;
                clock += 1;
                stack.push((c, 0));
            } else {
                post[node] = clock;
                clock += 1;
                stack.pop();
                if let Some(&(parent, _)) = stack.last() {
                    dom_count[parent] += dom_count[node];
                }
            }
        }
    }
    DomTree {
        idom,
        dom_count,
        pre,
        post,
    }
}

/// One natural loop; loops sharing a header are merged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaturalLoop {
    pub header: usize,
    /// Sorted block indices, header included.
    pub blocks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopInfo {
    pub loop_depth: Vec<u32>,
    pub is_header: Vec<bool>,
    /// `(source, header)` pairs, sorted.
    pub backedges: Vec<(usize, usize)>,
    /// Blocks with a successor outside their innermost loop.
    pub exiting: Vec<bool>,
    pub loops: Vec<NaturalLoop>,
    innermost: Vec<Option<usize>>,
}

impl LoopInfo {
    pub fn is_backedge(&self, from: usize, to: usize) -> bool {
        self.backedges.binary_search(&(from, to)).is_ok()
    }

    /// Index into `loops` of the smallest loop containing `b`.
    pub fn innermost_loop(&self, b: usize) -> Option<usize> {
        self.innermost[b]
    }
}

pub fn compute_loops(f: &Function, dt: &DomTree) -> LoopInfo {
    loops_of(&Cfg::new(f), dt)
}

pub fn loops_of(cfg: &Cfg, dt: &DomTree) -> LoopInfo {
    let n = cfg.len();
    let mut backedges = Vec::new();
    for u in 0..n {
        if !dt.is_reachable(u) {
            continue;
        }
        for &h in &cfg.succs[u] {
            if dt.dominates(h, u) {
                backedges.push((u, h));
            }
        }
    }
    backedges.sort_unstable();
    backedges.dedup();

    let mut headers: Vec<usize> = backedges.iter().map(|&(_, h)| h).collect();
    headers.sort_unstable();
    headers.dedup();

    let mut loops = Vec::with_capacity(headers.len());
    for &h in &headers {
        let mut in_loop = vec![false; n];
        in_loop[h] = true;
        let mut work: Vec<usize> = backedges
            .iter()
            .filter(|&&(_, t)| t == h)
            .map(|&(u, _)| u)
            .collect();
        while let Some(b) = work.pop() {
            if in_loop[b] {
                continue;
            }
            in_loop[b] = true;
            work.extend(cfg.preds[b].iter().copied().filter(|&p| dt.is_reachable(p) && !in_loop[p]));
        }
        let blocks = (0..n).filter(|&b| in_loop[b]).collect();
        loops.push(NaturalLoop { header: h, blocks });
    }

    let mut loop_depth = vec![0u32; n];
    let mut innermost: Vec<Option<usize>> = vec![None; n];
    for (li, l) in loops.iter().enumerate() {
        for &b in &l.blocks {
            loop_depth[b] += 1;
            let smaller = match innermost[b] {
                None => true,
                Some(cur) => l.blocks.len() < loops[cur].blocks.len(),
            };
            if smaller {
                innermost[b] = Some(li);
            }
        }
    }

    let mut is_header = vec![false; n];
    for &h in &headers {
        is_header[h] = true;
    }

    let mut exiting = vec![false; n];
    for b in 0..n {
        if let Some(li) = innermost[b] {
            let body = &loops[li].blocks;
            exiting[b] = cfg.succs[b].iter().any(|s| body.binary_search(s).is_err());
        }
    }

    LoopInfo {
        loop_depth,
        is_header,
        backedges,
        exiting,
        loops,
        innermost,
    }
}
