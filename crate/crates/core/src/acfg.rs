//! Loop- and call-free abstract control-flow graphs.
//!
//! Every natural loop is replaced by two consecutive copies of its body
//! (innermost loops first), calls to defined functions are inlined with
//! fresh registers, recursion is expanded twice and then cut off, and calls
//! to `extern` functions become [`AbstractOp`] nodes whose memory behaviour
//! is chosen later during execution enumeration.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::ir::{Function, Op, Operand, Program, Register};

/// Call to an external function, summarised as a single memory access to
/// one of its pointer operands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractOp {
    pub func: String,
    pub operands: Vec<Operand>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeOp {
    Instr(Op),
    /// Entry into an inlined function: copies arguments into the callee's
    /// (renamed) parameter registers.
    Call {
        func: String,
        moves: Vec<(Register, Register)>,
    },
    Abstract(AbstractOp),
}

impl fmt::Display for NodeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeOp::Instr(op) => write!(f, "{op}"),
            NodeOp::Call { func, moves } => {
                let args: Vec<_> = moves.iter().map(|(_, a)| a.to_string()).collect();
                write!(f, "CALL {func}({})", args.join(", "))
            }
            NodeOp::Abstract(a) => {
                let args: Vec<_> = a.operands.iter().map(|o| o.to_string()).collect();
                write!(f, "EXTERN {}({})", a.func, args.join(", "))
            }
        }
    }
}

/// Where an A-CFG node came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Provenance {
    pub func: String,
    pub index: usize,
    /// Loop copy (1 or 2) for every enclosing loop, innermost first.
    pub copies: Vec<u8>,
    /// Call sites this node was inlined through, outermost first.
    pub context: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub op: NodeOp,
    /// Report name of the source instruction (its label or 1-based index,
    /// prefixed with the function name when inlined).
    pub name: String,
    pub prov: Provenance,
    /// Successors; `None` is the exit. Branches list the fall-through
    /// successor first and the jump target second.
    pub succs: Vec<Option<usize>>,
}

/// Acyclic control-flow graph of one thread. Node ids are a topological
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ACfg {
    pub thread: String,
    pub nodes: Vec<Node>,
    /// `None` when the thread has no instructions.
    pub entry: Option<usize>,
}

#[derive(Debug, Clone)]
struct Graph {
    nodes: Vec<Node>,
    entry: Option<usize>,
}

fn function_graph(f: &Function) -> Graph {
    let n = f.body.len();
    let nodes = f
        .body
        .iter()
        .enumerate()
        .map(|(i, ins)| Node {
            op: NodeOp::Instr(ins.op.clone()),
            name: f.display_name(i),
            prov: Provenance {
                func: f.name.clone(),
                index: i,
                copies: Vec::new(),
                context: Vec::new(),
            },
            succs: f
                .successors(i)
                .into_iter()
                .map(|s| (s < n).then_some(s))
                .collect(),
        })
        .collect();
    Graph {
        nodes,
        entry: (n > 0).then_some(0),
    }
}

fn reachable(g: &Graph) -> Vec<bool> {
    let mut seen = vec![false; g.nodes.len()];
    let mut stack: Vec<usize> = g.entry.into_iter().collect();
    while let Some(n) = stack.pop() {
        if std::mem::replace(&mut seen[n], true) {
            continue;
        }
        stack.extend(g.nodes[n].succs.iter().flatten());
    }
    seen
}

/// Dominator sets of reachable nodes.
fn dominators(g: &Graph, live: &[bool]) -> Vec<BTreeSet<usize>> {
    let n = g.nodes.len();
    let all: BTreeSet<usize> = (0..n).filter(|&i| live[i]).collect();
    let mut preds = vec![Vec::new(); n];
    for (i, node) in g.nodes.iter().enumerate() {
        if live[i] {
            for &s in node.succs.iter().flatten() {
                preds[s].push(i);
            }
        }
    }
    let mut dom: Vec<BTreeSet<usize>> = vec![all.clone(); n];
    if let Some(e) = g.entry {
        dom[e] = BTreeSet::from([e]);
    }
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..n {
            if !live[i] || Some(i) == g.entry {
                continue;
            }
            let mut acc: Option<BTreeSet<usize>> = None;
            for &p in &preds[i] {
                acc = Some(match acc {
                    None => dom[p].clone(),
                    Some(a) => a.intersection(&dom[p]).copied().collect(),
                });
            }
            let mut new = acc.unwrap_or_default();
            new.insert(i);
            if new != dom[i] {
                dom[i] = new;
                changed = true;
            }
        }
    }
    dom
}

/// Finds a cycle among `live` nodes using only edges accepted by `keep`.
fn find_cycle(g: &Graph, live: &[bool], keep: impl Fn(usize, usize) -> bool) -> Option<Vec<usize>> {
    let n = g.nodes.len();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; n];
    for root in 0..n {
        if !live[root] || state[root] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        state[root] = 1;
        while let Some(&mut (u, ref mut k)) = stack.last_mut() {
            let succs: Vec<usize> = g.nodes[u].succs.iter().flatten().copied().collect();
            if *k < succs.len() {
                let v = succs[*k];
                *k += 1;
                if !keep(u, v) || !live[v] {
                    continue;
                }
                match state[v] {
                    0 => {
                        state[v] = 1;
                        stack.push((v, 0));
                    }
                    1 => {
                        let start = stack.iter().position(|&(x, _)| x == v).unwrap();
                        return Some(stack[start..].iter().map(|&(x, _)| x).collect());
                    }
                    _ => {}
                }
            } else {
                state[u] = 2;
                stack.pop();
            }
        }
    }
    None
}

/// Natural loop of `header` given its back-edge sources.
fn loop_body(g: &Graph, header: usize, latches: &[usize], live: &[bool]) -> BTreeSet<usize> {
    let mut preds = vec![Vec::new(); g.nodes.len()];
    for (i, node) in g.nodes.iter().enumerate() {
        if live[i] {
            for &s in node.succs.iter().flatten() {
                preds[s].push(i);
            }
        }
    }
    let mut body = BTreeSet::from([header]);
    let mut stack: Vec<usize> = latches.to_vec();
    while let Some(n) = stack.pop() {
        if body.insert(n) {
            stack.extend(preds[n].iter().copied());
        }
    }
    body
}

/// Replaces every loop by two copies of its body, innermost loops first.
/// Back edges of the first copy enter the second copy; back edges of the
/// second copy leave the function.
fn summarize_loops_graph(mut g: Graph) -> Result<Graph> {
    loop {
        let live = reachable(&g);
        let dom = dominators(&g, &live);
        let mut back: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (u, node) in g.nodes.iter().enumerate() {
            if !live[u] {
                continue;
            }
            for &v in node.succs.iter().flatten() {
                if dom[u].contains(&v) {
                    back.entry(v).or_default().push(u);
                }
            }
        }
        if let Some(cycle) = find_cycle(&g, &live, |u, v| !dom[u].contains(&v)) {
            let func = g.nodes[cycle[0]].prov.func.clone();
            let labels = cycle.iter().map(|&i| g.nodes[i].name.clone()).collect();
            return Err(Error::Irreducible { func, labels });
        }
        if back.is_empty() {
            return Ok(g);
        }
        let loops: Vec<(usize, BTreeSet<usize>)> = back
            .iter()
            .map(|(&h, ls)| (h, loop_body(&g, h, ls, &live)))
            .collect();
        let (header, body) = loops
            .iter()
            .find(|(h, body)| loops.iter().all(|(h2, _)| h2 == h || !body.contains(h2)))
            .cloned()
            .expect("some loop is innermost");
        let latches = &back[&header];

        let mut copy2: BTreeMap<usize, usize> = BTreeMap::new();
        for &b in &body {
            copy2.insert(b, g.nodes.len() + copy2.len());
        }
        let mut new_nodes = Vec::new();
        for &b in &body {
            let mut node = g.nodes[b].clone();
            node.prov.copies.push(2);
            node.succs = node
                .succs
                .iter()
                .map(|s| match *s {
                    Some(t) if t == header && latches.contains(&b) => None,
                    Some(t) if body.contains(&t) => Some(copy2[&t]),
                    other => other,
                })
                .collect();
            new_nodes.push(node);
        }
        for &b in &body {
            let node = &mut g.nodes[b];
            node.prov.copies.push(1);
            if latches.contains(&b) {
                for s in node.succs.iter_mut() {
                    if *s == Some(header) {
                        *s = Some(copy2[&header]);
                    }
                }
            }
        }
        g.nodes.extend(new_nodes);
    }
}

/// Summarises the loops of every function. The result keeps each
/// function's graph in source order with copies appended.
pub fn summarize_loops(p: &Program) -> Result<BTreeMap<String, ACfg>> {
    let mut out = BTreeMap::new();
    for f in &p.functions {
        let g = summarize_loops_graph(function_graph(f))?;
        out.insert(
            f.name.clone(),
            ACfg {
                thread: f.name.clone(),
                nodes: g.nodes,
                entry: g.entry,
            },
        );
    }
    Ok(out)
}

struct Inliner<'a> {
    program: &'a Program,
    graphs: BTreeMap<String, Graph>,
    out: Vec<Node>,
    fresh: usize,
    root: String,
}

impl Inliner<'_> {
    /// Emits a copy of `func`'s graph whose exits continue at `cont`;
    /// returns the copy's entry.
    fn emit(
        &mut self,
        func: &str,
        context: &[(String, usize)],
        stack: &[String],
        rename: &dyn Fn(&Register) -> Register,
        cont: Option<usize>,
    ) -> Option<usize> {
        let g = self.graphs[func].clone();
        let live = reachable(&g);
        let mut map: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, node) in g.nodes.iter().enumerate() {
            if !live[i] {
                continue;
            }
            map.insert(i, self.out.len());
            let mut prov = node.prov.clone();
            prov.context = context.to_vec();
            let name = if func == self.root {
                node.name.clone()
            } else {
                format!("{func}:{}", node.name)
            };
            let op = match &node.op {
                NodeOp::Instr(op) => NodeOp::Instr(rename_op(op, rename)),
                other => other.clone(),
            };
            self.out.push(Node {
                op,
                name,
                prov,
                succs: Vec::new(),
            });
        }
        for (i, node) in g.nodes.iter().enumerate() {
            if !live[i] {
                continue;
            }
            let me = map[&i];
            let succs: Vec<Option<usize>> = node
                .succs
                .iter()
                .map(|s| s.map_or(cont, |t| Some(map[&t])))
                .collect();
            let NodeOp::Instr(Op::Call { func: callee, args }) = &node.op else {
                self.out[me].succs = succs;
                continue;
            };
            let renamed_args: Vec<Operand> =
                args.iter().map(|a| rename_operand(a, rename)).collect();
            let depth = stack.iter().filter(|s| *s == callee).count();
            match self.program.function(callee) {
                Some(cf) if depth < 2 => {
                    self.fresh += 1;
                    let k = self.fresh;
                    let callee_name = callee.clone();
                    let callee_rename =
                        move |r: &Register| Register(format!("{}@{callee_name}#{k}", r.0));
                    let moves = cf
                        .params
                        .iter()
                        .zip(&renamed_args)
                        .map(|(p, a)| match a {
                            Operand::Reg(r) => (callee_rename(p), r.clone()),
                            _ => unreachable!("validated register argument"),
                        })
                        .collect();
                    self.out[me].op = NodeOp::Call {
                        func: callee.clone(),
                        moves,
                    };
                    let mut ctx = context.to_vec();
                    ctx.push((func.to_string(), node.prov.index));
                    let mut st = stack.to_vec();
                    st.push(callee.clone());
                    let entry = self.emit(callee, &ctx, &st, &callee_rename, succs[0]);
                    self.out[me].succs = vec![entry];
                }
                _ => {
                    self.out[me].op = NodeOp::Abstract(AbstractOp {
                        func: callee.clone(),
                        operands: renamed_args,
                    });
                    self.out[me].succs = succs;
                }
            }
        }
        match g.entry {
            Some(e) => Some(map[&e]),
            None => cont,
        }
    }
}

fn rename_operand(o: &Operand, rename: &dyn Fn(&Register) -> Register) -> Operand {
    match o {
        Operand::Reg(r) => Operand::Reg(rename(r)),
        other => other.clone(),
    }
}

fn rename_op(op: &Op, rename: &dyn Fn(&Register) -> Register) -> Op {
    use crate::ir::{AddressExpr, Rvalue};
    let addr = |a: &AddressExpr| match a {
        AddressExpr::Direct(l) => AddressExpr::Direct(l.clone()),
        AddressExpr::Indexed { base, index } => AddressExpr::Indexed {
            base: base.clone(),
            index: index.iter().map(rename).collect(),
        },
        AddressExpr::Indirect(r) => AddressExpr::Indirect(rename(r)),
    };
    let rv = |v: &Rvalue| Rvalue {
        op: v.op.clone(),
        args: v.args.iter().map(|a| rename_operand(a, rename)).collect(),
    };
    match op {
        Op::Load { dst, addr: a } => Op::Load {
            dst: rename(dst),
            addr: addr(a),
        },
        Op::Store { addr: a, src } => Op::Store {
            addr: addr(a),
            src: rv(src),
        },
        Op::Alu { dst, value } => Op::Alu {
            dst: rename(dst),
            value: rv(value),
        },
        Op::BranchEqZero { cond, target } => Op::BranchEqZero {
            cond: rename(cond),
            target: target.clone(),
        },
        Op::Protect(r) => Op::Protect(rename(r)),
        Op::Call { func, args } => Op::Call {
            func: func.clone(),
            args: args.iter().map(|a| rename_operand(a, rename)).collect(),
        },
        other => other.clone(),
    }
}

/// Inlines every call reachable from `entry` into a single graph (not yet
/// renumbered).
fn inline_calls_from(p: &Program, entry: &str) -> Result<ACfg> {
    let mut graphs = BTreeMap::new();
    for f in &p.functions {
        graphs.insert(f.name.clone(), summarize_loops_graph(function_graph(f))?);
    }
    let mut inl = Inliner {
        program: p,
        graphs,
        out: Vec::new(),
        fresh: 0,
        root: entry.to_string(),
    };
    let id = |r: &Register| r.clone();
    let e = inl.emit(entry, &[], &[entry.to_string()], &id, None);
    Ok(ACfg {
        thread: entry.to_string(),
        nodes: inl.out,
        entry: e,
    })
}

/// Loop summarisation followed by inlining, for each entry point.
pub fn inline_calls(p: &Program) -> Result<Vec<ACfg>> {
    p.entries()
        .iter()
        .map(|f| inline_calls_from(p, &f.name))
        .collect()
}

/// Prunes unreachable nodes and renumbers the rest in topological order.
pub fn finish(g: ACfg) -> Result<ACfg> {
    let graph = Graph {
        nodes: g.nodes,
        entry: g.entry,
    };
    let live = reachable(&graph);
    let n = graph.nodes.len();
    let mut indeg = vec![0usize; n];
    for (i, node) in graph.nodes.iter().enumerate() {
        if live[i] {
            for &s in node.succs.iter().flatten() {
                indeg[s] += 1;
            }
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| live[i] && indeg[i] == 0).collect();
    let mut order = Vec::new();
    while let Some(u) = ready.pop_first() {
        order.push(u);
        for &s in graph.nodes[u].succs.iter().flatten() {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() != live.iter().filter(|&&l| l).count() {
        return Err(Error::ResidualCycle);
    }
    let mut new_id = vec![usize::MAX; n];
    for (k, &u) in order.iter().enumerate() {
        new_id[u] = k;
    }
    let nodes = order
        .iter()
        .map(|&u| {
            let mut node = graph.nodes[u].clone();
            node.succs = node.succs.iter().map(|s| s.map(|t| new_id[t])).collect();
            node
        })
        .collect();
    Ok(ACfg {
        thread: g.thread,
        nodes,
        entry: graph.entry.map(|e| new_id[e]),
    })
}

/// Full pipeline: one acyclic graph per entry point (thread).
pub fn build_acfg(p: &Program) -> Result<Vec<ACfg>> {
    inline_calls(p)?.into_iter().map(finish).collect()
}

impl ACfg {
    /// Number of entry-to-exit paths.
    pub fn path_count(&self) -> u128 {
        let mut count = vec![0u128; self.nodes.len()];
        for i in (0..self.nodes.len()).rev() {
            count[i] = self.nodes[i]
                .succs
                .iter()
                .map(|s| s.map_or(1, |t| count[t]))
                .fold(0u128, |a, b| a.saturating_add(b));
        }
        self.entry.map_or(1, |e| count[e])
    }

    pub fn is_branch(&self, n: usize) -> bool {
        matches!(self.nodes[n].op, NodeOp::Instr(Op::BranchEqZero { .. }))
    }

    /// Graphviz rendering.
    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digraph \"{}\" {{", self.thread);
        let _ = writeln!(s, "  node [shape=box, fontname=monospace];");
        let _ = writeln!(s, "  exit [shape=oval, label=\"exit\"];");
        for (i, n) in self.nodes.iter().enumerate() {
            let copies = if n.prov.copies.is_empty() {
                String::new()
            } else {
                let c: Vec<_> = n.prov.copies.iter().map(|c| c.to_string()).collect();
                format!(" [copy {}]", c.join("."))
            };
            let label = format!("{}: {}{}", n.name, n.op, copies).replace('"', "\\\"");
            let _ = writeln!(s, "  n{i} [label=\"{label}\"];");
        }
        if let Some(e) = self.entry {
            let _ = writeln!(s, "  entry [shape=oval];\n  entry -> n{e};");
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let branch = self.is_branch(i);
            for (k, t) in n.succs.iter().enumerate() {
                let target = t.map_or("exit".to_string(), |t| format!("n{t}"));
                let attr = match (branch, k) {
                    (true, 0) => " [label=\"nz\"]",
                    (true, _) => " [label=\"z\"]",
                    _ => "",
                };
                let _ = writeln!(s, "  n{i} -> {target}{attr};");
            }
        }
        s.push_str("}\n");
        s
    }
}

/// Breadth-first list of nodes reachable from `from` (inclusive).
pub fn reachable_from(g: &ACfg, from: usize) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut q = VecDeque::from([from]);
    while let Some(n) = q.pop_front() {
        if seen.insert(n) {
            q.extend(g.nodes[n].succs.iter().flatten());
        }
    }
    seen.into_iter().collect()
}
