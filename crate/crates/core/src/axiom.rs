//! Event structures: the events of one resolved control-flow path per
//! thread, their program order (committed events) and fetch order
//! (committed plus transient events), and the syntactic address, data and
//! control dependencies between them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use crate::acfg::{ACfg, NodeOp};
use crate::ir::{AddressExpr, FenceKind, Location, Op, Operand, Register, Rvalue};

pub type EventId = usize;

/// Which speculation primitives open transient windows, and how deep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecConfig {
    pub d_spec: usize,
    /// Conditional-branch misprediction.
    pub branch: bool,
    /// Store-to-load forwarding bypass: a load reads a stale value of its
    /// own location.
    pub stl: bool,
    /// Alias prediction: a load is forwarded from a store to a different
    /// location.
    pub psf: bool,
}

impl SpecConfig {
    pub fn none() -> Self {
        SpecConfig {
            d_spec: 0,
            branch: false,
            stl: false,
            psf: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Top,
    Read,
    Write,
    Branch,
    Fence(FenceKindOrd),
    /// Extern call summarised as one load or store.
    Abstract,
    Bottom,
    SpecBottom,
}

/// [`FenceKind`] with an ordering, for use in sortable keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FenceKindOrd {
    Full,
    LFence,
}

impl From<FenceKind> for FenceKindOrd {
    fn from(k: FenceKind) -> Self {
        match k {
            FenceKind::Full => FenceKindOrd::Full,
            FenceKind::LFence => FenceKindOrd::LFence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub id: EventId,
    pub kind: EventKind,
    pub thread: usize,
    /// A-CFG node the event was fetched from.
    pub node: Option<usize>,
    pub name: String,
    pub transient: bool,
    /// Position in the thread's fetch order, counting every fetched
    /// instruction (including ones that produce no event).
    pub fetch: usize,
    pub addr: Option<AddressExpr>,
    /// Resolved location of a Read or Write.
    pub loc: Option<Location>,
    /// Stored value of a Write.
    pub value: Option<Rvalue>,
    /// Possible locations of an Abstract event.
    pub targets: Vec<Location>,
    /// For transient events: the event that opened the window.
    pub trigger: Option<EventId>,
}

impl Event {
    pub fn is_memory(&self) -> bool {
        matches!(
            self.kind,
            EventKind::Read | EventKind::Write | EventKind::Abstract
        )
    }
}

/// A dependency edge `from -> to` (from is always a Read).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Dep {
    pub from: EventId,
    pub to: EventId,
    /// Address dependency through a base-plus-index address.
    pub gep: bool,
    /// The value passed through a masking (`and`) operation.
    pub masked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    Stl,
    Psf,
}

/// The load-side speculation primitive a structure was built around.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub read: EventId,
    /// Stores the read may bypass (same location for STL, other locations
    /// for PSF), all committed and after the last fence.
    pub stores: Vec<EventId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowEnd {
    Depth,
    Branch,
    Fence,
    Exit,
}

/// A transient window: fetched nodes in order and the reason it stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub thread: usize,
    pub trigger: EventId,
    pub nodes: Vec<usize>,
    pub events: Vec<EventId>,
    pub end: WindowEnd,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStructure {
    pub events: Vec<Event>,
    /// Events of each thread (⊤ excluded) in fetch order.
    pub threads: Vec<Vec<EventId>>,
    /// Committed A-CFG node path of each thread.
    pub paths: Vec<Vec<usize>>,
    pub addr: Vec<Dep>,
    pub data: Vec<Dep>,
    pub ctrl: Vec<Dep>,
    pub primitive: Option<Primitive>,
    pub windows: Vec<Window>,
    /// Declared may-alias location pairs.
    pub aliases: Vec<(Location, Location)>,
}

type ShapeKey = (
    Vec<(usize, Option<usize>, bool, EventKind)>,
    Vec<Vec<usize>>,
);

pub const TOP: EventId = 0;

impl EventStructure {
    /// Committed events of thread `t` in program order (⊤ excluded).
    pub fn po(&self, t: usize) -> impl Iterator<Item = EventId> + '_ {
        self.threads[t]
            .iter()
            .copied()
            .filter(|&e| !self.events[e].transient)
    }

    /// Program-order pairs, including ⊤ before everything.
    pub fn po_pairs(&self) -> Vec<(EventId, EventId)> {
        let mut out = Vec::new();
        for t in 0..self.threads.len() {
            let po: Vec<_> = self.po(t).collect();
            for (i, &a) in po.iter().enumerate() {
                out.push((TOP, a));
                for &b in &po[i + 1..] {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Fetch-order pairs, including ⊤ before everything.
    pub fn tfo_pairs(&self) -> Vec<(EventId, EventId)> {
        let mut out = Vec::new();
        for th in &self.threads {
            for (i, &a) in th.iter().enumerate() {
                out.push((TOP, a));
                for &b in &th[i + 1..] {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Index of each event within its thread's fetch order (⊤ is 0 and
    /// thread events start at 1).
    pub fn tfo_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.events.len()];
        for th in &self.threads {
            for (i, &e) in th.iter().enumerate() {
                idx[e] = i + 1;
            }
        }
        idx
    }

    pub fn memory_events(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.is_memory())
    }

    pub fn bottom(&self, t: usize) -> EventId {
        *self.threads[t].last().expect("every thread ends with ⊥")
    }

    /// Whether two locations may denote the same address.
    pub fn may_alias(&self, a: &Location, b: &Location) -> bool {
        a == b
            || self
                .aliases
                .iter()
                .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    /// A key identifying the structure's shape, for de-duplication.
    fn key(&self) -> ShapeKey {
        let mut k: Vec<_> = self
            .events
            .iter()
            .map(|e| (e.thread, e.node, e.transient, e.kind))
            .collect();
        if let Some(p) = &self.primitive {
            k.push((
                usize::MAX,
                Some(p.read),
                p.kind == PrimitiveKind::Psf,
                EventKind::Top,
            ));
        }
        (k, self.paths.clone())
    }
}

impl fmt::Display for EventStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (t, th) in self.threads.iter().enumerate() {
            let names: Vec<_> = th.iter().map(|&e| self.events[e].name.as_str()).collect();
            writeln!(f, "thread {t}: {}", names.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Src {
    ev: EventId,
    protected: bool,
    masked: bool,
}

#[derive(Debug, Clone, Default)]
struct Val {
    srcs: BTreeSet<Src>,
    pointee: Option<Location>,
    origin: Option<String>,
}

#[derive(Debug, Clone)]
struct Region {
    srcs: Vec<Src>,
    end: Option<usize>,
}

#[derive(Clone)]
struct State {
    regs: BTreeMap<Register, Val>,
    regions: Vec<Region>,
}

/// Immediate post-dominator of every node (`None` = exit).
pub fn ipdoms(g: &ACfg) -> Vec<Option<usize>> {
    let n = g.nodes.len();
    let exit = n;
    let mut ip = vec![exit; n + 1];
    let walk = |ip: &Vec<usize>, mut a: usize, mut b: usize| {
        while a != b {
            if a < b {
                a = ip[a];
            } else {
                b = ip[b];
            }
        }
        a
    };
    for i in (0..n).rev() {
        let mut acc: Option<usize> = None;
        for s in &g.nodes[i].succs {
            let s = s.unwrap_or(exit);
            acc = Some(match acc {
                None => s,
                Some(a) => walk(&ip, a, s),
            });
        }
        ip[i] = acc.unwrap_or(exit);
    }
    ip[..n].iter().map(|&x| (x != exit).then_some(x)).collect()
}

/// All entry-to-exit node paths.
pub fn paths(g: &ACfg) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let Some(entry) = g.entry else {
        return vec![Vec::new()];
    };
    let mut stack: Vec<(usize, Vec<usize>)> = vec![(entry, Vec::new())];
    while let Some((n, mut prefix)) = stack.pop() {
        prefix.push(n);
        let succs = &g.nodes[n].succs;
        let mut uniq: Vec<Option<usize>> = Vec::new();
        for s in succs {
            if !uniq.contains(s) {
                uniq.push(*s);
            }
        }
        for s in uniq.iter().rev() {
            match s {
                None => out.push(prefix.clone()),
                Some(t) => stack.push((*t, prefix.clone())),
            }
        }
    }
    out
}

struct Builder<'a> {
    g: &'a ACfg,
    ipdom: &'a [Option<usize>],
    cfg: &'a SpecConfig,
    thread: usize,
    s: &'a mut EventStructure,
    fetch: usize,
    /// Directions taken at branches met inside branch windows (false =
    /// fall through), consumed in fetch order.
    choices: &'a [bool],
    used: usize,
    /// A window met a nested branch with no direction left to take.
    starved: bool,
}

enum Emitted {
    None,
    Event(EventId),
}

impl Builder<'_> {
    fn new_event(&mut self, kind: EventKind, node: Option<usize>, transient: bool) -> EventId {
        let id = self.s.events.len();
        let name = match (kind, node) {
            (EventKind::Bottom, _) => "⊥".to_string(),
            (EventKind::SpecBottom, _) => "⊥_S".to_string(),
            (_, Some(n)) if transient => format!("{}_S", self.g.nodes[n].name),
            (_, Some(n)) => self.g.nodes[n].name.clone(),
            _ => "?".to_string(),
        };
        self.s.events.push(Event {
            id,
            kind,
            thread: self.thread,
            node,
            name,
            transient,
            fetch: self.fetch,
            addr: None,
            loc: None,
            value: None,
            targets: Vec::new(),
            trigger: None,
        });
        self.s.threads[self.thread].push(id);
        id
    }

    fn resolve(st: &State, addr: &AddressExpr) -> Location {
        match addr {
            AddressExpr::Direct(l) | AddressExpr::Indexed { base: l, .. } => l.clone(),
            AddressExpr::Indirect(r) => Self::pointee(st, r),
        }
    }

    fn pointee(st: &State, r: &Register) -> Location {
        match st.regs.get(r) {
            Some(Val {
                pointee: Some(l), ..
            }) => l.clone(),
            Some(Val {
                origin: Some(o), ..
            }) => Location(format!("*{o}")),
            _ => Location(format!("*{r}")),
        }
    }

    fn add_deps(
        &mut self,
        st: &State,
        regs: &[&Register],
        to: EventId,
        transient: bool,
        gep: bool,
        data: bool,
    ) {
        for r in regs {
            let Some(v) = st.regs.get(*r) else { continue };
            for s in &v.srcs {
                if s.protected && transient {
                    continue;
                }
                let d = Dep {
                    from: s.ev,
                    to,
                    gep,
                    masked: s.masked,
                };
                if data {
                    self.s.data.push(d);
                } else {
                    self.s.addr.push(d);
                }
            }
        }
    }

    fn add_ctrl(&mut self, st: &State, to: EventId, transient: bool) {
        for region in &st.regions {
            for s in &region.srcs {
                if s.protected && transient {
                    continue;
                }
                self.s.ctrl.push(Dep {
                    from: s.ev,
                    to,
                    gep: false,
                    masked: s.masked,
                });
            }
        }
    }

    fn rvalue(st: &State, v: &Rvalue) -> Val {
        let mut out = Val::default();
        let masked = v.op.as_deref() == Some("and");
        let mut pointees = Vec::new();
        for a in &v.args {
            match a {
                Operand::Reg(r) => {
                    if let Some(val) = st.regs.get(r) {
                        out.srcs.extend(val.srcs.iter().map(|s| Src {
                            masked: s.masked || masked,
                            ..*s
                        }));
                        if let Some(p) = &val.pointee {
                            pointees.push(p.clone());
                        }
                        if out.origin.is_none() {
                            out.origin = val.origin.clone();
                        }
                    }
                }
                Operand::AddrOf(l) => pointees.push(l.clone()),
                Operand::Imm(_) => {}
            }
        }
        if pointees.len() == 1 {
            out.pointee = pointees.pop();
        }
        out
    }

    /// Fetches one node: emits its event (if any) and updates the register
    /// state.
    fn fetch_node(&mut self, st: &mut State, n: usize, transient: bool) -> Emitted {
        st.regions.retain(|r| r.end != Some(n));
        let node = &self.g.nodes[n];
        let out = match &node.op {
            NodeOp::Instr(Op::Load { dst, addr }) => {
                let e = self.new_event(EventKind::Read, Some(n), transient);
                let loc = Self::resolve(st, addr);
                self.s.events[e].addr = Some(addr.clone());
                self.s.events[e].loc = Some(loc.clone());
                let gep = matches!(addr, AddressExpr::Indexed { .. });
                self.add_deps(st, &addr.registers(), e, transient, gep, false);
                self.add_ctrl(st, e, transient);
                st.regs.insert(
                    dst.clone(),
                    Val {
                        srcs: BTreeSet::from([Src {
                            ev: e,
                            protected: false,
                            masked: false,
                        }]),
                        pointee: None,
                        origin: Some(loc.0),
                    },
                );
                Emitted::Event(e)
            }
            NodeOp::Instr(Op::Store { addr, src }) => {
                let e = self.new_event(EventKind::Write, Some(n), transient);
                self.s.events[e].addr = Some(addr.clone());
                self.s.events[e].loc = Some(Self::resolve(st, addr));
                self.s.events[e].value = Some(src.clone());
                let gep = matches!(addr, AddressExpr::Indexed { .. });
                self.add_deps(st, &addr.registers(), e, transient, gep, false);
                let srcs: Vec<&Register> = src.registers().collect();
                self.add_deps(st, &srcs, e, transient, false, true);
                self.add_ctrl(st, e, transient);
                Emitted::Event(e)
            }
            NodeOp::Instr(Op::Alu { dst, value }) => {
                let v = Self::rvalue(st, value);
                st.regs.insert(dst.clone(), v);
                Emitted::None
            }
            NodeOp::Instr(Op::BranchEqZero { .. }) => {
                let e = self.new_event(EventKind::Branch, Some(n), transient);
                Emitted::Event(e)
            }
            NodeOp::Instr(Op::Fence(k)) => {
                let e = self.new_event(EventKind::Fence((*k).into()), Some(n), transient);
                Emitted::Event(e)
            }
            NodeOp::Instr(Op::Protect(r)) => {
                if let Some(v) = st.regs.get_mut(r) {
                    v.srcs = v
                        .srcs
                        .iter()
                        .map(|s| Src {
                            protected: true,
                            ..*s
                        })
                        .collect();
                }
                Emitted::None
            }
            NodeOp::Instr(Op::Jump { .. }) | NodeOp::Instr(Op::Skip) => Emitted::None,
            NodeOp::Instr(Op::Call { .. }) => Emitted::None,
            NodeOp::Call { moves, .. } => {
                let vals: Vec<(Register, Val)> = moves
                    .iter()
                    .map(|(d, s)| (d.clone(), st.regs.get(s).cloned().unwrap_or_default()))
                    .collect();
                st.regs.extend(vals);
                Emitted::None
            }
            NodeOp::Abstract(a) => {
                let e = self.new_event(EventKind::Abstract, Some(n), transient);
                let mut targets = Vec::new();
                let mut regs = Vec::new();
                for o in &a.operands {
                    match o {
                        Operand::AddrOf(l) => targets.push(l.clone()),
                        Operand::Reg(r) => {
                            targets.push(Self::pointee(st, r));
                            regs.push(r);
                        }
                        Operand::Imm(_) => {}
                    }
                }
                targets.sort();
                targets.dedup();
                self.s.events[e].targets = targets;
                self.add_deps(st, &regs, e, transient, false, false);
                self.add_ctrl(st, e, transient);
                Emitted::Event(e)
            }
        };
        self.fetch += 1;
        out
    }

    fn branch_region(&self, st: &State, n: usize) -> Region {
        let srcs = match &self.g.nodes[n].op {
            NodeOp::Instr(Op::BranchEqZero { cond, .. }) => st
                .regs
                .get(cond)
                .map(|v| v.srcs.iter().copied().collect())
                .unwrap_or_default(),
            _ => Vec::new(),
        };
        Region {
            srcs,
            end: self.ipdom[n],
        }
    }

    /// Mispredicted-path window starting at `start`.
    fn branch_window(&mut self, st: &State, trigger: EventId, start: Option<usize>) {
        let mut st = st.clone();
        let mut cur = start;
        let mut budget = self.cfg.d_spec;
        let mut w = Window {
            thread: self.thread,
            trigger,
            nodes: Vec::new(),
            events: Vec::new(),
            end: WindowEnd::Depth,
        };
        loop {
            if budget == 0 {
                w.end = WindowEnd::Depth;
                break;
            }
            let Some(n) = cur else {
                let e = self.new_event(EventKind::SpecBottom, None, true);
                self.s.events[e].trigger = Some(trigger);
                w.events.push(e);
                w.end = WindowEnd::Exit;
                break;
            };
            match &self.g.nodes[n].op {
                NodeOp::Instr(Op::BranchEqZero { .. }) if self.used == self.choices.len() => {
                    self.starved = true;
                    w.end = WindowEnd::Branch;
                    break;
                }
                NodeOp::Instr(Op::Fence(_)) => {
                    w.end = WindowEnd::Fence;
                    break;
                }
                _ => {}
            }
            w.nodes.push(n);
            if let Emitted::Event(e) = self.fetch_node(&mut st, n, true) {
                self.s.events[e].trigger = Some(trigger);
                w.events.push(e);
            }
            budget -= 1;
            let mut dir = 0;
            if self.g.is_branch(n) {
                let region = self.branch_region(&st, n);
                st.regions.push(region);
                dir = usize::from(self.choices[self.used]);
                self.used += 1;
            }
            cur = self.g.nodes[n].succs[dir];
        }
        self.s.windows.push(w);
    }

    /// Walks a committed path. With `cut = Some(k)`, the node at path
    /// position `k` and everything after it (up to the depth bound) are
    /// fetched transiently and nothing after the window is committed.
    fn walk(
        &mut self,
        path: &[usize],
        cut: Option<usize>,
        entry_regs: BTreeMap<Register, Val>,
    ) -> Option<EventId> {
        let mut st = State {
            regs: entry_regs,
            regions: Vec::new(),
        };
        let mut cut_event = None;
        for (k, &n) in path.iter().enumerate() {
            if Some(k) == cut {
                cut_event = self.suffix_window(&mut st, &path[k..]);
                break;
            }
            let emitted = self.fetch_node(&mut st, n, false);
            if let (Emitted::Event(e), true) = (emitted, self.g.is_branch(n)) {
                let next = path.get(k + 1).copied();
                let region = self.branch_region(&st, n);
                st.regions.push(region);
                if self.cfg.branch && self.cfg.d_spec > 0 {
                    let succs = &self.g.nodes[n].succs;
                    let other = succs.iter().find(|s| **s != next).copied();
                    if let Some(other) = other {
                        self.branch_window(&st, e, other);
                    }
                }
            }
        }
        self.new_event(EventKind::Bottom, None, false);
        cut_event
    }

    /// Transient suffix along the committed path, opened by a load-side
    /// primitive at `nodes[0]`.
    fn suffix_window(&mut self, st: &mut State, nodes: &[usize]) -> Option<EventId> {
        let mut budget = self.cfg.d_spec;
        let mut trigger = None;
        let mut w = Window {
            thread: self.thread,
            trigger: 0,
            nodes: Vec::new(),
            events: Vec::new(),
            end: WindowEnd::Exit,
        };
        for &n in nodes {
            if budget == 0 {
                w.end = WindowEnd::Depth;
                break;
            }
            if matches!(self.g.nodes[n].op, NodeOp::Instr(Op::Fence(_))) {
                w.end = WindowEnd::Fence;
                break;
            }
            w.nodes.push(n);
            let emitted = self.fetch_node(st, n, true);
            if let Emitted::Event(e) = emitted {
                let t = *trigger.get_or_insert(e);
                self.s.events[e].trigger = Some(t);
                w.events.push(e);
                if self.g.is_branch(n) {
                    let region = self.branch_region(st, n);
                    st.regions.push(region);
                }
            }
            budget -= 1;
        }
        if let Some(t) = trigger {
            w.trigger = t;
            self.s.windows.push(w);
        }
        trigger
    }
}

fn empty_structure(threads: usize, aliases: &[(Location, Location)]) -> EventStructure {
    EventStructure {
        events: vec![Event {
            id: TOP,
            kind: EventKind::Top,
            thread: usize::MAX,
            node: None,
            name: "⊤".into(),
            transient: false,
            fetch: 0,
            addr: None,
            loc: None,
            value: None,
            targets: Vec::new(),
            trigger: None,
        }],
        threads: vec![Vec::new(); threads],
        paths: vec![Vec::new(); threads],
        addr: Vec::new(),
        data: Vec::new(),
        ctrl: Vec::new(),
        primitive: None,
        windows: Vec::new(),
        aliases: aliases.to_vec(),
    }
}

fn entry_regs(g: &ACfg) -> BTreeMap<Register, Val> {
    let mut regs = BTreeMap::new();
    for n in &g.nodes {
        if !n.prov.context.is_empty() {
            continue;
        }
        if let NodeOp::Instr(op) = &n.op {
            for r in op.uses() {
                regs.entry(r.clone()).or_insert_with(|| Val {
                    srcs: BTreeSet::new(),
                    pointee: None,
                    origin: Some(r.0.clone()),
                });
            }
        }
    }
    regs
}

/// Most branches followed inside the windows of one structure; windows
/// meeting further branches stop there.
pub const MAX_NESTED_BRANCHES: usize = 8;

fn build_with(
    graphs: &[ACfg],
    ipdoms: &[Vec<Option<usize>>],
    combo: &[&Vec<usize>],
    cfg: &SpecConfig,
    aliases: &[(Location, Location)],
    cut: Option<(usize, usize)>,
    choices: &[bool],
) -> (EventStructure, Option<EventId>, bool) {
    let mut s = empty_structure(graphs.len(), aliases);
    let mut cut_event = None;
    let mut used = 0;
    let mut starved = false;
    for (t, g) in graphs.iter().enumerate() {
        s.paths[t] = combo[t].clone();
        let mut b = Builder {
            g,
            ipdom: &ipdoms[t],
            cfg,
            thread: t,
            s: &mut s,
            fetch: 1,
            choices,
            used,
            starved: false,
        };
        let c = cut.filter(|(ct, _)| *ct == t).map(|(_, k)| k);
        let e = b.walk(combo[t], c, entry_regs(g));
        used = b.used;
        starved |= b.starved;
        if let Some(k) = c {
            cut_event = e;
            s.paths[t].truncate(k);
        }
    }
    (s, cut_event, starved)
}

/// Every structure for one path combination, one per sequence of
/// directions taken at branches nested in windows.
fn build(
    graphs: &[ACfg],
    ipdoms: &[Vec<Option<usize>>],
    combo: &[&Vec<usize>],
    cfg: &SpecConfig,
    aliases: &[(Location, Location)],
    cut: Option<(usize, usize)>,
) -> Vec<(EventStructure, Option<EventId>)> {
    let mut out = Vec::new();
    let mut stack = vec![Vec::new()];
    while let Some(choices) = stack.pop() {
        let (s, e, starved) = build_with(graphs, ipdoms, combo, cfg, aliases, cut, &choices);
        if starved && choices.len() < MAX_NESTED_BRANCHES {
            for dir in [true, false] {
                let mut c = choices.clone();
                c.push(dir);
                stack.push(c);
            }
        } else {
            out.push((s, e));
        }
    }
    out
}

/// Committed Reads of a base structure that can act as load-side
/// primitives, with the stores each may bypass.
fn primitive_sites(s: &EventStructure, kind: PrimitiveKind) -> Vec<(usize, EventId, Vec<EventId>)> {
    let mut out = Vec::new();
    for t in 0..s.threads.len() {
        let po: Vec<EventId> = s.po(t).collect();
        for (i, &r) in po.iter().enumerate() {
            let ev = &s.events[r];
            if ev.kind != EventKind::Read {
                continue;
            }
            let rloc = ev.loc.as_ref().unwrap();
            let mut stores = Vec::new();
            for &w in po[..i].iter().rev() {
                let we = &s.events[w];
                match we.kind {
                    EventKind::Fence(_) => break,
                    EventKind::Write => {
                        let wloc = we.loc.as_ref().unwrap();
                        let same = s.may_alias(wloc, rloc);
                        if (kind == PrimitiveKind::Stl) == same {
                            stores.push(w);
                        }
                    }
                    _ => {}
                }
            }
            if !stores.is_empty() {
                stores.reverse();
                out.push((t, r, stores));
            }
        }
    }
    out
}

/// Enumerates the event structures of a set of per-thread graphs: one per
/// combination of committed paths (with branch windows when enabled), plus
/// one per load-side primitive site when store forwarding or alias
/// prediction is enabled.
pub fn enumerate_event_structures(
    graphs: &[ACfg],
    aliases: &[(Location, Location)],
    cfg: &SpecConfig,
) -> Vec<EventStructure> {
    let ipdoms: Vec<_> = graphs.iter().map(ipdoms).collect();
    let thread_paths: Vec<Vec<Vec<usize>>> = graphs.iter().map(paths).collect();
    let mut combos: Vec<Vec<&Vec<usize>>> = vec![Vec::new()];
    for tp in &thread_paths {
        let mut next = Vec::new();
        for c in &combos {
            for p in tp {
                let mut c2 = c.clone();
                c2.push(p);
                next.push(c2);
            }
        }
        combos = next;
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for combo in &combos {
        let base: Vec<EventStructure> = build(graphs, &ipdoms, combo, cfg, aliases, None)
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        let mut extra = Vec::new();
        let kinds = [(cfg.stl, PrimitiveKind::Stl), (cfg.psf, PrimitiveKind::Psf)];
        if cfg.d_spec > 0 {
            for (on, kind) in kinds {
                if !on {
                    continue;
                }
                let plain = build_with(
                    graphs,
                    &ipdoms,
                    combo,
                    &SpecConfig {
                        branch: false,
                        ..*cfg
                    },
                    aliases,
                    None,
                    &[],
                )
                .0;
                for (t, r, _) in primitive_sites(&plain, kind) {
                    let node = plain.events[r].node.unwrap();
                    let k = combo[t].iter().position(|&n| n == node).unwrap();
                    for (mut s, read) in build(graphs, &ipdoms, combo, cfg, aliases, Some((t, k))) {
                        let read = read.expect("primitive read is fetched");
                        // Stores the read may bypass, recomputed in this structure.
                        let po: Vec<EventId> = s.po(t).collect();
                        let rloc = s.events[read].loc.clone().unwrap();
                        let mut stores = Vec::new();
                        for &w in po.iter().rev() {
                            let we = &s.events[w];
                            match we.kind {
                                EventKind::Fence(_) => break,
                                EventKind::Write => {
                                    let same = s.may_alias(we.loc.as_ref().unwrap(), &rloc);
                                    if (kind == PrimitiveKind::Stl) == same {
                                        stores.push(w);
                                    }
                                }
                                _ => {}
                            }
                        }
                        stores.reverse();
                        s.primitive = Some(Primitive { kind, read, stores });
                        extra.push(s);
                    }
                }
            }
        }
        for s in base.into_iter().chain(extra) {
            if seen.insert(s.key()) {
                out.push(s);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acfg::build_acfg;
    use crate::ir::parse;

    const BOUNDS_CHECK: &str = "\
R size -> r1
R y -> r2
r3 <- lt r2, r1
BEQZ r3, 8
R A+r2 -> r4
R B+r4 -> r5
W tmp <- r5
8: skip
";

    fn structures(src: &str, cfg: SpecConfig) -> Vec<EventStructure> {
        let p = parse(src).unwrap();
        let g = build_acfg(&p).unwrap();
        enumerate_event_structures(&g, &p.aliases, &cfg)
    }

    fn memory_names(s: &EventStructure) -> Vec<String> {
        s.memory_events().map(|e| e.name.clone()).collect()
    }

    fn dep_names(s: &EventStructure, deps: &[Dep]) -> BTreeSet<(String, String)> {
        deps.iter()
            .map(|d| (s.events[d.from].name.clone(), s.events[d.to].name.clone()))
            .collect()
    }

    #[test]
    fn classical_structures_without_speculation() {
        let ss = structures(BOUNDS_CHECK, SpecConfig::none());
        let mut names: Vec<_> = ss.iter().map(memory_names).collect();
        names.sort();
        assert_eq!(names, vec![vec!["1", "2"], vec!["1", "2", "5", "6", "7"]]);
        assert!(ss.iter().all(|s| s.events.iter().all(|e| !e.transient)));
    }

    #[test]
    fn branch_windows_match_speculative_shape() {
        let cfg = SpecConfig {
            d_spec: 2,
            branch: true,
            stl: false,
            psf: false,
        };
        let ss = structures(BOUNDS_CHECK, cfg);
        assert_eq!(ss.len(), 2);
        let taken = ss.iter().find(|s| memory_names(s).len() == 5).unwrap();
        let names: Vec<_> = taken.threads[0]
            .iter()
            .map(|&e| taken.events[e].name.clone())
            .collect();
        assert_eq!(names, ["1", "2", "4", "⊥_S", "5", "6", "7", "⊥"]);
        let skipped = ss.iter().find(|s| s.po(0).count() < 7).unwrap();
        let names: Vec<_> = skipped.threads[0]
            .iter()
            .map(|&e| skipped.events[e].name.clone())
            .collect();
        assert_eq!(names, ["1", "2", "4", "5_S", "6_S", "⊥"]);
    }

    #[test]
    fn dependencies_of_the_committed_body() {
        let ss = structures(BOUNDS_CHECK, SpecConfig::none());
        let s = ss.iter().find(|s| memory_names(s).len() == 5).unwrap();
        let addr = dep_names(s, &s.addr);
        assert_eq!(
            addr,
            BTreeSet::from([("2".into(), "5".into()), ("5".into(), "6".into())])
        );
        assert!(s.addr.iter().all(|d| d.gep));
        assert_eq!(
            dep_names(s, &s.data),
            BTreeSet::from([("6".into(), "7".into())])
        );
        let ctrl = dep_names(s, &s.ctrl);
        let mut expect = BTreeSet::new();
        for a in ["1", "2"] {
            for b in ["5", "6", "7"] {
                expect.insert((a.to_string(), b.to_string()));
            }
        }
        assert_eq!(ctrl, expect);
    }

    #[test]
    fn straight_line_single_structure() {
        let cfg = SpecConfig {
            d_spec: 10,
            branch: true,
            stl: false,
            psf: false,
        };
        let ss = structures("R x -> r1\nR y -> r2\n", cfg);
        assert_eq!(ss.len(), 1);
        assert!(ss[0].events.iter().all(|e| !e.transient));
    }

    #[test]
    fn memory_round_trip_breaks_direct_addr() {
        let ss = structures(
            "R x -> r1\nW y <- r1\nR y -> r2\nR A+r2 -> r3\n",
            SpecConfig::none(),
        );
        let s = &ss[0];
        assert_eq!(
            dep_names(s, &s.addr),
            BTreeSet::from([("3".into(), "4".into())])
        );
        assert_eq!(
            dep_names(s, &s.data),
            BTreeSet::from([("1".into(), "2".into())])
        );
    }

    #[test]
    fn sequential_branches_give_power_of_two_structures() {
        let src = "R x -> r1\nBEQZ r1, A\nR y -> r2\nA: BEQZ r1, B\nR z -> r3\nB: skip\nBEQZ r1, C\nskip\nC: skip\n";
        assert_eq!(structures(src, SpecConfig::none()).len(), 8);
    }

    #[test]
    fn windows_fork_at_nested_branches() {
        let src = "R x -> r1\nBEQZ r1, E\nBEQZ r1, E\nR y -> r2\nE: skip\n";
        let cfg = SpecConfig {
            d_spec: 5,
            branch: true,
            stl: false,
            psf: false,
        };
        let all = structures(src, cfg);
        assert_eq!(all.len(), 4);
        let transient: BTreeSet<Vec<String>> = all
            .iter()
            .map(|s| {
                s.events
                    .iter()
                    .filter(|e| e.transient)
                    .map(|e| e.name.clone())
                    .collect()
            })
            .collect();
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(transient.contains(&names(&["3_S", "4_S", "⊥_S"])));
        assert!(transient.contains(&names(&["3_S", "⊥_S"])));
        assert!(all
            .iter()
            .all(|s| s.windows.iter().all(|w| w.end != WindowEnd::Branch)));
    }

    #[test]
    fn store_forwarding_window() {
        let src =
            "R size -> r1\nR y -> r2\nW y <- and r2, r1\nR y -> r3\nR A+r3 -> r4\nR B+r4 -> r5\n";
        let cfg = SpecConfig {
            d_spec: 250,
            branch: false,
            stl: true,
            psf: false,
        };
        let ss = structures(src, cfg);
        assert_eq!(ss.len(), 2);
        let s = ss.iter().find(|s| s.primitive.is_some()).unwrap();
        let names: Vec<_> = s.threads[0]
            .iter()
            .map(|&e| s.events[e].name.clone())
            .collect();
        assert_eq!(names, ["1", "2", "3", "4_S", "5_S", "6_S", "⊥"]);
        let p = s.primitive.as_ref().unwrap();
        assert_eq!(s.events[p.read].name, "4_S");
        assert_eq!(p.stores.len(), 1);
    }

    #[test]
    fn fence_blocks_forwarding_site() {
        let src = "W y <- 1\nLFENCE\nR y -> r3\n";
        let cfg = SpecConfig {
            d_spec: 250,
            branch: false,
            stl: true,
            psf: true,
        };
        let ss = structures(src, cfg);
        assert_eq!(ss.len(), 1);
    }

    #[test]
    fn lfence_truncates_branch_window() {
        let src = "R y -> r2\nBEQZ r2, E\nLFENCE\nR A+r2 -> r4\nE: skip\n";
        let cfg = SpecConfig {
            d_spec: 10,
            branch: true,
            stl: false,
            psf: false,
        };
        let ss = structures(src, cfg);
        for s in &ss {
            assert!(s.memory_events().all(|e| !e.transient));
        }
    }

    #[test]
    fn protect_hides_value_from_transient_consumers() {
        let src = "R y -> r2\nPROTECT r2\nBEQZ r2, E\nR A+r2 -> r4\nE: skip\n";
        let cfg = SpecConfig {
            d_spec: 10,
            branch: true,
            stl: false,
            psf: false,
        };
        let ss = structures(src, cfg);
        for s in &ss {
            for d in &s.addr {
                assert!(!s.events[d.to].transient);
            }
        }
    }

    #[test]
    fn po_within_tfo_and_transient_flag() {
        let cfg = SpecConfig {
            d_spec: 3,
            branch: true,
            stl: true,
            psf: true,
        };
        for s in structures(BOUNDS_CHECK, cfg) {
            let tfo: BTreeSet<_> = s.tfo_pairs().into_iter().collect();
            for p in s.po_pairs() {
                assert!(tfo.contains(&p));
            }
            for d in s.addr.iter().chain(&s.data).chain(&s.ctrl) {
                assert!(tfo.contains(&(d.from, d.to)));
            }
        }
    }

    #[test]
    fn indirect_address_resolves_through_address_of() {
        let ss = structures(
            "r1 <- &buf\nR [r1] -> r2\nR x -> r3\nR [r3] -> r4\n",
            SpecConfig::none(),
        );
        let locs: Vec<_> = ss[0]
            .memory_events()
            .map(|e| e.loc.clone().unwrap().0)
            .collect();
        assert_eq!(locs, ["buf", "x", "*x"]);
    }
}
