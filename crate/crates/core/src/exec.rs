//! Candidate executions: architectural witnesses (rf, co, fr) checked
//! against TSO, and microarchitectural witnesses (rfx, cox, frx) over
//! extra-architectural state checked for confidentiality.
//!
//! Each memory location of each thread is backed by one xstate (a merged
//! cache line / store buffer entry). A read that is sourced by ⊤ misses and
//! read-modify-writes its xstate; a read sourced by a program event hits
//! and only reads it. Writes always read-modify-write, except silent
//! stores, which only compare against the xstate.

use std::collections::{BTreeMap, BTreeSet};

use crate::axiom::{EventId, EventKind, EventStructure, FenceKindOrd, PrimitiveKind, TOP};
use crate::ir::Location;
use crate::relation::{acyclic, order_pairs, Pairs};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecConfig {
    pub silent_stores: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    R,
    RW,
    /// Silent store: compares against the xstate without writing it.
    Compare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XAccess {
    pub xstate: usize,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct XState {
    pub thread: usize,
    pub loc: Location,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Silent {
    /// Stored value is syntactically identical to the overwritten one.
    Definite,
    /// Values are uninterpreted, so the store may or may not be silent.
    Possible,
}

/// How an extern call summary behaves in one candidate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct AbstractChoice {
    pub write: bool,
    pub loc: Location,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    /// For each declared alias pair, whether it aliases in this candidate.
    pub aliased: Vec<bool>,
    pub abstracts: BTreeMap<EventId, AbstractChoice>,
    /// Canonical location of every memory access (indexed by event id).
    pub loc: Vec<Option<Location>>,
    /// Whether the access writes memory.
    pub writes: Vec<bool>,
    /// Committed read -> its source write (or ⊤).
    pub rf: BTreeMap<EventId, EventId>,
    /// Committed writes of each location in coherence order (⊤ implicit
    /// first).
    pub co: BTreeMap<Location, Vec<EventId>>,
    pub xstates: Vec<XState>,
    pub xacc: BTreeMap<EventId, XAccess>,
    /// Xstate reader -> its source (a writer of the same xstate, or ⊤).
    pub rfx: BTreeMap<EventId, EventId>,
    /// (⊥, xstate, source): ⊥ reads every xstate of its thread.
    pub bottom_rfx: Vec<(EventId, usize, EventId)>,
    /// Xstate writers in order (⊤ implicit first).
    pub cox: Vec<Vec<EventId>>,
    pub silent: BTreeMap<EventId, Silent>,
}

fn canonicalizer(s: &EventStructure, chosen: &[bool]) -> impl Fn(&Location) -> Location {
    let mut parent: BTreeMap<Location, Location> = BTreeMap::new();
    fn find(p: &BTreeMap<Location, Location>, l: &Location) -> Location {
        let mut cur = l.clone();
        while let Some(n) = p.get(&cur) {
            if *n == cur {
                break;
            }
            cur = n.clone();
        }
        cur
    }
    for ((a, b), &on) in s.aliases.iter().zip(chosen) {
        if !on {
            continue;
        }
        let ra = find(&parent, a);
        let rb = find(&parent, b);
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent.insert(hi, lo);
        }
    }
    move |l: &Location| find(&parent, l)
}

impl Candidate {
    pub fn is_access(&self, e: EventId) -> bool {
        self.loc[e].is_some()
    }

    pub fn rf_pairs(&self) -> Pairs {
        self.rf.iter().map(|(&r, &w)| (w, r)).collect()
    }

    pub fn co_pairs(&self) -> Pairs {
        let mut out = Vec::new();
        for ws in self.co.values() {
            out.extend(ws.iter().map(|&w| (TOP, w)));
            out.extend(order_pairs(ws));
        }
        out
    }

    /// Immediate coherence successors, ⊤ included as first writer.
    pub fn co_imm_pairs(&self) -> Pairs {
        let mut out = Vec::new();
        for ws in self.co.values() {
            let mut prev = TOP;
            for &w in ws {
                out.push((prev, w));
                prev = w;
            }
        }
        out
    }

    pub fn fr_pairs(&self) -> Pairs {
        let mut out = Vec::new();
        for (&r, &w) in &self.rf {
            let ws = &self.co[self.loc[r].as_ref().unwrap()];
            let after = if w == TOP {
                0
            } else {
                ws.iter().position(|&x| x == w).unwrap() + 1
            };
            out.extend(ws[after..].iter().map(|&w2| (r, w2)));
        }
        out
    }

    pub fn rfx_pairs(&self) -> Pairs {
        let mut out: Pairs = self.rfx.iter().map(|(&r, &w)| (w, r)).collect();
        out.extend(self.bottom_rfx.iter().map(|&(b, _, w)| (w, b)));
        out
    }

    pub fn cox_pairs(&self) -> Pairs {
        let mut out = Vec::new();
        for ws in &self.cox {
            out.extend(ws.iter().map(|&w| (TOP, w)));
            out.extend(order_pairs(ws));
        }
        out
    }

    /// Writers of `x` that come after `src` in cox.
    pub fn cox_after(&self, x: usize, src: EventId) -> &[EventId] {
        let ws = &self.cox[x];
        let after = if src == TOP {
            0
        } else {
            ws.iter()
                .position(|&w| w == src)
                .map_or(ws.len(), |p| p + 1)
        };
        &ws[after..]
    }

    pub fn frx_pairs(&self) -> Pairs {
        let mut out = Vec::new();
        for (&r, &src) in &self.rfx {
            let x = self.xacc[&r].xstate;
            out.extend(
                self.cox_after(x, src)
                    .iter()
                    .filter(|&&w| w != r)
                    .map(|&w| (r, w)),
            );
        }
        out
    }

    /// Committed same-location pairs in program order.
    pub fn po_loc(&self, s: &EventStructure) -> Pairs {
        let mut out = Vec::new();
        for t in 0..s.threads.len() {
            let acc: Vec<_> = s.po(t).filter(|&e| self.is_access(e)).collect();
            for (i, &a) in acc.iter().enumerate() {
                for &b in &acc[i + 1..] {
                    if self.loc[a] == self.loc[b] {
                        out.push((a, b));
                    }
                }
            }
        }
        out
    }

    /// Same-xstate pairs in fetch order (⊤ first, each ⊥ last).
    pub fn tfo_loc(&self, s: &EventStructure) -> Pairs {
        let mut out = Vec::new();
        for (t, th) in s.threads.iter().enumerate() {
            let mut seq: Vec<(EventId, usize)> = Vec::new();
            for &e in th {
                if let Some(a) = self.xacc.get(&e) {
                    seq.push((e, a.xstate));
                }
            }
            for (x, xs) in self.xstates.iter().enumerate() {
                if xs.thread != t {
                    continue;
                }
                let members: Vec<EventId> = seq
                    .iter()
                    .filter(|(_, y)| *y == x)
                    .map(|(e, _)| *e)
                    .collect();
                out.extend(members.iter().map(|&e| (TOP, e)));
                out.extend(order_pairs(&members));
                let bottom = s.bottom(t);
                out.push((TOP, bottom));
                out.extend(members.iter().map(|&e| (e, bottom)));
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// sc_per_loc: rf + co + fr + po_loc acyclic.
    pub fn sc_per_loc(&self, s: &EventStructure) -> bool {
        let mut edges = self.rf_pairs();
        edges.extend(self.co_pairs());
        edges.extend(self.fr_pairs());
        edges.extend(self.po_loc(s));
        acyclic(s.events.len(), &edges)
    }

    /// TSO preserved program order: every committed pair except W -> R.
    pub fn ppo(&self, s: &EventStructure) -> Pairs {
        let mut out = Vec::new();
        for t in 0..s.threads.len() {
            let acc: Vec<_> = s.po(t).filter(|&e| self.is_access(e)).collect();
            for (i, &a) in acc.iter().enumerate() {
                for &b in &acc[i + 1..] {
                    if !(self.writes[a] && !self.writes[b]) {
                        out.push((a, b));
                    }
                }
            }
        }
        out
    }

    /// Pairs ordered by an intervening fence: a full fence orders every
    /// pair, an lfence orders pairs whose first access is a read.
    pub fn fence(&self, s: &EventStructure) -> Pairs {
        let mut out = BTreeSet::new();
        for t in 0..s.threads.len() {
            let po: Vec<_> = s.po(t).collect();
            for (i, &f) in po.iter().enumerate() {
                let EventKind::Fence(kind) = s.events[f].kind else {
                    continue;
                };
                for &a in po[..i].iter().filter(|&&a| self.is_access(a)) {
                    if kind == FenceKindOrd::LFence && self.writes[a] {
                        continue;
                    }
                    for &b in po[i + 1..].iter().filter(|&&b| self.is_access(b)) {
                        out.insert((a, b));
                    }
                }
            }
        }
        out.into_iter().collect()
    }

    /// rf edges between different threads.
    pub fn rfe(&self, s: &EventStructure) -> Pairs {
        self.rf_pairs()
            .into_iter()
            .filter(|&(w, r)| w != TOP && s.events[w].thread != s.events[r].thread)
            .collect()
    }

    /// causality: rfe + co + fr + ppo + fence acyclic.
    pub fn causality(&self, s: &EventStructure) -> bool {
        let mut edges = self.rfe(s);
        edges.extend(self.co_pairs());
        edges.extend(self.fr_pairs());
        edges.extend(self.ppo(s));
        edges.extend(self.fence(s));
        acyclic(s.events.len(), &edges)
    }

    pub fn consistent(&self, s: &EventStructure) -> bool {
        self.sc_per_loc(s) && self.causality(s)
    }

    /// rfx + cox + tfo_loc acyclic, and every frx edge that points backwards
    /// in fetch order starts at the structure's load-side primitive.
    pub fn confidential(&self, s: &EventStructure) -> bool {
        let tfo_loc = self.tfo_loc(s);
        let mut edges = self.rfx_pairs();
        edges.extend(self.cox_pairs());
        edges.extend(tfo_loc.iter().copied());
        if !acyclic(s.events.len(), &edges) {
            return false;
        }
        let tfo: BTreeSet<_> = tfo_loc.into_iter().collect();
        let primitive = s.primitive.as_ref().map(|p| p.read);
        self.frx_pairs()
            .into_iter()
            .all(|(r, w)| !tfo.contains(&(w, r)) || Some(r) == primitive)
    }
}

#[derive(Clone)]
struct Micro {
    xacc: BTreeMap<EventId, XAccess>,
    rfx: BTreeMap<EventId, EventId>,
    hist: Vec<Vec<EventId>>,
    silent: BTreeMap<EventId, Silent>,
    bottom: Vec<(EventId, usize, EventId)>,
    last_fence: usize,
}

struct MicroCtx<'a> {
    s: &'a EventStructure,
    cfg: &'a ExecConfig,
    loc: &'a [Option<Location>],
    writes: &'a [bool],
    xid: &'a BTreeMap<(usize, Location), usize>,
    thread: usize,
}

impl MicroCtx<'_> {
    fn run(&self, order: &[EventId], k: usize, mut m: Micro, out: &mut Vec<Micro>) {
        for (i, &e) in order.iter().enumerate().skip(k) {
            let ev = &self.s.events[e];
            match ev.kind {
                EventKind::Fence(_) => m.last_fence = ev.fetch,
                EventKind::Bottom => {
                    for (&(t, _), &x) in self.xid {
                        if t == self.thread {
                            let src = *m.hist[x].last().unwrap();
                            m.bottom.push((e, x, src));
                        }
                    }
                }
                _ => {}
            }
            let Some(l) = &self.loc[e] else { continue };
            let x = self.xid[&(self.thread, l.clone())];
            let latest = *m.hist[x].last().unwrap();
            if !self.writes[e] {
                let mut opts = vec![(x, latest)];
                if let Some(p) = self.s.primitive.as_ref().filter(|p| p.read == e) {
                    match p.kind {
                        PrimitiveKind::Stl => {
                            let h = &m.hist[x];
                            let before_fence = h
                                .iter()
                                .rposition(|&w| self.fetch(w) < m.last_fence)
                                .unwrap_or(0);
                            for (j, &w) in h.iter().enumerate() {
                                let visible = j >= before_fence || self.fetch(w) > m.last_fence;
                                if visible && w != latest {
                                    opts.push((x, w));
                                }
                            }
                        }
                        PrimitiveKind::Psf => {
                            for &st in &p.stores {
                                let sl = self.loc[st].clone().unwrap();
                                if &sl != l {
                                    opts.push((self.xid[&(self.thread, sl)], st));
                                }
                            }
                        }
                    }
                }
                if opts.len() == 1 {
                    Self::read(&mut m, e, x, latest);
                    continue;
                }
                for (xs, src) in opts {
                    let mut m2 = m.clone();
                    Self::read(&mut m2, e, xs, src);
                    self.run(order, i + 1, m2, out);
                }
                return;
            }
            let may_be_silent =
                self.cfg.silent_stores && !ev.transient && ev.kind == EventKind::Write;
            if may_be_silent {
                let mut m2 = m.clone();
                let pred = m.hist[x].iter().rev().find(|&&w| {
                    w != TOP
                        && self.s.events[w].kind == EventKind::Write
                        && !self.s.events[w].transient
                });
                let definite = pred.is_some_and(|&w| {
                    let (a, b) = (self.s.events[w].value.as_ref(), ev.value.as_ref());
                    a == b && b.is_some_and(|v| v.registers().next().is_none())
                });
                m2.silent.insert(
                    e,
                    if definite {
                        Silent::Definite
                    } else {
                        Silent::Possible
                    },
                );
                m2.xacc.insert(
                    e,
                    XAccess {
                        xstate: x,
                        mode: Mode::Compare,
                    },
                );
                self.run(order, i + 1, m2, out);
            }
            m.xacc.insert(
                e,
                XAccess {
                    xstate: x,
                    mode: Mode::RW,
                },
            );
            m.rfx.insert(e, latest);
            m.hist[x].push(e);
        }
        out.push(m);
    }

    fn fetch(&self, e: EventId) -> usize {
        self.s.events[e].fetch
    }

    fn read(m: &mut Micro, e: EventId, x: usize, src: EventId) {
        let mode = if src == TOP { Mode::RW } else { Mode::R };
        m.xacc.insert(e, XAccess { xstate: x, mode });
        m.rfx.insert(e, src);
        if mode == Mode::RW {
            m.hist[x].push(e);
        }
    }
}

fn permutations(items: &[EventId]) -> Vec<Vec<EventId>> {
    if items.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

type ArchPart = (BTreeMap<EventId, EventId>, Vec<EventId>);
type ArchWitness = (BTreeMap<EventId, EventId>, BTreeMap<Location, Vec<EventId>>);

/// rf/co options for one location.
fn location_options(s: &EventStructure, loc: &Location, c: &Candidate) -> Vec<ArchPart> {
    let mut reads = Vec::new();
    let mut writes = Vec::new();
    let mut threads = BTreeSet::new();
    for t in 0..s.threads.len() {
        for e in s.po(t) {
            if c.loc[e].as_ref() == Some(loc) {
                threads.insert(t);
                if c.writes[e] {
                    writes.push(e);
                } else {
                    reads.push(e);
                }
            }
        }
    }
    if threads.len() <= 1 {
        let mut rf = BTreeMap::new();
        let mut last = TOP;
        if let Some(&t) = threads.first() {
            for e in s.po(t) {
                if c.loc[e].as_ref() != Some(loc) {
                    continue;
                }
                if c.writes[e] {
                    last = e;
                } else {
                    rf.insert(e, last);
                }
            }
        }
        return vec![(rf, writes)];
    }
    let mut rfs: Vec<BTreeMap<EventId, EventId>> = vec![BTreeMap::new()];
    for &r in &reads {
        let mut next = Vec::new();
        for m in &rfs {
            for &w in std::iter::once(&TOP).chain(&writes) {
                let mut m2 = m.clone();
                m2.insert(r, w);
                next.push(m2);
            }
        }
        rfs = next;
    }
    let perms = permutations(&writes);
    let mut out = Vec::new();
    for rf in &rfs {
        for co in &perms {
            out.push((rf.clone(), co.clone()));
        }
    }
    out
}

/// All candidate executions of `s` that satisfy both the consistency and
/// the confidentiality predicates.
pub fn enumerate_candidates(s: &EventStructure, cfg: &ExecConfig) -> Vec<Candidate> {
    let mut out = Vec::new();
    let n_alias = s.aliases.len();
    let abstracts: Vec<EventId> = s
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Abstract)
        .map(|e| e.id)
        .collect();
    for mask in 0..(1u64 << n_alias) {
        let chosen: Vec<bool> = (0..n_alias).map(|i| mask >> i & 1 == 1).collect();
        let canon = canonicalizer(s, &chosen);
        // Every combination of extern-call behaviours.
        let mut amo_choices: Vec<BTreeMap<EventId, AbstractChoice>> = vec![BTreeMap::new()];
        for &a in &abstracts {
            let mut next = Vec::new();
            for m in &amo_choices {
                for l in &s.events[a].targets {
                    for write in [false, true] {
                        let mut m2 = m.clone();
                        m2.insert(
                            a,
                            AbstractChoice {
                                write,
                                loc: canon(l),
                            },
                        );
                        next.push(m2);
                    }
                }
            }
            if s.events[a].targets.is_empty() {
                next = amo_choices.clone();
            }
            amo_choices = next;
        }
        for amo in amo_choices {
            let mut loc = vec![None; s.events.len()];
            let mut writes = vec![false; s.events.len()];
            for e in &s.events {
                match e.kind {
                    EventKind::Read => loc[e.id] = e.loc.as_ref().map(&canon),
                    EventKind::Write => {
                        loc[e.id] = e.loc.as_ref().map(&canon);
                        writes[e.id] = true;
                    }
                    EventKind::Abstract => {
                        if let Some(ch) = amo.get(&e.id) {
                            loc[e.id] = Some(ch.loc.clone());
                            writes[e.id] = ch.write;
                        }
                    }
                    _ => {}
                }
            }
            let mut xid: BTreeMap<(usize, Location), usize> = BTreeMap::new();
            let mut xstates = Vec::new();
            for (t, th) in s.threads.iter().enumerate() {
                for &e in th {
                    if let Some(l) = &loc[e] {
                        xid.entry((t, l.clone())).or_insert_with(|| {
                            xstates.push(XState {
                                thread: t,
                                loc: l.clone(),
                            });
                            xstates.len() - 1
                        });
                    }
                }
            }
            let base = Candidate {
                aliased: chosen.clone(),
                abstracts: amo.clone(),
                loc: loc.clone(),
                writes: writes.clone(),
                rf: BTreeMap::new(),
                co: BTreeMap::new(),
                xstates: xstates.clone(),
                xacc: BTreeMap::new(),
                rfx: BTreeMap::new(),
                bottom_rfx: Vec::new(),
                cox: Vec::new(),
                silent: BTreeMap::new(),
            };

            // Architectural witnesses.
            let locs: BTreeSet<Location> = loc.iter().flatten().cloned().collect();
            let mut arch: Vec<ArchWitness> = vec![(BTreeMap::new(), BTreeMap::new())];
            for l in &locs {
                let opts = location_options(s, l, &base);
                let mut next = Vec::new();
                for (rf, co) in &arch {
                    for (rf2, co2) in &opts {
                        let mut rf3 = rf.clone();
                        rf3.extend(rf2.iter().map(|(a, b)| (*a, *b)));
                        let mut co3 = co.clone();
                        co3.insert(l.clone(), co2.clone());
                        next.push((rf3, co3));
                    }
                }
                arch = next;
            }
            let arch: Vec<_> = arch
                .into_iter()
                .filter(|(rf, co)| {
                    let c = Candidate {
                        rf: rf.clone(),
                        co: co.clone(),
                        ..base.clone()
                    };
                    c.consistent(s)
                })
                .collect();
            if arch.is_empty() {
                continue;
            }

            // Microarchitectural witnesses, thread by thread.
            let mut micro: Vec<Micro> = vec![Micro {
                xacc: BTreeMap::new(),
                rfx: BTreeMap::new(),
                hist: vec![vec![TOP]; xstates.len()],
                silent: BTreeMap::new(),
                bottom: Vec::new(),
                last_fence: 0,
            }];
            for t in 0..s.threads.len() {
                let ctx = MicroCtx {
                    s,
                    cfg,
                    loc: &loc,
                    writes: &writes,
                    xid: &xid,
                    thread: t,
                };
                let mut next = Vec::new();
                for m in micro {
                    let mut res = Vec::new();
                    ctx.run(&s.threads[t], 0, Micro { last_fence: 0, ..m }, &mut res);
                    next.extend(res);
                }
                micro = next;
            }

            for (rf, co) in &arch {
                for m in &micro {
                    let cox = m.hist.iter().map(|h| h[1..].to_vec()).collect();
                    let c = Candidate {
                        rf: rf.clone(),
                        co: co.clone(),
                        xacc: m.xacc.clone(),
                        rfx: m.rfx.clone(),
                        bottom_rfx: m.bottom.clone(),
                        cox,
                        silent: m.silent.clone(),
                        ..base.clone()
                    };
                    if c.confidential(s) {
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}
