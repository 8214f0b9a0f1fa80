//! Leak detection and transmitter classification.
//!
//! A leak is an architectural edge whose implied microarchitectural
//! counterpart is missing from a consistent, confidential candidate:
//!
//! * `co(w0, w1)` implies `cox(w0, w1)` and `frx(w0, w1)`;
//! * an immediate `co(w0, w1)` implies `rfx(w0, w1)`;
//! * `rf(w, r)` implies `rfx(w, r)` (for `w = ⊤`: r's xstate source is ⊤
//!   or a read miss);
//! * `fr(r, w)` implies `frx(r, w)`;
//! * ⊥ reads every location from ⊤ architecturally, so any program event
//!   sourcing ⊥ microarchitecturally is observed (the observer rule).
//!
//! The receiver is the endpoint whose xstate source deviates; transmitters
//! are the program events sourcing it, classified by the dependency chains
//! leading into them.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::acfg::build_acfg;
use crate::axiom::{
    enumerate_event_structures, Dep, EventId, EventKind, EventStructure, PrimitiveKind, SpecConfig,
    TOP,
};
use crate::exec::{enumerate_candidates, Candidate, ExecConfig, Mode};
use crate::ir::Program;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CulpritKind {
    RfWithoutRfx,
    CoWithoutCoxFrx,
    CoImmWithoutRfx,
    FrWithoutFrx,
    /// ⊥ reads ⊤ architecturally but a program event microarchitecturally.
    Observer,
}

impl CulpritKind {
    pub fn name(self) -> &'static str {
        match self {
            CulpritKind::RfWithoutRfx => "rf",
            CulpritKind::CoWithoutCoxFrx => "co",
            CulpritKind::CoImmWithoutRfx => "co_imm",
            CulpritKind::FrWithoutFrx => "fr",
            CulpritKind::Observer => "observer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "rf" => CulpritKind::RfWithoutRfx,
            "co" => CulpritKind::CoWithoutCoxFrx,
            "co_imm" => CulpritKind::CoImmWithoutRfx,
            "fr" => CulpritKind::FrWithoutFrx,
            "observer" => CulpritKind::Observer,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Culprit {
    pub kind: CulpritKind,
    pub from: EventId,
    pub to: EventId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Witness {
    pub culprit: Culprit,
    pub receiver: EventId,
    pub transmitters: Vec<EventId>,
}

/// Transmitter classes in increasing severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Class {
    #[serde(rename = "address")]
    Address,
    #[serde(rename = "C")]
    Control,
    #[serde(rename = "D")]
    Data,
    #[serde(rename = "U_C")]
    UniversalControl,
    #[serde(rename = "U_D")]
    UniversalData,
}

impl Class {
    pub const ALL: [Class; 5] = [
        Class::Address,
        Class::Control,
        Class::Data,
        Class::UniversalControl,
        Class::UniversalData,
    ];

    pub fn short(self) -> &'static str {
        match self {
            Class::Address => "address",
            Class::Control => "C",
            Class::Data => "D",
            Class::UniversalControl => "U_C",
            Class::UniversalData => "U_D",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "address" | "xstate" | "A" => Class::Address,
            "C" | "control" => Class::Control,
            "D" | "data" => Class::Data,
            "U_C" | "universal_control" => Class::UniversalControl,
            "U_D" | "universal_data" => Class::UniversalData,
            _ => return None,
        })
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rel {
    Addr,
    AddrGep,
    Data,
    Ctrl,
    Rf,
    Rfx,
}

impl Rel {
    pub fn name(self) -> &'static str {
        match self {
            Rel::Addr => "addr",
            Rel::AddrGep => "addr_gep",
            Rel::Data => "data",
            Rel::Ctrl => "ctrl",
            Rel::Rf => "rf",
            Rel::Rfx => "rfx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChainEdge {
    pub from: EventId,
    pub to: EventId,
    pub rel: Rel,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmitter {
    pub event: EventId,
    pub class: Class,
    pub transient: bool,
    pub access: Option<EventId>,
    pub upstream: Option<EventId>,
    /// Dependency path from the upstream read (or access) to the event.
    pub chain: Vec<ChainEdge>,
}

/// Options controlling classification.
#[derive(Debug, Clone, Default)]
pub struct ClassifyOptions {
    /// Only chain members at most this many fetched instructions before
    /// the transmitter are considered.
    pub window: Option<usize>,
    /// The first address link of a chain must be base-plus-index.
    pub require_gep: bool,
    /// Chains must start at the structure's load-side primitive read.
    pub primitive_rooted: bool,
}

fn rfx_source(c: &Candidate, e: EventId) -> Option<EventId> {
    c.rfx.get(&e).copied().filter(|&w| w != TOP)
}

/// Applies the leakage rules to one candidate.
pub fn detect_leaks(s: &EventStructure, c: &Candidate, observer: bool) -> Result<Vec<Witness>> {
    if !c.consistent(s) || !c.confidential(s) {
        return Err(Error::InconsistentCandidate);
    }
    Ok(detect_unchecked(s, c, observer))
}

fn bottom_of(s: &EventStructure, e: EventId) -> EventId {
    s.bottom(s.events[e].thread)
}

fn detect_unchecked(s: &EventStructure, c: &Candidate, observer: bool) -> Vec<Witness> {
    let mut out = BTreeSet::new();
    let silent = |e: EventId| c.xacc.get(&e).is_some_and(|a| a.mode == Mode::Compare);
    let cox: BTreeSet<_> = c.cox_pairs().into_iter().collect();
    let frx: BTreeSet<_> = c.frx_pairs().into_iter().collect();
    let deviation = |kind: CulpritKind, from: EventId, to: EventId, subject: EventId| {
        let culprit = Culprit { kind, from, to };
        if to != TOP && silent(to) {
            Witness {
                culprit,
                receiver: bottom_of(s, subject),
                transmitters: vec![to],
            }
        } else {
            Witness {
                culprit,
                receiver: subject,
                transmitters: rfx_source(c, subject).into_iter().collect(),
            }
        }
    };
    for (w0, w1) in c.co_pairs() {
        if w0 == TOP {
            continue;
        }
        if !cox.contains(&(w0, w1)) || !frx.contains(&(w0, w1)) {
            out.insert(deviation(CulpritKind::CoWithoutCoxFrx, w0, w1, w1));
        }
    }
    for (w0, w1) in c.co_imm_pairs() {
        if w0 == TOP {
            continue;
        }
        if c.rfx.get(&w1) != Some(&w0) {
            out.insert(deviation(CulpritKind::CoImmWithoutRfx, w0, w1, w1));
        }
    }
    for (&r, &w) in &c.rf {
        let ok = if w == TOP {
            match c.rfx.get(&r) {
                Some(&TOP) => true,
                Some(&x) => !c.writes[x] && c.rfx.get(&x) == Some(&TOP),
                None => false,
            }
        } else {
            c.rfx.get(&r) == Some(&w)
        };
        if !ok {
            out.insert(deviation(CulpritKind::RfWithoutRfx, w, r, r));
        }
    }
    for (r, w) in c.fr_pairs() {
        if !frx.contains(&(r, w)) {
            let culprit = Culprit {
                kind: CulpritKind::FrWithoutFrx,
                from: r,
                to: w,
            };
            if silent(w) {
                out.insert(Witness {
                    culprit,
                    receiver: bottom_of(s, w),
                    transmitters: vec![w],
                });
            } else {
                out.insert(Witness {
                    culprit,
                    receiver: r,
                    transmitters: rfx_source(c, r).into_iter().collect(),
                });
            }
        }
    }
    if observer {
        let mut per_bottom: BTreeMap<EventId, BTreeSet<EventId>> = BTreeMap::new();
        for &(b, _, src) in &c.bottom_rfx {
            if src != TOP {
                per_bottom.entry(b).or_default().insert(src);
            }
        }
        for (b, srcs) in per_bottom {
            out.insert(Witness {
                culprit: Culprit {
                    kind: CulpritKind::Observer,
                    from: TOP,
                    to: b,
                },
                receiver: b,
                transmitters: srcs.into_iter().collect(),
            });
        }
    }
    out.into_iter().collect()
}

/// (class, access, upstream, chain) for one transmitter.
type ClassifiedChain = (Class, Option<EventId>, Option<EventId>, Vec<ChainEdge>);

struct Chains<'a> {
    s: &'a EventStructure,
    c: &'a Candidate,
    addr_into: BTreeMap<EventId, Vec<Dep>>,
    ctrl_into: BTreeMap<EventId, Vec<Dep>>,
    data_into: BTreeMap<EventId, Vec<Dep>>,
    min_fetch: usize,
}

impl<'a> Chains<'a> {
    fn new(s: &'a EventStructure, c: &'a Candidate, min_fetch: usize) -> Self {
        let group = |deps: &[Dep]| {
            let mut m: BTreeMap<EventId, Vec<Dep>> = BTreeMap::new();
            for d in deps {
                m.entry(d.to).or_default().push(*d);
            }
            m
        };
        Chains {
            s,
            c,
            addr_into: group(&s.addr),
            ctrl_into: group(&s.ctrl),
            data_into: group(&s.data),
            min_fetch,
        }
    }

    fn in_window(&self, e: EventId) -> bool {
        self.s.events[e].fetch >= self.min_fetch
    }

    /// Writes whose stored value a read returns (architecturally, or
    /// microarchitecturally from a store).
    fn memory_sources(&self, r: EventId) -> Vec<(EventId, Rel)> {
        let mut out = Vec::new();
        if let Some(&w) = self.c.rf.get(&r) {
            if w != TOP && self.s.events[w].kind == EventKind::Write {
                out.push((w, Rel::Rf));
            }
        }
        if let Some(&w) = self.c.rfx.get(&r) {
            if w != TOP
                && self.s.events[w].kind == EventKind::Write
                && !out.iter().any(|(x, _)| *x == w)
            {
                out.push((w, Rel::Rfx));
            }
        }
        out
    }

    /// Reads `a` whose value reaches read `to` through zero or more
    /// store/reload steps, each with a path `a -> ... -> to`.
    fn value_flow_back(&self, to: EventId) -> Vec<(EventId, Vec<ChainEdge>)> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::from([to]);
        let mut q = VecDeque::from([(to, Vec::new())]);
        while let Some((r, path)) = q.pop_front() {
            out.push((r, path.clone()));
            for (w, rel) in self.memory_sources(r) {
                if !self.in_window(w) {
                    continue;
                }
                for d in self.data_into.get(&w).into_iter().flatten() {
                    if !self.in_window(d.from) || !seen.insert(d.from) {
                        continue;
                    }
                    let mut p = vec![
                        ChainEdge {
                            from: d.from,
                            to: w,
                            rel: Rel::Data,
                            masked: d.masked,
                        },
                        ChainEdge {
                            from: w,
                            to: r,
                            rel,
                            masked: false,
                        },
                    ];
                    p.extend(path.iter().copied());
                    q.push_back((d.from, p));
                }
            }
        }
        out
    }

    /// (access, path access -> t) pairs for dependency kind `deps`.
    fn accesses(
        &self,
        t: EventId,
        into: &BTreeMap<EventId, Vec<Dep>>,
        ctrl: bool,
        require_gep: bool,
    ) -> Vec<(EventId, Vec<ChainEdge>)> {
        let mut out = Vec::new();
        for d in into.get(&t).into_iter().flatten() {
            if !self.in_window(d.from) || (require_gep && !ctrl && !d.gep) || (require_gep && ctrl)
            {
                continue;
            }
            let rel = match (ctrl, d.gep) {
                (true, _) => Rel::Ctrl,
                (false, true) => Rel::AddrGep,
                (false, false) => Rel::Addr,
            };
            for (a, mut path) in self.value_flow_back(d.from) {
                path.push(ChainEdge {
                    from: d.from,
                    to: t,
                    rel,
                    masked: d.masked,
                });
                out.push((a, path));
            }
        }
        out
    }
}

/// Classifies every transmitter of a witness, reporting the most severe
/// class each one reaches (with every access/upstream combination that
/// attains it).
pub fn classify_transmitters(
    s: &EventStructure,
    c: &Candidate,
    w: &Witness,
    opts: &ClassifyOptions,
) -> Vec<Transmitter> {
    let mut out = Vec::new();
    let root = if opts.primitive_rooted {
        s.primitive.as_ref().map(|p| p.read)
    } else {
        None
    };
    for &t in &w.transmitters {
        let ev = &s.events[t];
        let min_fetch = opts.window.map_or(0, |win| ev.fetch.saturating_sub(win));
        let ch = Chains::new(s, c, min_fetch);
        let root_ok = |e: EventId| !opts.primitive_rooted || Some(e) == root;
        let mut found: Vec<ClassifiedChain> = Vec::new();
        for (ctrl, into) in [(false, &ch.addr_into), (true, &ch.ctrl_into)] {
            let (cls, ucls) = if ctrl {
                (Class::Control, Class::UniversalControl)
            } else {
                (Class::Data, Class::UniversalData)
            };
            for (a, path) in ch.accesses(t, into, ctrl, opts.require_gep && !ctrl) {
                if root_ok(a) {
                    found.push((cls, Some(a), None, path.clone()));
                }
                for (u, upath) in ch.accesses(a, &ch.addr_into, false, opts.require_gep) {
                    if root_ok(u) {
                        let mut full = upath;
                        full.extend(path.iter().copied());
                        found.push((ucls, Some(a), Some(u), full));
                    }
                }
            }
        }
        let best = found.iter().map(|f| f.0).max();
        match best {
            None => out.push(Transmitter {
                event: t,
                class: Class::Address,
                transient: ev.transient,
                access: None,
                upstream: None,
                chain: Vec::new(),
            }),
            Some(b) => {
                let mut seen = BTreeSet::new();
                for (cls, a, u, chain) in found {
                    if cls == b && seen.insert((a, u)) {
                        out.push(Transmitter {
                            event: t,
                            class: cls,
                            transient: ev.transient,
                            access: a,
                            upstream: u,
                            chain,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Checks that every chain edge is present in the candidate.
pub fn chain_replays(s: &EventStructure, c: &Candidate, chain: &[ChainEdge]) -> bool {
    chain.iter().all(|e| match e.rel {
        Rel::Addr => s.addr.iter().any(|d| d.from == e.from && d.to == e.to),
        Rel::AddrGep => s
            .addr
            .iter()
            .any(|d| d.from == e.from && d.to == e.to && d.gep),
        Rel::Data => s.data.iter().any(|d| d.from == e.from && d.to == e.to),
        Rel::Ctrl => s.ctrl.iter().any(|d| d.from == e.from && d.to == e.to),
        Rel::Rf => c.rf.get(&e.to) == Some(&e.from),
        Rel::Rfx => c.rfx.get(&e.to) == Some(&e.from),
    }) && chain.windows(2).all(|p| p[0].to == p[1].from)
}

/// Whether the structure's load-side primitive actually misbehaves in this
/// candidate (reads a stale value, or another location's store).
pub fn primitive_deviates(s: &EventStructure, c: &Candidate) -> bool {
    let Some(p) = &s.primitive else { return false };
    let Some(a) = c.xacc.get(&p.read) else {
        return false;
    };
    match p.kind {
        PrimitiveKind::Psf => c.xstates[a.xstate].loc != *c.loc[p.read].as_ref().unwrap(),
        PrimitiveKind::Stl => {
            let fetch = s.events[p.read].fetch;
            let latest = c.cox[a.xstate]
                .iter()
                .copied()
                .rfind(|&w| w != p.read && s.events[w].fetch < fetch)
                .unwrap_or(TOP);
            c.rfx.get(&p.read) != Some(&latest)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    V1,
    V4,
    Psf,
}

impl Engine {
    pub const ALL: [Engine; 3] = [Engine::V1, Engine::V4, Engine::Psf];

    pub fn name(self) -> &'static str {
        match self {
            Engine::V1 => "v1",
            Engine::V4 => "v4",
            Engine::Psf => "psf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "v1" => Engine::V1,
            "v4" => Engine::V4,
            "psf" => Engine::Psf,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub d_spec: usize,
    /// Overrides the engine's own primitive set when given.
    pub primitives: Option<(bool, bool, bool)>,
    pub window: Option<usize>,
    pub classes: BTreeSet<Class>,
    pub require_gep: bool,
    pub silent_stores: bool,
    /// Apply the observer rule at ⊥.
    pub observer: bool,
    /// Report transient transmitters only.
    pub transient_only: bool,
    /// Drop transient data/control transmitters whose access is committed
    /// (a transient fetch prefetching for an older committed instruction).
    pub exclude_prefetch_variant: bool,
    /// Restrict to these culprit kinds.
    pub culprits: Option<BTreeSet<CulpritKind>>,
    pub timeout: Option<Duration>,
    /// Render a witness graph for each finding.
    pub graphs: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            d_spec: 250,
            primitives: None,
            window: None,
            classes: BTreeSet::from([Class::UniversalData]),
            require_gep: false,
            silent_stores: false,
            observer: true,
            transient_only: true,
            exclude_prefetch_variant: true,
            culprits: None,
            timeout: None,
            graphs: false,
        }
    }
}

impl EngineConfig {
    pub fn spec(&self, engine: Engine) -> SpecConfig {
        let (branch, stl, psf) = self.primitives.unwrap_or(match engine {
            Engine::V1 => (true, false, false),
            Engine::V4 => (false, true, false),
            Engine::Psf => (false, false, true),
        });
        SpecConfig {
            d_spec: self.d_spec,
            branch,
            stl,
            psf,
        }
    }
}

/// A source position where an lfence may be inserted (before the
/// instruction at `index` of function `func`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct FencePoint {
    pub func: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainStep {
    pub from: String,
    pub rel: &'static str,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub engine: Engine,
    pub transmitter: String,
    pub class: Class,
    pub transient: bool,
    pub access: Option<String>,
    pub access_transient: Option<bool>,
    pub upstream: Option<String>,
    pub receiver: String,
    pub culprit: CulpritKind,
    pub culprit_edge: (String, String),
    pub primitive: Option<String>,
    pub chain: Vec<ChainStep>,
    pub annotations: Vec<String>,
    #[serde(skip)]
    pub fence_points: Vec<FencePoint>,
    #[serde(skip)]
    pub graph: Option<String>,
}

pub const SEMANTIC_IMPRECISION: &str = "semantic-imprecision";
pub const LOOP_IMPRECISION: &str = "loop-summarization-imprecision";

impl Finding {
    /// Identity used for de-duplication and sorting.
    pub fn key(
        &self,
    ) -> (
        String,
        Class,
        bool,
        Option<String>,
        Option<String>,
        Option<String>,
        Engine,
    ) {
        (
            self.transmitter.clone(),
            self.class,
            self.transient,
            self.access.clone(),
            self.upstream.clone(),
            self.primitive.clone(),
            self.engine,
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Stats {
    pub structures: usize,
    pub candidates: usize,
    pub witnesses: usize,
    /// Windows cut short by a nested branch.
    pub nested_truncations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Report {
    pub findings: Vec<Finding>,
    pub stats: Stats,
}

fn primitive_name(s: &EventStructure, t: &crate::axiom::Event) -> Option<String> {
    if let Some(p) = &s.primitive {
        let kind = match p.kind {
            PrimitiveKind::Stl => "stl",
            PrimitiveKind::Psf => "psf",
        };
        return Some(format!("{kind} {}", s.events[p.read].name));
    }
    let trig = t.trigger?;
    Some(format!("branch {}", s.events[trig].name))
}

fn annotations(chain: &[ChainEdge]) -> Vec<String> {
    let mut out = Vec::new();
    if chain
        .iter()
        .any(|e| e.masked && matches!(e.rel, Rel::Addr | Rel::AddrGep))
    {
        out.push(SEMANTIC_IMPRECISION.to_string());
    }
    out
}

/// Source positions at which a fence would cut the transient window that
/// contains the earliest transient member of the chain.
fn fence_points(
    s: &EventStructure,
    c: &Candidate,
    g: &crate::acfg::ACfg,
    t: &Transmitter,
) -> Vec<FencePoint> {
    let mut members: BTreeSet<EventId> = BTreeSet::from([t.event]);
    for e in &t.chain {
        members.insert(e.from);
        members.insert(e.to);
    }
    let Some(m) = members
        .iter()
        .copied()
        .filter(|&e| s.events[e].transient)
        .min_by_key(|&e| s.events[e].fetch)
    else {
        return Vec::new();
    };
    let Some(trigger) = s.events[m].trigger else {
        return Vec::new();
    };
    let Some(w) = s
        .windows
        .iter()
        .find(|w| w.trigger == trigger && w.events.contains(&m))
    else {
        return Vec::new();
    };
    let mnode = s.events[m].node.unwrap();
    let upto = w.nodes.iter().position(|&n| n == mnode).unwrap();
    let mut nodes: Vec<usize> = Vec::new();
    if s.events[trigger].kind == EventKind::Branch {
        nodes.extend(&w.nodes[..=upto]);
    } else {
        let path = &s.paths[w.thread];
        let src = c.rfx.get(&trigger).copied().unwrap_or(TOP);
        let start = if src == TOP {
            0
        } else {
            s.events[src]
                .node
                .and_then(|n| path.iter().position(|&x| x == n))
                .map_or(0, |p| p + 1)
        };
        nodes.extend(&path[start.min(path.len())..]);
        nodes.extend(&w.nodes[..=upto]);
    }
    let mut out: Vec<FencePoint> = Vec::new();
    for n in nodes {
        let prov = &g.nodes[n].prov;
        let fp = FencePoint {
            func: prov.func.clone(),
            index: prov.index,
        };
        if !out.contains(&fp) {
            out.push(fp);
        }
    }
    out
}

/// Runs one detection engine over a single-threaded program.
pub fn analyze(p: &Program, engine: Engine, cfg: &EngineConfig) -> Result<Report> {
    let start = Instant::now();
    if p.is_multi_threaded() {
        return Err(Error::MultiThreaded(p.entries().len()));
    }
    let graphs = build_acfg(p)?;
    let spec = cfg.spec(engine);
    let rooted = matches!(engine, Engine::V4 | Engine::Psf);
    let exec = ExecConfig {
        silent_stores: cfg.silent_stores,
    };
    let opts = ClassifyOptions {
        window: cfg.window,
        require_gep: cfg.require_gep,
        primitive_rooted: rooted,
    };
    let structures = enumerate_event_structures(&graphs, &p.aliases, &spec);
    let mut report = Report::default();
    report.stats.structures = structures.len();
    let mut findings: BTreeMap<_, Finding> = BTreeMap::new();
    let timed_out = |start: &Instant| cfg.timeout.is_some_and(|t| start.elapsed() > t);
    for s in &structures {
        report.stats.nested_truncations += s
            .windows
            .iter()
            .filter(|w| w.end == crate::axiom::WindowEnd::Branch)
            .count();
        if rooted && s.primitive.is_none() {
            continue;
        }
        if timed_out(&start) {
            return Err(Error::Timeout(cfg.timeout.unwrap().as_secs()));
        }
        for c in enumerate_candidates(s, &exec) {
            report.stats.candidates += 1;
            if rooted && !primitive_deviates(s, &c) {
                continue;
            }
            for w in detect_unchecked(s, &c, cfg.observer) {
                if cfg
                    .culprits
                    .as_ref()
                    .is_some_and(|k| !k.contains(&w.culprit.kind))
                {
                    continue;
                }
                report.stats.witnesses += 1;
                for t in classify_transmitters(s, &c, &w, &opts) {
                    let ev = &s.events[t.event];
                    if cfg.transient_only && !t.transient {
                        continue;
                    }
                    if !cfg.classes.contains(&t.class) {
                        continue;
                    }
                    let access_transient = t.access.map(|a| s.events[a].transient);
                    if cfg.exclude_prefetch_variant
                        && t.transient
                        && matches!(t.class, Class::Data | Class::Control)
                        && access_transient == Some(false)
                    {
                        continue;
                    }
                    let name = |e: EventId| s.events[e].name.clone();
                    let mut ann = annotations(&t.chain);
                    if loop_spanning(s, &graphs[0], &t) {
                        ann.push(LOOP_IMPRECISION.to_string());
                    }
                    let f = Finding {
                        engine,
                        transmitter: ev.name.clone(),
                        class: t.class,
                        transient: t.transient,
                        access: t.access.map(name),
                        access_transient,
                        upstream: t.upstream.map(name),
                        receiver: name(w.receiver),
                        culprit: w.culprit.kind,
                        culprit_edge: (name(w.culprit.from), name(w.culprit.to)),
                        primitive: primitive_name(s, ev),
                        chain: t
                            .chain
                            .iter()
                            .map(|e| ChainStep {
                                from: name(e.from),
                                rel: e.rel.name(),
                                to: name(e.to),
                            })
                            .collect(),
                        annotations: ann,
                        fence_points: fence_points(s, &c, &graphs[0], &t),
                        graph: None,
                    };
                    let key = f.key();
                    if let Entry::Vacant(slot) = findings.entry(key) {
                        let mut f = f;
                        if cfg.graphs {
                            f.graph = Some(crate::dot::witness_dot(s, &c, &w, &t));
                        }
                        slot.insert(f);
                    }
                }
            }
        }
    }
    report.findings = findings.into_values().collect();
    Ok(report)
}

/// Whether the chain links instructions from different copies of an
/// unrolled loop.
fn loop_spanning(s: &EventStructure, g: &crate::acfg::ACfg, t: &Transmitter) -> bool {
    let mut copies = BTreeSet::new();
    let mut members = vec![t.event];
    for e in &t.chain {
        members.push(e.from);
        members.push(e.to);
    }
    for m in members {
        if let Some(n) = s.events[m].node {
            let c = &g.nodes[n].prov.copies;
            if !c.is_empty() {
                copies.insert(c.clone());
            }
        }
    }
    copies.len() > 1
}

/// Runs several engines and merges their findings.
pub fn analyze_engines(p: &Program, engines: &[Engine], cfg: &EngineConfig) -> Result<Report> {
    let mut out = Report::default();
    for &e in engines {
        let r = analyze(p, e, cfg)?;
        out.findings.extend(r.findings);
        out.stats.structures += r.stats.structures;
        out.stats.candidates += r.stats.candidates;
        out.stats.witnesses += r.stats.witnesses;
        out.stats.nested_truncations += r.stats.nested_truncations;
    }
    out.findings.sort_by_key(|f| f.key());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse;

    const BOUNDS_CHECK: &str = "\
1: skip
2: R y -> r2
3: r3 <- lt r2, 16
4: BEQZ r3, 8
5: R A+r2 -> r4
6: R B+r4 -> r5
7: skip
8: skip
";

    const STALE_RELOAD: &str = "\
1: R size -> r1
2: R y -> r2
3: W y <- and r2, r1
4: R y -> r3
5: R A+r3 -> r4
6: R B+r4 -> r5
";

    const ALIAS_PREDICT: &str = "\
1: R y -> r1
2: W C0 <- 64
3: R C+r1 -> r2
4: R A+r1*r2 -> r3
5: R B+r3 -> r4
";

    fn wide(d: usize) -> EngineConfig {
        EngineConfig {
            d_spec: d,
            classes: Class::ALL.into_iter().collect(),
            transient_only: false,
            exclude_prefetch_variant: false,
            ..EngineConfig::default()
        }
    }

    fn found(src: &str, engine: Engine, cfg: &EngineConfig) -> BTreeSet<(String, Class)> {
        let p = parse(src).unwrap();
        analyze(&p, engine, cfg)
            .unwrap()
            .findings
            .into_iter()
            .map(|f| (f.transmitter, f.class))
            .collect()
    }

    fn set(items: &[(&str, Class)]) -> BTreeSet<(String, Class)> {
        items.iter().map(|(n, c)| (n.to_string(), *c)).collect()
    }

    #[test]
    fn bounds_check_classes() {
        let got = found(BOUNDS_CHECK, Engine::V1, &wide(2));
        assert_eq!(
            got,
            set(&[
                ("2", Class::Address),
                ("5", Class::Data),
                ("5_S", Class::Data),
                ("6", Class::UniversalData),
                ("6_S", Class::UniversalData),
            ])
        );
    }

    #[test]
    fn default_engine_reports_transient_universal_only() {
        let got = found(
            BOUNDS_CHECK,
            Engine::V1,
            &EngineConfig {
                d_spec: 2,
                ..EngineConfig::default()
            },
        );
        assert_eq!(got, set(&[("6_S", Class::UniversalData)]));
    }

    #[test]
    fn stale_reload_under_forwarding() {
        let cfg = EngineConfig {
            d_spec: 10,
            classes: BTreeSet::from([Class::Data, Class::UniversalData]),
            ..EngineConfig::default()
        };
        let p = parse(STALE_RELOAD).unwrap();
        let r = analyze(&p, Engine::V4, &cfg).unwrap();
        let got: BTreeSet<_> = r
            .findings
            .iter()
            .map(|f| (f.transmitter.clone(), f.class))
            .collect();
        assert_eq!(
            got,
            set(&[("5_S", Class::Data), ("6_S", Class::UniversalData)])
        );
        let d = r.findings.iter().find(|f| f.class == Class::Data).unwrap();
        assert_eq!(d.access.as_deref(), Some("4_S"));
    }

    #[test]
    fn window_of_one_keeps_only_adjacent_chains() {
        let cfg = EngineConfig {
            d_spec: 10,
            window: Some(1),
            classes: BTreeSet::from([Class::Data, Class::UniversalData]),
            ..EngineConfig::default()
        };
        assert_eq!(
            found(STALE_RELOAD, Engine::V4, &cfg),
            set(&[("5_S", Class::Data)])
        );
    }

    #[test]
    fn alias_prediction_chain() {
        let cfg = EngineConfig {
            d_spec: 10,
            ..EngineConfig::default()
        };
        let p = parse(ALIAS_PREDICT).unwrap();
        let r = analyze(&p, Engine::Psf, &cfg).unwrap();
        assert_eq!(r.findings.len(), 1, "{:#?}", r.findings);
        let f = &r.findings[0];
        assert_eq!(
            (f.transmitter.as_str(), f.class),
            ("5_S", Class::UniversalData)
        );
        assert_eq!(f.access.as_deref(), Some("4_S"));
    }

    #[test]
    fn no_primitives_no_transient_leaks() {
        let cfg = EngineConfig {
            d_spec: 0,
            ..wide(0)
        };
        let p = parse(BOUNDS_CHECK).unwrap();
        let r = analyze(&p, Engine::V1, &cfg).unwrap();
        assert!(r.findings.iter().all(|f| !f.transient));
        let off = EngineConfig {
            observer: false,
            ..cfg
        };
        assert!(analyze(&p, Engine::V1, &off).unwrap().findings.is_empty());
    }

    #[test]
    fn observer_witness_per_path() {
        let p = parse("R x -> r1\nBEQZ r1, E\nR y -> r2\nE: skip\n").unwrap();
        let g = build_acfg(&p).unwrap();
        let structures = enumerate_event_structures(&g, &p.aliases, &SpecConfig::none());
        let mut n = 0;
        for s in &structures {
            for c in enumerate_candidates(s, &ExecConfig::default()) {
                let w = detect_leaks(s, &c, true).unwrap();
                assert!(w.iter().all(|w| w.culprit.kind == CulpritKind::Observer));
                n += w.len();
            }
        }
        assert_eq!(n, 2);
    }

    #[test]
    fn silent_store_leaks_through_coherence() {
        let p = parse("W x <- 1\nW x <- 1\n").unwrap();
        let cfg = EngineConfig {
            silent_stores: true,
            culprits: Some(BTreeSet::from([CulpritKind::CoImmWithoutRfx])),
            ..wide(0)
        };
        let r = analyze(&p, Engine::V1, &cfg).unwrap();
        let got: BTreeSet<_> = r
            .findings
            .iter()
            .map(|f| (f.transmitter.clone(), f.class))
            .collect();
        assert_eq!(got, set(&[("2", Class::Address)]));
    }

    #[test]
    fn chains_replay_in_their_candidate() {
        let p = parse(BOUNDS_CHECK).unwrap();
        let g = build_acfg(&p).unwrap();
        let spec = SpecConfig {
            d_spec: 2,
            branch: true,
            stl: false,
            psf: false,
        };
        for s in enumerate_event_structures(&g, &p.aliases, &spec) {
            for c in enumerate_candidates(&s, &ExecConfig::default()) {
                for w in detect_leaks(&s, &c, true).unwrap() {
                    for t in classify_transmitters(&s, &c, &w, &ClassifyOptions::default()) {
                        assert!(chain_replays(&s, &c, &t.chain));
                    }
                }
            }
        }
    }

    #[test]
    fn masked_index_is_annotated() {
        let src = "R y -> r1\nr2 <- lt r1, 16\nBEQZ r2, E\nr3 <- and r1, 15\nR A+r3 -> r4\nR B+r4 -> r5\nE: skip\n";
        let p = parse(src).unwrap();
        let r = analyze(
            &p,
            Engine::V1,
            &EngineConfig {
                d_spec: 10,
                ..EngineConfig::default()
            },
        )
        .unwrap();
        assert!(!r.findings.is_empty());
        for f in &r.findings {
            assert_eq!(f.annotations, vec![SEMANTIC_IMPRECISION.to_string()]);
        }
        let plain = parse(BOUNDS_CHECK).unwrap();
        let r = analyze(
            &plain,
            Engine::V1,
            &EngineConfig {
                d_spec: 10,
                ..EngineConfig::default()
            },
        )
        .unwrap();
        assert!(r.findings.iter().all(|f| f.annotations.is_empty()));
    }
}
