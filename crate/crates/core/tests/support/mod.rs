//! Shared oracles: random straight-line programs, an operational TSO
//! machine, and a literal evaluation of the leakage implications.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use lcm::acfg::build_acfg;
use lcm::axiom::{
    enumerate_event_structures, EventId, EventKind, EventStructure, FenceKindOrd, SpecConfig, TOP,
};
use lcm::exec::{enumerate_candidates, Candidate, ExecConfig, Mode};
use lcm::ir::{parse, Location};
use lcm::leakage::{detect_leaks, CulpritKind};
use proptest::prelude::*;

#[derive(Debug, Clone)]
pub enum Ins {
    Read(usize),
    Write(usize, u8),
    Fence(bool),
}

pub const LOCS: [&str; 3] = ["x", "y", "z"];

pub fn render(threads: &[Vec<Ins>]) -> String {
    let mut s = String::new();
    for (t, body) in threads.iter().enumerate() {
        if threads.len() > 1 {
            s.push_str(&format!("thread t{t}:\n"));
        }
        let mut reg = 0;
        for i in body {
            match i {
                Ins::Read(l) => {
                    reg += 1;
                    s.push_str(&format!(" R {} -> r{reg}\n", LOCS[*l]));
                }
                Ins::Write(l, v) => s.push_str(&format!(" W {} <- {v}\n", LOCS[*l])),
                Ins::Fence(true) => s.push_str(" MFENCE\n"),
                Ins::Fence(false) => s.push_str(" LFENCE\n"),
            }
        }
        if body.is_empty() {
            s.push_str(" skip\n");
        }
    }
    s
}

pub fn ins() -> impl Strategy<Value = Ins> {
    prop_oneof![
        4 => (0..3usize).prop_map(Ins::Read),
        4 => (0..3usize, 1..3u8).prop_map(|(l, v)| Ins::Write(l, v)),
        1 => any::<bool>().prop_map(Ins::Fence),
    ]
}

pub fn program() -> impl Strategy<Value = Vec<Vec<Ins>>> {
    prop::collection::vec(prop::collection::vec(ins(), 0..5), 1..4).prop_filter(
        "at most 8 memory events",
        |ts| {
            ts.iter()
                .flatten()
                .filter(|i| !matches!(i, Ins::Fence(_)))
                .count()
                <= 8
        },
    )
}

pub type Outcome = (BTreeMap<EventId, EventId>, BTreeMap<Location, Vec<EventId>>);

#[derive(Clone, PartialEq, Eq, Hash)]
struct Machine {
    pc: Vec<usize>,
    buf: Vec<VecDeque<(EventId, Location)>>,
    mem: BTreeMap<Location, EventId>,
    co: BTreeMap<Location, Vec<EventId>>,
    rf: BTreeMap<EventId, EventId>,
}

/// Every (rf, co) reachable on a store-buffer TSO machine.
pub fn tso_outcomes(s: &EventStructure) -> BTreeSet<Outcome> {
    let code: Vec<Vec<EventId>> = s
        .threads
        .iter()
        .map(|th| {
            th.iter()
                .copied()
                .filter(|&e| {
                    matches!(
                        s.events[e].kind,
                        EventKind::Read | EventKind::Write | EventKind::Fence(_)
                    )
                })
                .collect()
        })
        .collect();
    let start = Machine {
        pc: vec![0; code.len()],
        buf: vec![VecDeque::new(); code.len()],
        mem: BTreeMap::new(),
        co: BTreeMap::new(),
        rf: BTreeMap::new(),
    };
    let mut seen = HashSet::new();
    let mut out = BTreeSet::new();
    let mut stack = vec![start];
    while let Some(m) = stack.pop() {
        if !seen.insert(m.clone()) {
            continue;
        }
        let done = (0..code.len()).all(|t| m.pc[t] == code[t].len() && m.buf[t].is_empty());
        if done {
            out.insert((m.rf.clone(), m.co.clone()));
            continue;
        }
        for (t, prog) in code.iter().enumerate() {
            if let Some((w, l)) = m.buf[t].front().cloned() {
                let mut n = m.clone();
                n.buf[t].pop_front();
                n.mem.insert(l.clone(), w);
                n.co.entry(l).or_default().push(w);
                stack.push(n);
            }
            let Some(&e) = prog.get(m.pc[t]) else {
                continue;
            };
            let ev = &s.events[e];
            let mut n = m.clone();
            n.pc[t] += 1;
            match ev.kind {
                EventKind::Read => {
                    let l = ev.loc.clone().unwrap();
                    let own = m.buf[t].iter().rev().find(|(_, bl)| *bl == l);
                    let src = match own {
                        Some(&(w, _)) => w,
                        None => m.mem.get(&l).copied().unwrap_or(TOP),
                    };
                    n.rf.insert(e, src);
                }
                EventKind::Write => {
                    n.buf[t].push_back((e, ev.loc.clone().unwrap()));
                }
                EventKind::Fence(FenceKindOrd::Full) if !m.buf[t].is_empty() => continue,
                _ => {}
            }
            stack.push(n);
        }
    }
    // Locations never written still appear (empty) in the analyzer's co.
    let locs: BTreeSet<Location> = s.events.iter().filter_map(|e| e.loc.clone()).collect();
    out.into_iter()
        .map(|(rf, mut co)| {
            for l in &locs {
                co.entry(l.clone()).or_default();
            }
            (rf, co)
        })
        .collect()
}

pub fn structures(src: &str, spec: SpecConfig) -> Vec<EventStructure> {
    let p = parse(src).unwrap();
    let g = build_acfg(&p).unwrap();
    enumerate_event_structures(&g, &p.aliases, &spec)
}

pub type Key = (CulpritKind, EventId, EventId, EventId);

/// Literal evaluation of the leakage implications.
pub fn literal_violations(s: &EventStructure, c: &Candidate) -> BTreeSet<Key> {
    let before = |seq: &[EventId], a: EventId, b: EventId| {
        let pa = if a == TOP {
            Some(0)
        } else {
            seq.iter().position(|&x| x == a).map(|p| p + 1)
        };
        let pb = seq.iter().position(|&x| x == b).map(|p| p + 1);
        matches!((pa, pb), (Some(x), Some(y)) if x < y)
    };
    let mut co = Vec::new();
    let mut co_imm = Vec::new();
    for ws in c.co.values() {
        for (i, &w) in ws.iter().enumerate() {
            co_imm.push((if i == 0 { TOP } else { ws[i - 1] }, w));
            co.push((TOP, w));
            for &w2 in &ws[i + 1..] {
                co.push((w, w2));
            }
        }
    }
    let xs_of = |e: EventId| c.xacc.get(&e).map(|a| a.xstate);
    let cox = |a: EventId, b: EventId| match xs_of(b) {
        Some(x) => before(&c.cox[x], a, b),
        None => false,
    };
    // frx(r, w): r's xstate source precedes w in cox.
    let frx = |r: EventId, w: EventId| match (c.rfx.get(&r), xs_of(r), xs_of(w)) {
        (Some(&src), Some(x), Some(y)) if x == y && r != w => before(&c.cox[x], src, w),
        _ => false,
    };
    let silent = |e: EventId| c.xacc.get(&e).is_some_and(|a| a.mode == Mode::Compare);
    let receiver = |to: EventId, subject: EventId| {
        if to != TOP && silent(to) {
            s.bottom(s.events[subject].thread)
        } else {
            subject
        }
    };
    let mut out = BTreeSet::new();
    for &(w0, w1) in &co {
        if w0 != TOP && !(cox(w0, w1) && frx(w0, w1)) {
            out.insert((CulpritKind::CoWithoutCoxFrx, w0, w1, receiver(w1, w1)));
        }
    }
    for &(w0, w1) in &co_imm {
        if w0 != TOP && c.rfx.get(&w1) != Some(&w0) {
            out.insert((CulpritKind::CoImmWithoutRfx, w0, w1, receiver(w1, w1)));
        }
    }
    for (&r, &w) in &c.rf {
        let src = c.rfx.get(&r).copied();
        let ok = if w == TOP {
            src == Some(TOP) || src.is_some_and(|x| !c.writes[x] && c.rfx.get(&x) == Some(&TOP))
        } else {
            src == Some(w)
        };
        if !ok {
            out.insert((CulpritKind::RfWithoutRfx, w, r, receiver(r, r)));
        }
    }
    for (&r, &w) in &c.rf {
        let ws = &c.co[c.loc[r].as_ref().unwrap()];
        for &w2 in ws.iter().filter(|&&w2| before(ws, w, w2)) {
            if !frx(r, w2) {
                let recv = if silent(w2) {
                    s.bottom(s.events[w2].thread)
                } else {
                    r
                };
                out.insert((CulpritKind::FrWithoutFrx, r, w2, recv));
            }
        }
    }
    out
}

/// Runs both oracles on one program; `Err` describes the first mismatch.
pub fn check_program(src: &str, silent_stores: bool) -> Result<(), String> {
    let ss = structures(src, SpecConfig::none());
    if ss.len() != 1 {
        return Err(format!(
            "{} structures for a straight-line program",
            ss.len()
        ));
    }
    let s = &ss[0];
    let mut got = BTreeSet::new();
    for c in enumerate_candidates(s, &ExecConfig::default()) {
        if !(c.consistent(s) && c.confidential(s)) {
            return Err("enumerated candidate fails its own predicates".into());
        }
        if !got.insert((c.rf.clone(), c.co.clone())) {
            return Err("duplicate architectural witness".into());
        }
    }
    let want = tso_outcomes(s);
    if got != want {
        return Err(format!(
            "{} witnesses enumerated, {} reachable on the machine",
            got.len(),
            want.len()
        ));
    }

    let spec = SpecConfig {
        d_spec: 6,
        branch: false,
        stl: true,
        psf: false,
    };
    let exec = ExecConfig { silent_stores };
    for s in structures(src, spec) {
        for c in enumerate_candidates(&s, &exec) {
            let ws = detect_leaks(&s, &c, true).map_err(|e| e.to_string())?;
            let got: BTreeSet<Key> = ws
                .iter()
                .filter(|w| w.culprit.kind != CulpritKind::Observer)
                .map(|w| (w.culprit.kind, w.culprit.from, w.culprit.to, w.receiver))
                .collect();
            let want = literal_violations(&s, &c);
            if got != want {
                return Err(format!("witnesses {got:?}, literal rules give {want:?}"));
            }
            let observed: BTreeSet<EventId> = ws
                .iter()
                .filter(|w| w.culprit.kind == CulpritKind::Observer)
                .map(|w| w.receiver)
                .collect();
            let sourced: BTreeSet<EventId> = c
                .bottom_rfx
                .iter()
                .filter(|&&(_, _, src)| src != TOP)
                .map(|&(b, _, _)| b)
                .collect();
            if observed != sourced {
                return Err(format!("observers {observed:?}, sourced {sourced:?}"));
            }
        }
    }
    Ok(())
}
