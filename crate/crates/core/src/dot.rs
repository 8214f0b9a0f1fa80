//! Graphviz rendering of candidate executions and leak witnesses.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::axiom::{EventKind, EventStructure, TOP};
use crate::exec::Candidate;
use crate::leakage::{Transmitter, Witness};

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn event_label(s: &EventStructure, e: usize) -> String {
    let ev = &s.events[e];
    let addr = || ev.addr.as_ref().map(|a| a.to_string()).unwrap_or_default();
    let what = match ev.kind {
        EventKind::Top | EventKind::Bottom | EventKind::SpecBottom => String::new(),
        EventKind::Read => format!("R {}", addr()),
        EventKind::Write => format!("W {}", addr()),
        EventKind::Branch => "branch".to_string(),
        EventKind::Fence(k) => format!("{k:?}").to_lowercase(),
        EventKind::Abstract => "extern".to_string(),
    };
    if what.is_empty() {
        escape(&ev.name)
    } else {
        format!("{}\\n{}", escape(&ev.name), escape(&what))
    }
}

/// Renders a candidate with its architectural and microarchitectural
/// communication. `culprit` edges are drawn dashed and red; `chain` edges
/// bold.
pub fn candidate_dot(
    s: &EventStructure,
    c: &Candidate,
    culprit: Option<(usize, usize, &str)>,
    chain: &[(usize, usize, &str)],
    highlight: &BTreeSet<usize>,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph witness {{");
    let _ = writeln!(out, "  node [shape=box, fontname=monospace];");
    for (i, ev) in s.events.iter().enumerate() {
        let mut attrs = vec![format!("label=\"{}\"", event_label(s, i))];
        if ev.transient {
            attrs.push("style=dashed".into());
        }
        if highlight.contains(&i) {
            attrs.push("color=red".into());
            attrs.push("penwidth=2".into());
        }
        let _ = writeln!(out, "  e{i} [{}];", attrs.join(", "));
    }
    let mut edge = |a: usize, b: usize, label: &str, attrs: &str| {
        let _ = writeln!(out, "  e{a} -> e{b} [label=\"{label}\"{attrs}];");
    };
    for t in 0..s.threads.len() {
        let seq = &s.threads[t];
        for w in seq.windows(2) {
            edge(w[0], w[1], "tfo", ", color=gray");
        }
    }
    for (w, r) in c.rf_pairs() {
        if w != TOP {
            edge(w, r, "rf", ", color=black");
        }
    }
    for (a, b) in c.co_imm_pairs() {
        if a != TOP {
            edge(a, b, "co", ", color=black");
        }
    }
    for (a, b) in c.rfx_pairs() {
        if a != TOP {
            edge(a, b, "rfx", ", color=blue");
        }
    }
    for x in &c.cox {
        for p in x.windows(2) {
            edge(p[0], p[1], "cox", ", color=blue");
        }
    }
    for d in &s.addr {
        edge(
            d.from,
            d.to,
            if d.gep { "addr_gep" } else { "addr" },
            ", color=darkgreen",
        );
    }
    for d in &s.data {
        edge(d.from, d.to, "data", ", color=darkgreen");
    }
    for d in &s.ctrl {
        edge(d.from, d.to, "ctrl", ", color=darkgreen");
    }
    for &(a, b, rel) in chain {
        edge(a, b, rel, ", color=orange, penwidth=3");
    }
    if let Some((a, b, kind)) = culprit {
        edge(a, b, kind, ", color=red, style=dashed, penwidth=2");
    }
    out.push_str("}\n");
    out
}

/// Witness graph for one classified transmitter.
pub fn witness_dot(s: &EventStructure, c: &Candidate, w: &Witness, t: &Transmitter) -> String {
    let chain: Vec<_> = t
        .chain
        .iter()
        .map(|e| (e.from, e.to, e.rel.name()))
        .collect();
    let highlight = BTreeSet::from([w.receiver, t.event]);
    candidate_dot(
        s,
        c,
        Some((w.culprit.from, w.culprit.to, w.culprit.kind.name())),
        &chain,
        &highlight,
    )
}
