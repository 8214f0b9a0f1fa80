//! Text and JSON-lines rendering of findings.

use std::fmt::Write;

use serde_json::json;

use crate::leakage::{Finding, Report};

pub fn finding_line(f: &Finding) -> String {
    let mut s = format!(
        "{} {} {} {}",
        f.engine.name(),
        f.transmitter,
        f.class,
        if f.transient {
            "transient"
        } else {
            "committed"
        }
    );
    if let Some(a) = &f.access {
        let _ = write!(s, " access={a}");
    }
    if let Some(u) = &f.upstream {
        let _ = write!(s, " upstream={u}");
    }
    let _ = write!(
        s,
        " receiver={} culprit={}({}->{})",
        f.receiver,
        f.culprit.name(),
        f.culprit_edge.0,
        f.culprit_edge.1
    );
    if let Some(p) = &f.primitive {
        let _ = write!(s, " primitive=\"{p}\"");
    }
    if !f.chain.is_empty() {
        let steps: Vec<String> = f
            .chain
            .iter()
            .map(|c| format!("{} -{}-> {}", c.from, c.rel, c.to))
            .collect();
        let _ = write!(s, " chain=[{}]", steps.join(", "));
    }
    for a in &f.annotations {
        let _ = write!(s, " [{a}]");
    }
    s
}

pub fn render_text(name: &str, r: &Report) -> String {
    let mut s = String::new();
    for f in &r.findings {
        let _ = writeln!(s, "{name}: {}", finding_line(f));
    }
    let _ = writeln!(
        s,
        "{name}: {} finding(s); {} event structure(s), {} candidate(s), {} witness(es), {} nested-branch truncation(s)",
        r.findings.len(),
        r.stats.structures,
        r.stats.candidates,
        r.stats.witnesses,
        r.stats.nested_truncations
    );
    s
}

/// One JSON object per finding, then a summary object.
pub fn render_json(name: &str, r: &Report) -> String {
    let mut s = String::new();
    for f in &r.findings {
        let mut v = serde_json::to_value(f).expect("finding serializes");
        v["program"] = json!(name);
        let _ = writeln!(s, "{v}");
    }
    let _ = writeln!(
        s,
        "{}",
        json!({"program": name, "summary": r.stats, "findings": r.findings.len()})
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse;
    use crate::leakage::{analyze, Engine, EngineConfig};

    #[test]
    fn json_lines_parse_back() {
        let p =
            parse("R y -> r2\nr3 <- lt r2, 16\nBEQZ r3, E\nR A+r2 -> r4\nR B+r4 -> r5\nE: skip\n")
                .unwrap();
        let r = analyze(
            &p,
            Engine::V1,
            &EngineConfig {
                d_spec: 10,
                ..EngineConfig::default()
            },
        )
        .unwrap();
        let out = render_json("t", &r);
        let lines: Vec<serde_json::Value> = out
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), r.findings.len() + 1);
        assert_eq!(lines[0]["class"], "U_D");
        assert_eq!(lines[0]["engine"], "v1");
        let text = render_text("t", &r);
        assert!(text.contains("U_D transient"), "{text}");
    }
}
