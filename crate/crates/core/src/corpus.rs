//! Corpus runner: `.lcm` programs with `NAME.expect.toml` sidecars.
//!
//! ```toml
//! engine = "v4"           # v1 | v4 | psf | all
//! classes = ["D", "U_D"]  # classes to report (default U_D)
//! d_spec = 20             # optional overrides
//! fences = 1              # expected repair size (optional)
//!
//! [[finding]]
//! class = "U_D"
//! label = "6_S"           # optional
//! transient = true        # default
//! notes = ["semantic-imprecision"]
//! ```
//!
//! A case passes when its findings have exactly the expected classes, every
//! expected finding is matched, and the annotations seen per class equal
//! the notes expected for it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::ir::{parse, Program};
use crate::leakage::{analyze_engines, Class, CulpritKind, Engine, EngineConfig, Report};
use crate::{Error, Result};

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedFinding {
    pub class: String,
    pub label: Option<String>,
    #[serde(default = "yes")]
    pub transient: bool,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub engine: String,
    pub classes: Option<Vec<String>>,
    pub d_spec: Option<usize>,
    pub window: Option<usize>,
    pub silent_stores: Option<bool>,
    pub include_committed: Option<bool>,
    pub require_gep: Option<bool>,
    /// Restrict to these culprit kinds (rf, co, co_imm, fr, observer).
    pub culprits: Option<Vec<String>>,
    pub fences: Option<usize>,
    #[serde(default)]
    pub finding: Vec<ExpectedFinding>,
}

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub path: PathBuf,
    pub program: Program,
    pub expect: Option<Expectation>,
}

impl Expectation {
    pub fn engines(&self) -> Result<Vec<Engine>, String> {
        if self.engine == "all" {
            return Ok(Engine::ALL.to_vec());
        }
        Engine::parse(&self.engine)
            .map(|e| vec![e])
            .ok_or_else(|| format!("unknown engine {:?}", self.engine))
    }

    /// Engine configuration for this case on top of `base`.
    pub fn config(&self, base: &EngineConfig) -> Result<EngineConfig, String> {
        let mut cfg = base.clone();
        if let Some(cs) = &self.classes {
            cfg.classes = cs
                .iter()
                .map(|c| Class::parse(c).ok_or_else(|| format!("unknown class {c:?}")))
                .collect::<Result<_, _>>()?;
        }
        if let Some(d) = self.d_spec {
            cfg.d_spec = d;
        }
        if self.window.is_some() {
            cfg.window = self.window;
        }
        if let Some(s) = self.silent_stores {
            cfg.silent_stores = s;
        }
        if let Some(g) = self.require_gep {
            cfg.require_gep = g;
        }
        if let Some(ks) = &self.culprits {
            cfg.culprits = Some(
                ks.iter()
                    .map(|k| CulpritKind::parse(k).ok_or_else(|| format!("unknown culprit {k:?}")))
                    .collect::<Result<_, _>>()?,
            );
        }
        if self.include_committed == Some(true) {
            cfg.transient_only = false;
            cfg.exclude_prefetch_variant = false;
        }
        Ok(cfg)
    }
}

/// Loads every `.lcm` file under `dir` (recursively), sorted by path.
pub fn load(dir: &Path) -> Result<Vec<Case>> {
    let mut files = Vec::new();
    collect(dir, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let io = |e| Error::Io {
            path: path.display().to_string(),
            source: e,
        };
        let text = fs::read_to_string(&path).map_err(io)?;
        let program = parse(&text)?;
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        let side = path.with_file_name(format!("{name}.expect.toml"));
        let expect = if side.exists() {
            let t = fs::read_to_string(&side).map_err(|e| Error::Io {
                path: side.display().to_string(),
                source: e,
            })?;
            Some(toml::from_str(&t).map_err(|e| Error::Sidecar {
                path: side.display().to_string(),
                msg: e.to_string(),
            })?)
        } else {
            None
        };
        out.push(Case {
            name,
            path,
            program,
            expect,
        });
    }
    Ok(out)
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let io = |e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    };
    for entry in fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "lcm") {
            out.push(p);
        }
    }
    Ok(())
}

/// Classes found, each with the annotations seen on its findings.
pub type ClassSummary = BTreeMap<Class, BTreeSet<String>>;

pub fn summarize(r: &Report) -> ClassSummary {
    let mut out: ClassSummary = BTreeMap::new();
    for f in &r.findings {
        out.entry(f.class)
            .or_default()
            .extend(f.annotations.iter().cloned());
    }
    out
}

pub fn format_summary(s: &ClassSummary) -> String {
    if s.is_empty() {
        return "-".into();
    }
    let parts: Vec<String> = s
        .iter()
        .map(|(c, notes)| {
            if notes.is_empty() {
                c.to_string()
            } else {
                let n: Vec<&str> = notes.iter().map(|n| short_note(n)).collect();
                format!("{c}[{}]", n.join(","))
            }
        })
        .collect();
    parts.join(" ")
}

fn short_note(n: &str) -> &str {
    match n {
        crate::leakage::SEMANTIC_IMPRECISION => "masked",
        crate::leakage::LOOP_IMPRECISION => "loop",
        other => other,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub expected: String,
    pub actual: String,
    pub pass: Option<bool>,
    pub reason: Option<String>,
    #[serde(skip)]
    pub report: Report,
}

/// Checks a report against a sidecar.
pub fn judge(exp: &Expectation, r: &Report) -> std::result::Result<(), String> {
    let mut want: ClassSummary = BTreeMap::new();
    for e in &exp.finding {
        let class = Class::parse(&e.class).ok_or_else(|| format!("unknown class {:?}", e.class))?;
        want.entry(class)
            .or_default()
            .extend(e.notes.iter().cloned());
        let hit = r.findings.iter().any(|f| {
            f.class == class
                && f.transient == e.transient
                && e.label.as_ref().is_none_or(|l| *l == f.transmitter)
                && e.notes.iter().all(|n| f.annotations.contains(n))
        });
        if !hit {
            return Err(format!("no finding matches {} {:?}", e.class, e.label));
        }
    }
    let got = summarize(r);
    if got != want {
        return Err(format!(
            "expected {}, found {}",
            format_summary(&want),
            format_summary(&got)
        ));
    }
    Ok(())
}

pub fn run_case(case: &Case, base: &EngineConfig) -> Result<CaseResult> {
    let (engines, cfg, expected) = match &case.expect {
        Some(e) => {
            let bad = |msg| Error::Sidecar {
                path: case.path.display().to_string(),
                msg,
            };
            let mut want: ClassSummary = BTreeMap::new();
            for f in &e.finding {
                if let Some(c) = Class::parse(&f.class) {
                    want.entry(c).or_default().extend(f.notes.iter().cloned());
                }
            }
            (
                e.engines().map_err(bad)?,
                e.config(base).map_err(bad)?,
                format_summary(&want),
            )
        }
        None => (Engine::ALL.to_vec(), base.clone(), "?".to_string()),
    };
    let report = analyze_engines(&case.program, &engines, &cfg)?;
    let (pass, reason) = match &case.expect {
        Some(e) => match judge(e, &report) {
            Ok(()) => (Some(true), None),
            Err(msg) => (Some(false), Some(msg)),
        },
        None => (None, None),
    };
    Ok(CaseResult {
        name: case.name.clone(),
        expected,
        actual: format_summary(&summarize(&report)),
        pass,
        reason,
        report,
    })
}

pub fn table(results: &[CaseResult]) -> String {
    let w = results
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(4)
        .max(4);
    let mut s = format!(
        "{:<w$}  {:<28}  {:<28}  result\n",
        "case", "expected", "found"
    );
    for r in results {
        let verdict = match r.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "-",
        };
        s.push_str(&format!(
            "{:<w$}  {:<28}  {:<28}  {verdict}\n",
            r.name, r.expected, r.actual
        ));
    }
    s
}

/// Default timeout applied per case when the caller gives none.
pub const CASE_TIMEOUT: Duration = Duration::from_secs(60);
