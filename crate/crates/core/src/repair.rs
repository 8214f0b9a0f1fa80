//! Minimal lfence insertion.
//!
//! Each round analyses the program, collects the source positions that
//! could cut the transient window of some finding, measures which findings
//! a fence at each position actually removes, and inserts a minimum set of
//! fences covering every finding (earliest positions on ties). Rounds
//! repeat until the program is clean or the round cap is hit.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::ir::{FenceKind, Instruction, Op, Program};
use crate::leakage::{analyze_engines, Engine, EngineConfig, FencePoint, Report};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct RepairConfig {
    pub engines: Vec<Engine>,
    pub engine: EngineConfig,
    pub max_rounds: usize,
}

impl RepairConfig {
    pub fn new(engines: Vec<Engine>, engine: EngineConfig) -> Self {
        RepairConfig {
            engines,
            engine,
            max_rounds: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RepairOutcome {
    /// Fence positions in the input program, sorted.
    pub fences: Vec<FencePoint>,
    pub rounds: usize,
    /// Findings of the input program.
    pub initial_findings: usize,
    #[serde(skip)]
    pub program: Program,
}

/// Gives every unlabelled instruction its report name as a label so that
/// names survive fence insertion.
fn pin_names(p: &Program) -> Program {
    let mut out = p.clone();
    for f in &mut out.functions {
        let taken: BTreeSet<String> = f.body.iter().filter_map(|i| i.label.clone()).collect();
        for idx in 0..f.body.len() {
            if f.body[idx].label.is_none() {
                let mut name = (idx + 1).to_string();
                while taken.contains(&name) {
                    name.push('_');
                }
                f.body[idx].label = Some(name);
            }
        }
    }
    out
}

/// Inserts an lfence before each point. A fence placed before a labelled
/// instruction takes over the label, so jumps to it also cross the fence.
/// Returns the new program and, per function, the original index of each
/// instruction (inserted fences map to the instruction they precede).
pub fn insert_fences(
    p: &Program,
    points: &BTreeSet<FencePoint>,
) -> (Program, BTreeMap<String, Vec<usize>>) {
    let mut out = p.clone();
    let mut origin = BTreeMap::new();
    for f in &mut out.functions {
        let mut body = Vec::with_capacity(f.body.len());
        let mut map = Vec::with_capacity(f.body.len());
        let mut renamed = BTreeMap::new();
        let mut labels: BTreeSet<String> = f.body.iter().filter_map(|i| i.label.clone()).collect();
        for (idx, ins) in f.body.iter().enumerate() {
            if points.contains(&FencePoint {
                func: f.name.clone(),
                index: idx,
            }) {
                let mut fence = Instruction::new(Op::Fence(FenceKind::LFence));
                if let Some(l) = &ins.label {
                    let mut fresh = format!("fence_{l}");
                    while labels.contains(&fresh) {
                        fresh.push('_');
                    }
                    labels.insert(fresh.clone());
                    renamed.insert(l.clone(), fresh.clone());
                    fence.label = Some(fresh);
                }
                fence.pos = ins.pos;
                body.push(fence);
                map.push(idx);
            }
            body.push(ins.clone());
            map.push(idx);
        }
        for ins in &mut body {
            if let Op::BranchEqZero { target, .. } | Op::Jump { target } = &mut ins.op {
                if let Some(n) = renamed.get(target) {
                    *target = n.clone();
                }
            }
        }
        f.body = body;
        origin.insert(f.name.clone(), map);
    }
    (out, origin)
}

type Key = (
    String,
    crate::leakage::Class,
    bool,
    Option<String>,
    Option<String>,
    Option<String>,
    Engine,
);

fn keys(r: &Report) -> BTreeSet<Key> {
    r.findings.iter().map(|f| f.key()).collect()
}

/// Minimum-cardinality hitting set: the smallest set of points whose kill
/// sets cover `universe`, lexicographically smallest among ties. `None` if
/// some element is covered by no point.
pub fn min_cover<T: Ord + Clone>(
    universe: &BTreeSet<T>,
    kills: &[(FencePoint, BTreeSet<T>)],
) -> Option<Vec<FencePoint>> {
    if universe
        .iter()
        .any(|u| !kills.iter().any(|(_, k)| k.contains(u)))
    {
        return None;
    }
    let mut best: Option<Vec<usize>> = None;
    let mut chosen = Vec::new();
    search(universe, kills, &mut chosen, &mut best);
    best.map(|b| {
        let mut v: Vec<FencePoint> = b.into_iter().map(|i| kills[i].0.clone()).collect();
        v.sort();
        v
    })
}

fn search<T: Ord + Clone>(
    left: &BTreeSet<T>,
    kills: &[(FencePoint, BTreeSet<T>)],
    chosen: &mut Vec<usize>,
    best: &mut Option<Vec<usize>>,
) {
    if left.is_empty() {
        let mut cand = chosen.clone();
        cand.sort();
        let better = match best {
            None => true,
            Some(b) => cand.len() < b.len() || (cand.len() == b.len() && cand < *b),
        };
        if better {
            *best = Some(cand);
        }
        return;
    }
    if best.as_ref().is_some_and(|b| chosen.len() + 1 > b.len()) {
        return;
    }
    // branch on the element with the fewest covering points
    let pivot = left
        .iter()
        .min_by_key(|u| kills.iter().filter(|(_, k)| k.contains(*u)).count())
        .unwrap();
    for (i, (_, k)) in kills.iter().enumerate() {
        if !k.contains(pivot) || chosen.contains(&i) {
            continue;
        }
        let rest: BTreeSet<T> = left.difference(k).cloned().collect();
        chosen.push(i);
        search(&rest, kills, chosen, best);
        chosen.pop();
    }
}

fn to_original(points: &[FencePoint], origin: &BTreeMap<String, Vec<usize>>) -> Vec<FencePoint> {
    points
        .iter()
        .map(|fp| FencePoint {
            func: fp.func.clone(),
            index: origin[&fp.func][fp.index],
        })
        .collect()
}

pub fn repair(p: &Program, cfg: &RepairConfig) -> Result<RepairOutcome> {
    let pinned = pin_names(p);
    let mut fences: BTreeSet<FencePoint> = BTreeSet::new();
    let mut initial = None;
    for round in 0..=cfg.max_rounds {
        let (cur, origin) = insert_fences(&pinned, &fences);
        let report = analyze_engines(&cur, &cfg.engines, &cfg.engine)?;
        let initial_findings = *initial.get_or_insert(report.findings.len());
        if report.findings.is_empty() {
            let (program, _) = insert_fences(p, &fences);
            return Ok(RepairOutcome {
                fences: fences.into_iter().collect(),
                rounds: round,
                initial_findings,
                program,
            });
        }
        if round == cfg.max_rounds {
            return Err(Error::RepairCap {
                iterations: round,
                residual: report.findings.len(),
            });
        }
        let stuck = report
            .findings
            .iter()
            .filter(|f| !f.transient || f.fence_points.is_empty())
            .count();
        if stuck > 0 {
            return Err(Error::Unrepairable(stuck));
        }
        let mut candidates: BTreeSet<FencePoint> = BTreeSet::new();
        for f in &report.findings {
            candidates.extend(to_original(&f.fence_points, &origin));
        }
        let universe = keys(&report);
        let mut kills = Vec::new();
        for c in candidates {
            if fences.contains(&c) {
                continue;
            }
            let mut with = fences.clone();
            with.insert(c.clone());
            let (trial, _) = insert_fences(&pinned, &with);
            let after = keys(&analyze_engines(&trial, &cfg.engines, &cfg.engine)?);
            let killed: BTreeSet<Key> = universe.difference(&after).cloned().collect();
            if !killed.is_empty() {
                kills.push((c, killed));
            }
        }
        let Some(cover) = min_cover(&universe, &kills) else {
            let covered: BTreeSet<&Key> = kills.iter().flat_map(|(_, k)| k).collect();
            return Err(Error::Unrepairable(
                universe.iter().filter(|u| !covered.contains(u)).count(),
            ));
        };
        fences.extend(cover);
    }
    unreachable!()
}

/// Whether no set of fewer than `k` points from `points` leaves the
/// program without findings (exhaustive; intended for small point sets).
pub fn no_smaller_repair(
    p: &Program,
    points: &[FencePoint],
    k: usize,
    cfg: &RepairConfig,
) -> Result<bool> {
    let pinned = pin_names(p);
    let clean = |set: &BTreeSet<FencePoint>| -> Result<bool> {
        let (trial, _) = insert_fences(&pinned, set);
        Ok(analyze_engines(&trial, &cfg.engines, &cfg.engine)?
            .findings
            .is_empty())
    };
    fn subsets(
        points: &[FencePoint],
        size: usize,
        start: usize,
        cur: &mut BTreeSet<FencePoint>,
        clean: &dyn Fn(&BTreeSet<FencePoint>) -> Result<bool>,
    ) -> Result<bool> {
        if cur.len() == size {
            return clean(cur);
        }
        for i in start..points.len() {
            cur.insert(points[i].clone());
            let hit = subsets(points, size, i + 1, cur, clean)?;
            cur.remove(&points[i]);
            if hit {
                return Ok(true);
            }
        }
        Ok(false)
    }
    for size in 0..k {
        if subsets(points, size, 0, &mut BTreeSet::new(), &clean)? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse;
    use crate::leakage::Class;

    const BOUNDS_CHECK: &str = "\
R y -> r2
r3 <- lt r2, 16
BEQZ r3, E
R A+r2 -> r4
R B+r4 -> r5
E: skip
";

    fn cfg(engine: Engine) -> RepairConfig {
        RepairConfig::new(
            vec![engine],
            EngineConfig {
                d_spec: 10,
                ..EngineConfig::default()
            },
        )
    }

    #[test]
    fn min_cover_prefers_fewest_then_earliest() {
        let fp = |i| FencePoint {
            func: "main".into(),
            index: i,
        };
        let u: BTreeSet<u8> = [1, 2, 3].into();
        let kills = vec![
            (fp(0), BTreeSet::from([1])),
            (fp(1), BTreeSet::from([1, 2, 3])),
            (fp(2), BTreeSet::from([1, 2, 3])),
            (fp(3), BTreeSet::from([2, 3])),
        ];
        assert_eq!(min_cover(&u, &kills), Some(vec![fp(1)]));
        assert_eq!(min_cover(&u, &kills[..1]), None);
    }

    #[test]
    fn bounds_check_takes_one_fence() {
        let p = parse(BOUNDS_CHECK).unwrap();
        let out = repair(&p, &cfg(Engine::V1)).unwrap();
        assert_eq!(out.fences.len(), 1);
        assert!(out.initial_findings > 0);
        let again = repair(&out.program, &cfg(Engine::V1)).unwrap();
        assert!(again.fences.is_empty());
    }

    #[test]
    fn fence_takes_over_jump_target() {
        let p = parse("R x -> r1\nBEQZ r1, L\nskip\nL: R y -> r2\n").unwrap();
        let pts = BTreeSet::from([FencePoint {
            func: "main".into(),
            index: 3,
        }]);
        let (q, origin) = insert_fences(&p, &pts);
        let text = q.to_string();
        assert!(text.contains("BEQZ r1, fence_L"), "{text}");
        assert_eq!(origin["main"], vec![0, 1, 2, 3, 3]);
        assert!(parse(&text).is_ok());
    }

    #[test]
    fn clean_program_needs_nothing() {
        let p = parse("R x -> r1\nW y <- r1\n").unwrap();
        let out = repair(&p, &cfg(Engine::V1)).unwrap();
        assert!(out.fences.is_empty());
    }

    #[test]
    fn committed_findings_are_unrepairable() {
        let p = parse(BOUNDS_CHECK).unwrap();
        let mut c = cfg(Engine::V1);
        c.engine.transient_only = false;
        c.engine.classes = BTreeSet::from([Class::UniversalData]);
        assert!(matches!(repair(&p, &c), Err(Error::Unrepairable(_))));
    }

    #[test]
    fn minimality_check_agrees() {
        let p = parse(BOUNDS_CHECK).unwrap();
        let c = cfg(Engine::V1);
        let out = repair(&p, &c).unwrap();
        let pts: Vec<FencePoint> = (0..6)
            .map(|i| FencePoint {
                func: "main".into(),
                index: i,
            })
            .collect();
        assert!(no_smaller_repair(&p, &pts, out.fences.len(), &c).unwrap());
    }
}
