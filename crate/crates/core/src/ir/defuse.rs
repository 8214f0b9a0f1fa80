use std::collections::BTreeSet;

use super::{Function, Op, Register};

/// Registers read and written by one instruction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InstrDefUse {
    pub reads: BTreeSet<Register>,
    pub writes: Option<Register>,
}

/// Register def-use information for one function, with reaching definitions
/// computed over its control-flow graph.
#[derive(Debug, Clone)]
pub struct DefUse<'f> {
    func: &'f Function,
    pub instrs: Vec<InstrDefUse>,
    /// `reaching[i]`: (register, defining instruction) pairs live on entry
    /// to instruction `i`. A definition index of `None` is a parameter.
    reaching: Vec<BTreeSet<(Register, Option<usize>)>>,
}

impl<'f> DefUse<'f> {
    pub fn new(func: &'f Function) -> Self {
        let n = func.body.len();
        let instrs: Vec<InstrDefUse> = func
            .body
            .iter()
            .map(|i| InstrDefUse {
                reads: i.op.uses().into_iter().cloned().collect(),
                writes: i.op.def().cloned(),
            })
            .collect();
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for i in 0..n {
            for s in func.successors(i) {
                preds[s].push(i);
            }
        }
        let entry: BTreeSet<(Register, Option<usize>)> =
            func.params.iter().map(|p| (p.clone(), None)).collect();
        let mut reaching: Vec<BTreeSet<(Register, Option<usize>)>> = vec![BTreeSet::new(); n];
        let transfer = |i: usize, input: &BTreeSet<(Register, Option<usize>)>| {
            let mut out = input.clone();
            if let Some(d) = &instrs[i].writes {
                out.retain(|(r, _)| r != d);
                out.insert((d.clone(), Some(i)));
            }
            out
        };
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..n {
                let mut acc = if i == 0 {
                    entry.clone()
                } else {
                    BTreeSet::new()
                };
                for &p in &preds[i] {
                    acc.extend(transfer(p, &reaching[p]));
                }
                if acc != reaching[i] {
                    reaching[i] = acc;
                    changed = true;
                }
            }
        }
        DefUse {
            func,
            instrs,
            reaching,
        }
    }

    /// Definitions of `reg` that may reach instruction `idx`.
    pub fn reaching_defs(&self, idx: usize, reg: &Register) -> BTreeSet<Option<usize>> {
        self.reaching[idx]
            .iter()
            .filter(|(r, _)| r == reg)
            .map(|(_, d)| *d)
            .collect()
    }

    /// Loads whose result may flow, through register moves and ALU
    /// operations only, into a register read by instruction `idx`.
    pub fn load_sources(&self, idx: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut seen = BTreeSet::new();
        let mut work: Vec<(usize, Register)> = self.instrs[idx]
            .reads
            .iter()
            .map(|r| (idx, r.clone()))
            .collect();
        while let Some((at, reg)) = work.pop() {
            if !seen.insert((at, reg.clone())) {
                continue;
            }
            for d in self.reaching_defs(at, &reg).into_iter().flatten() {
                match &self.func.body[d].op {
                    Op::Load { .. } => {
                        out.insert(d);
                    }
                    Op::Alu { .. } | Op::Protect(_) => {
                        for r in &self.instrs[d].reads {
                            work.push((d, r.clone()));
                        }
                    }
                    _ => {}
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse;

    fn reg(s: &str) -> Register {
        Register(s.into())
    }

    #[test]
    fn indexed_load_reads_index_writes_dest() {
        let p = parse(
            "R size -> r1\nR y -> r2\nr3 <- lt r2, r1\nBEQZ r3, 8\nR A+r2 -> r4\nR B+r4 -> r5\nW tmp <- r5\n8: skip\n",
        )
        .unwrap();
        let du = DefUse::new(&p.functions[0]);
        assert_eq!(du.instrs[4].reads, BTreeSet::from([reg("r2")]));
        assert_eq!(du.instrs[4].writes, Some(reg("r4")));
        assert_eq!(du.instrs[7], InstrDefUse::default());
    }

    #[test]
    fn alu_chain_closure() {
        let p = parse("R x -> r1\nR y -> r2\nr3 <- and r2, r1\nW z <- r3\n").unwrap();
        let du = DefUse::new(&p.functions[0]);
        assert_eq!(du.load_sources(3), BTreeSet::from([0, 1]));
    }

    #[test]
    fn reaching_defs_merge_at_join() {
        let p = parse("R c -> r1\nr2 <- 1\nBEQZ r1, L\nr2 <- 2\nL: W x <- r2\n").unwrap();
        let du = DefUse::new(&p.functions[0]);
        assert_eq!(
            du.reaching_defs(4, &reg("r2")),
            BTreeSet::from([Some(1), Some(3)])
        );
    }

    #[test]
    fn memory_round_trip_is_not_a_register_flow() {
        let p = parse("R x -> r1\nW y <- r1\nR y -> r2\nR A+r2 -> r3\n").unwrap();
        let du = DefUse::new(&p.functions[0]);
        assert_eq!(du.load_sources(3), BTreeSet::from([2]));
    }
}
