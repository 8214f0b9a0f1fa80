//! Litmus IR: a small assembly-like language for describing programs
//! whose memory behaviour is analysed.
//!
//! One instruction per line, `;` starts a comment, `NAME:` introduces a
//! label. See `docs/litmus-ir.md` in the repository for the full grammar.

mod defuse;
mod parse;

use std::fmt;

pub use defuse::{DefUse, InstrDefUse};
pub use parse::parse;

/// A symbolic architectural memory location.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location(pub String);

/// A register name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Register(pub String);

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Register),
    Imm(i64),
    /// `&NAME`: the address of a location.
    AddrOf(Location),
}

/// Right-hand side of an ALU instruction or store: either a bare operand
/// or an uninterpreted operator applied to operands.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rvalue {
    pub op: Option<String>,
    pub args: Vec<Operand>,
}

impl Rvalue {
    pub fn operand(op: Operand) -> Self {
        Rvalue {
            op: None,
            args: vec![op],
        }
    }

    pub fn registers(&self) -> impl Iterator<Item = &Register> {
        self.args.iter().filter_map(|a| match a {
            Operand::Reg(r) => Some(r),
            _ => None,
        })
    }
}

/// How a memory instruction forms its effective address.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AddressExpr {
    /// `NAME`
    Direct(Location),
    /// `NAME+r1` (or `NAME+r1*r2`): base plus register-derived index.
    Indexed {
        base: Location,
        index: Vec<Register>,
    },
    /// `[r1]`: the register holds a full pointer.
    Indirect(Register),
}

impl AddressExpr {
    pub fn registers(&self) -> Vec<&Register> {
        match self {
            AddressExpr::Direct(_) => Vec::new(),
            AddressExpr::Indexed { index, .. } => index.iter().collect(),
            AddressExpr::Indirect(r) => vec![r],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FenceKind {
    Full,
    LFence,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Op {
    Load {
        dst: Register,
        addr: AddressExpr,
    },
    Store {
        addr: AddressExpr,
        src: Rvalue,
    },
    Alu {
        dst: Register,
        value: Rvalue,
    },
    BranchEqZero {
        cond: Register,
        target: String,
    },
    Jump {
        target: String,
    },
    Fence(FenceKind),
    /// Per-value speculation barrier: the register's value is withheld
    /// from transient consumers.
    Protect(Register),
    Call {
        func: String,
        args: Vec<Operand>,
    },
    Skip,
}

impl Op {
    pub fn is_memory(&self) -> bool {
        matches!(self, Op::Load { .. } | Op::Store { .. })
    }

    /// Registers read by this instruction.
    pub fn uses(&self) -> Vec<&Register> {
        match self {
            Op::Load { addr, .. } => addr.registers(),
            Op::Store { addr, src } => {
                let mut v = addr.registers();
                v.extend(src.registers());
                v
            }
            Op::Alu { value, .. } => value.registers().collect(),
            Op::BranchEqZero { cond, .. } => vec![cond],
            Op::Protect(r) => vec![r],
            Op::Call { args, .. } => args
                .iter()
                .filter_map(|a| match a {
                    Operand::Reg(r) => Some(r),
                    _ => None,
                })
                .collect(),
            Op::Jump { .. } | Op::Fence(_) | Op::Skip => Vec::new(),
        }
    }

    /// Register written by this instruction, if any.
    pub fn def(&self) -> Option<&Register> {
        match self {
            Op::Load { dst, .. } | Op::Alu { dst, .. } => Some(dst),
            Op::Protect(r) => Some(r),
            _ => None,
        }
    }
}

/// Line/column of an instruction in its source file (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

#[derive(Debug, Clone)]
pub struct Instruction {
    pub label: Option<String>,
    pub op: Op,
    pub pos: Pos,
}

impl PartialEq for Instruction {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && self.op == other.op
    }
}

impl Instruction {
    pub fn new(op: Op) -> Self {
        Instruction {
            label: None,
            op,
            pos: Pos::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionKind {
    Function,
    Thread,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Function {
    pub name: String,
    pub kind: FunctionKind,
    pub params: Vec<Register>,
    pub body: Vec<Instruction>,
}

impl Function {
    /// Index of the instruction carrying `label`.
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.body
            .iter()
            .position(|i| i.label.as_deref() == Some(label))
    }

    /// Name shown for instruction `idx` in reports: its label when it has
    /// one, otherwise its 1-based position.
    pub fn display_name(&self, idx: usize) -> String {
        match &self.body[idx].label {
            Some(l) => l.clone(),
            None => (idx + 1).to_string(),
        }
    }

    /// Control-flow successors of instruction `idx`; `body.len()` denotes
    /// the function exit.
    pub fn successors(&self, idx: usize) -> Vec<usize> {
        let next = idx + 1;
        match &self.body[idx].op {
            Op::BranchEqZero { target, .. } => {
                vec![next, self.label_index(target).expect("validated label")]
            }
            Op::Jump { target } => vec![self.label_index(target).expect("validated label")],
            _ => vec![next],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extern {
    pub name: String,
    /// Number of pointer operands.
    pub arity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub functions: Vec<Function>,
    pub externs: Vec<Extern>,
    pub aliases: Vec<(Location, Location)>,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn extern_decl(&self, name: &str) -> Option<&Extern> {
        self.externs.iter().find(|e| e.name == name)
    }

    /// Entry points: every `thread` block, or else `main`, or else the
    /// first function.
    pub fn entries(&self) -> Vec<&Function> {
        let threads: Vec<_> = self
            .functions
            .iter()
            .filter(|f| f.kind == FunctionKind::Thread)
            .collect();
        if !threads.is_empty() {
            return threads;
        }
        match self.function("main") {
            Some(f) => vec![f],
            None => self.functions.first().into_iter().collect(),
        }
    }

    pub fn is_multi_threaded(&self) -> bool {
        self.entries().len() > 1
    }

    /// All locations mentioned anywhere in the program, sorted.
    pub fn locations(&self) -> Vec<Location> {
        let mut out = std::collections::BTreeSet::new();
        let operand_loc = |o: &Operand| match o {
            Operand::AddrOf(l) => Some(l.clone()),
            _ => None,
        };
        for f in &self.functions {
            for i in &f.body {
                match &i.op {
                    Op::Load { addr, .. } | Op::Store { addr, .. } => match addr {
                        AddressExpr::Direct(l) | AddressExpr::Indexed { base: l, .. } => {
                            out.insert(l.clone());
                        }
                        AddressExpr::Indirect(_) => {}
                    },
                    _ => {}
                }
                match &i.op {
                    Op::Store { src: v, .. } | Op::Alu { value: v, .. } => {
                        out.extend(v.args.iter().filter_map(operand_loc))
                    }
                    Op::Call { args, .. } => out.extend(args.iter().filter_map(operand_loc)),
                    _ => {}
                }
            }
        }
        for (a, b) in &self.aliases {
            out.insert(a.clone());
            out.insert(b.clone());
        }
        out.into_iter().collect()
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(|f| f.body.len()).sum()
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(i) => write!(f, "{i}"),
            Operand::AddrOf(l) => write!(f, "&{l}"),
        }
    }
}

fn join<T: fmt::Display>(items: &[T], sep: &str) -> String {
    items
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

impl fmt::Display for Rvalue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.op {
            None => write!(f, "{}", join(&self.args, ", ")),
            Some(op) => write!(f, "{op} {}", join(&self.args, ", ")),
        }
    }
}

impl fmt::Display for AddressExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AddressExpr::Direct(l) => write!(f, "{l}"),
            AddressExpr::Indexed { base, index } => write!(f, "{base}+{}", join(index, "*")),
            AddressExpr::Indirect(r) => write!(f, "[{r}]"),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Load { dst, addr } => write!(f, "R {addr} -> {dst}"),
            Op::Store { addr, src } => write!(f, "W {addr} <- {src}"),
            Op::Alu { dst, value } => write!(f, "{dst} <- {value}"),
            Op::BranchEqZero { cond, target } => write!(f, "BEQZ {cond}, {target}"),
            Op::Jump { target } => write!(f, "JMP {target}"),
            Op::Fence(FenceKind::Full) => f.write_str("MFENCE"),
            Op::Fence(FenceKind::LFence) => f.write_str("LFENCE"),
            Op::Protect(r) => write!(f, "PROTECT {r}"),
            Op::Call { func, args } => write!(f, "CALL {func}({})", join(args, ", ")),
            Op::Skip => f.write_str("skip"),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = &self.label {
            write!(f, "{l}: ")?;
        }
        write!(f, "{}", self.op)
    }
}

impl fmt::Display for Program {
    /// Canonical pretty-printed form; re-parsing it yields the same program.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (a, b) in &self.aliases {
            writeln!(f, "alias ({a}, {b})")?;
        }
        for e in &self.externs {
            writeln!(f, "extern {}/{}", e.name, e.arity)?;
        }
        for func in &self.functions {
            match func.kind {
                FunctionKind::Thread => writeln!(f, "thread {}:", func.name)?,
                FunctionKind::Function => {
                    writeln!(f, "func {}({}):", func.name, join(&func.params, ", "))?
                }
            }
            for i in &func.body {
                writeln!(f, "  {i}")?;
            }
        }
        Ok(())
    }
}
