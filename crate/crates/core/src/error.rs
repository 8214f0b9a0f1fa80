use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{col}: syntax error: expected {}, found {found}", expected.join(" or "))]
    Syntax {
        line: usize,
        col: usize,
        expected: Vec<String>,
        found: String,
    },
    #[error("{line}:{col}: unknown opcode `{opcode}`")]
    UnknownOpcode {
        line: usize,
        col: usize,
        opcode: String,
    },
    #[error("{line}: undefined label `{label}` in function `{func}`")]
    UndefinedLabel {
        line: usize,
        func: String,
        label: String,
    },
    #[error("{line}: duplicate label `{label}` in function `{func}`")]
    DuplicateLabel {
        line: usize,
        func: String,
        label: String,
    },
    #[error("{line}: register `{reg}` may be used before it is defined")]
    UseBeforeDef { line: usize, reg: String },
    #[error("{line}: call to undefined function `{func}`")]
    UnknownFunction { line: usize, func: String },
    #[error("{line}: `{func}` expects {expected} arguments, got {got}")]
    Arity {
        line: usize,
        func: String,
        expected: usize,
        got: usize,
    },
    #[error("{line}: duplicate definition of `{name}`")]
    Duplicate { line: usize, name: String },
    #[error("{line}: argument to defined function `{func}` must be a register")]
    NonRegisterArgument { line: usize, func: String },
    #[error("program defines no functions")]
    Empty,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("irreducible control flow in `{func}` at labels {labels:?}")]
    Irreducible { func: String, labels: Vec<String> },
    #[error("internal error: abstract CFG contains a cycle")]
    ResidualCycle,
    #[error("leakage analysis supports single-threaded programs only ({0} threads given)")]
    MultiThreaded(usize),
    #[error("inconsistent candidate execution passed to leak detection")]
    InconsistentCandidate,
    #[error(
        "repair did not converge after {iterations} iterations ({residual} residual findings)"
    )]
    RepairCap { iterations: usize, residual: usize },
    #[error("{0} finding(s) have no transient window and cannot be repaired with fences")]
    Unrepairable(usize),
    #[error("analysis timed out after {0} s")]
    Timeout(u64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid option: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Sidecar { path: String, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
