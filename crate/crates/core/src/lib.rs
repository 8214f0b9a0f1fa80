pub mod acfg;
pub mod axiom;
pub mod cli;
pub mod corpus;
pub mod dot;
pub mod error;
pub mod exec;
pub mod ir;
pub mod leakage;
pub mod relation;
pub mod repair;
pub mod report;

pub use error::{Error, ParseError, Result};
