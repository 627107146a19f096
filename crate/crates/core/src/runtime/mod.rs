//! Interpreter for compiled modules.

pub mod context;
pub mod exec;

pub use context::{median, CallStat, ExecutionContext, RunError, RuntimeStats, TensorSig};
pub use exec::{Counters, Program};
