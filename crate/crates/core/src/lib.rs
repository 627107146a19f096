//! A miniature tensor graph compiler.
//!
//! Graphs of tensor ops are rewritten by a fixed pass pipeline, matmuls are
//! lowered through a blocked microkernel template with anchor-based fusion of
//! neighbouring ops, and the resulting loop IR is optimized (loop merging,
//! temporary shrinking, arena buffer reuse) and interpreted on CPU threads.

pub mod bench;
pub mod compile;
pub mod graph;
pub mod kernels;
pub mod oracle;
pub mod passes;
pub mod runtime;
pub mod template;
pub mod tir;
pub mod value;
pub mod workloads;
