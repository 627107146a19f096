//! Tensor IR, its printer and verifier, and the module-level passes:
//! coarse-grain loop merging, temporary shrinking and buffer planning.

pub mod affine;
pub mod bufplan;
pub mod ir;
pub mod merge;
pub mod printer;
pub mod shrink;
pub mod verify;

pub use bufplan::{linear_scan, plan_buffers, BufferPlan, Interval, Placement};
pub use ir::*;
pub use merge::{merge_parallel_loops, MergeReport};
pub use printer::{print_function, print_module};
pub use shrink::{shrink_temporaries, ShrinkRecord};
pub use verify::{verify_module, VerifyError};
