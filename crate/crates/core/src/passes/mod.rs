//! Graph passes, run in a fixed order: decompose, low precision, layout
//! propagation, constant preprocessing, fine-grain fusion, coarse-grain marking.

pub mod cleanup;
pub mod coarse;
pub mod constants;
pub mod decompose;
pub mod fusion;
pub mod layout;
pub mod lowp;
pub mod pipeline;

use thiserror::Error;

pub use cleanup::cleanup;
pub use coarse::{has_prologue, mark_coarse_grain, partition_of, standalone_shape, Partition, StandaloneShape};
pub use constants::{preprocess_constants, ConstCachePlan};
pub use decompose::decompose_complex;
pub use fusion::{fine_grain_fuse, FusionDecision, FusionLimits, FusionResult, OpDecision};
pub use layout::{matmul_params, propagate_layouts, InsertedReorder};
pub use lowp::low_precision_convert;
pub use pipeline::{run_graph_passes, GraphPipeline, PassDelta, PassPipelineReport, PipelineOptions, STAGES};

#[derive(Debug, Error, PartialEq)]
pub enum PassError {
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
}
