//! The matmul microkernel template: parameters and heuristic, anchors and
//! their cost model, desired layouts, and lowering of fused ops.

pub mod anchors;
pub mod layouts;
pub mod lower;
pub mod params;

pub use anchors::{
    anchor_cost, anchor_table, legal_anchors, nofuse_cost, select_anchor, table_row, AnchorChoice, AnchorCostRow, AnchorDecision, AnchorId, FusibleDesc,
    Operand, Side,
};
pub use layouts::desired_layouts;
pub use lower::{lower_module, tir_dims, LowerError, LowerOptions};
pub use params::{candidate_grid, choose_params, imbalance_penalty, params_cost, singlecore_cost, LoopOrder, MachineModel, MatmulParams};
