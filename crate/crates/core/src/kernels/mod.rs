//! Portable microkernels behind the Tensor IR intrinsic interface.

pub mod brgemm;
pub mod reorder;

pub use brgemm::{brgemm_f32, brgemm_u8s8s32, BrgemmShape};
pub use reorder::{pack_2d, reorder_pack, reorder_unpack, unpack_2d, BlockGeom, BlockRange, PlainView};

/// Names accepted for Tensor IR intrinsic calls.
pub const INTRINSICS: [&str; 4] = ["brgemm_f32", "brgemm_u8s8s32", "reorder_pack", "reorder_unpack"];
