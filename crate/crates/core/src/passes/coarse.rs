//! Coarse-grain marking: consecutive fused ops whose outer parallel loops
//! partition the same axis identically may share one parallel loop.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::graph::shape::{batch_count, norm_axis, rows_cols};
use crate::graph::{FusedOp, Graph, OpKind, TensorId};

/// How the outermost parallel loop of a lowered fused op splits its work.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Partition {
    /// One iteration per flattened batch index.
    Batch(usize),
    /// Iteration `i` owns logical rows `[i * rows_per, (i + 1) * rows_per)`.
    Rows { trip: usize, rows_per: usize },
    /// Any other split; never merged.
    Opaque,
}

/// How a standalone op is lowered; shared with the lowering so the two agree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StandaloneShape {
    /// Row-wise loops over `[nbat, rows, cols]` views of the output.
    RowWise,
    /// Flat loop over output elements with full index arithmetic.
    Flat,
}

pub fn standalone_shape(g: &Graph, f: &FusedOp) -> StandaloneShape {
    let op = g.op(f.main);
    let out = g.tensor(op.output());
    let rank = out.shape.len();
    match op.kind {
        _ if rank < 2 => StandaloneShape::Flat,
        k if k.is_elementwise() => {
            let ok = op.inputs.iter().all(|&t| g.tensor(t).shape.len() <= rank);
            if ok {
                StandaloneShape::RowWise
            } else {
                StandaloneShape::Flat
            }
        }
        OpKind::ReduceSum | OpKind::ReduceMax => {
            let ax = norm_axis(op.attr_int("axis").unwrap_or(-1), g.tensor(op.inputs[0]).shape.len());
            if ax == Some(rank - 1) && op.attr_bool("keepdims") != Some(false) {
                StandaloneShape::RowWise
            } else {
                StandaloneShape::Flat
            }
        }
        OpKind::Reorder => StandaloneShape::RowWise,
        _ => StandaloneShape::Flat,
    }
}

/// Row-block size of a tensor: its row block when blocked, else 1.
pub fn row_granule(g: &Graph, t: TensorId) -> usize {
    let lt = g.tensor(t);
    lt.layout.block_info(lt.shape.len()).map_or(1, |b| b.row_block)
}

pub fn partition_of(g: &Graph, f: &FusedOp) -> Partition {
    if let Some(p) = &f.params {
        if p.is_batched() {
            return Partition::Batch(p.batch);
        }
        if p.npn != 1 {
            return Partition::Opaque;
        }
        return Partition::Rows { trip: p.mpn, rows_per: p.msbn() };
    }
    if standalone_shape(g, f) == StandaloneShape::Flat {
        return Partition::Opaque;
    }
    let out = f.output(g);
    let shape = &g.tensor(out).shape;
    let nbat = batch_count(shape);
    if nbat > 1 {
        return Partition::Batch(nbat);
    }
    let rg = row_granule(g, out).max(g.op(f.main).inputs.iter().map(|&t| row_granule(g, t)).max().unwrap_or(1));
    let rows = rows_cols(shape).0;
    Partition::Rows { trip: rows.div_ceil(rg), rows_per: rg }
}

/// True when the lowered function needs a serial zero-fill before its
/// parallel loop: a padded blocked output whose blocks do not line up with
/// the template's output blocks.
/// Standalone row-wise ops need one too when their row partition does not
/// cover whole output blocks.
pub fn has_prologue(g: &Graph, f: &FusedOp) -> bool {
    let out = g.tensor(f.output(g));
    let Some(b) = out.layout.block_info(out.shape.len()) else { return false };
    let (r, c) = rows_cols(&out.shape);
    let padded = r % b.row_block != 0 || c % b.col_block != 0;
    if !padded {
        return false;
    }
    match &f.params {
        Some(p) => f.tunable && !f.post_ops.is_empty() && (b.row_block, b.col_block) != (p.mb, p.nb),
        None if f.tunable => false,
        None => match partition_of(g, f) {
            Partition::Rows { rows_per, .. } => r % b.row_block != 0 && rows_per % b.row_block != 0,
            _ => false,
        },
    }
}

/// Tensors `f` reads and how: `(tensor, is_matmul_b_operand)`.
fn reads(g: &Graph, f: &FusedOp) -> Vec<(TensorId, bool)> {
    let b_input = f.params.as_ref().map(|_| g.op(f.main).inputs[1]);
    f.external_inputs(g).into_iter().map(|t| (t, Some(t) == b_input)).collect()
}

/// Whether each outer iteration of `next` only reads what the same outer
/// iteration of the group produced.
fn slice_aligned(g: &Graph, next: &FusedOp, part: Partition, produced: &BTreeSet<TensorId>) -> bool {
    let out_shape = g.tensor(next.output(g)).shape.clone();
    let main_shape = g.tensor(g.op(next.main).output()).shape.clone();
    for (t, is_b) in reads(g, next) {
        if !produced.contains(&t) {
            continue;
        }
        let shape = &g.tensor(t).shape;
        let ok = match part {
            Partition::Rows { trip: 1, .. } => true,
            Partition::Batch(_) => shape.len() == main_shape.len() && shape[..shape.len() - 2] == main_shape[..main_shape.len() - 2],
            Partition::Rows { .. } => !is_b && shape.len() == out_shape.len() && rows_cols(shape).0 == rows_cols(&main_shape).0,
            Partition::Opaque => false,
        };
        if !ok {
            return false;
        }
    }
    true
}

/// Sets `mergeable_with_next` and returns one note per rejected candidate pair.
pub fn mark_coarse_grain(g: &Graph, fused: &mut [FusedOp]) -> Vec<String> {
    let mut notes = Vec::new();
    let mut group_out: BTreeSet<TensorId> = BTreeSet::new();
    for f in fused.iter_mut() {
        f.mergeable_with_next = false;
    }
    for i in 0..fused.len().saturating_sub(1) {
        group_out.insert(fused[i].output(g));
        let (cur, next) = (&fused[i], &fused[i + 1]);
        let (pc, pn) = (partition_of(g, cur), partition_of(g, next));
        let consumes = next.external_inputs(g).contains(&cur.output(g));
        let why = if !consumes {
            Some("does not consume the previous output".to_string())
        } else if pc == Partition::Opaque || pc != pn {
            Some(format!("partitions differ: {pc:?} vs {pn:?}"))
        } else if has_prologue(g, cur) || has_prologue(g, next) {
            Some("serial prologue".to_string())
        } else if !slice_aligned(g, next, pn, &group_out) {
            Some("reads outside its outer slice".to_string())
        } else {
            None
        };
        match why {
            None => fused[i].mergeable_with_next = true,
            Some(w) => {
                notes.push(format!("{} -> {}: {w}", fused[i].main, fused[i + 1].main));
                group_out.clear();
            }
        }
    }
    notes
}
