//! Graph IR: logical tensors, ops and the computation graph.
//!
//! Tensor and op ids are dense integers. Passes allocate fresh ids
//! monotonically (`Graph::fresh_tensor_id`/`Graph::fresh_op_id`) so that dumps
//! taken between passes stay diffable.

pub mod json;
pub mod shape;
pub mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::template::{AnchorId, MatmulParams};
use crate::value::DenseValue;

pub use shape::infer_shapes;
pub use validate::{topo_order, validate_graph, ValidationError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OpId(pub usize);

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    F32,
    S32,
    S8,
    U8,
}

impl DataType {
    pub fn size_bytes(self) -> usize {
        match self {
            DataType::F32 | DataType::S32 => 4,
            DataType::S8 | DataType::U8 => 1,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, DataType::F32)
    }

    /// Representable range of an integer dtype.
    pub fn int_range(self) -> Option<(i64, i64)> {
        match self {
            DataType::F32 => None,
            DataType::S32 => Some((i32::MIN as i64, i32::MAX as i64)),
            DataType::S8 => Some((-128, 127)),
            DataType::U8 => Some((0, 255)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::F32 => "f32",
            DataType::S32 => "s32",
            DataType::S8 => "s8",
            DataType::U8 => "u8",
        }
    }

    pub fn parse(s: &str) -> Option<DataType> {
        match s {
            "f32" => Some(DataType::F32),
            "s32" => Some(DataType::S32),
            "s8" => Some(DataType::S8),
            "u8" => Some(DataType::U8),
            _ => None,
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Memory layout of a tensor.
///
/// `Blocked` always blocks the two innermost logical axes. The physical order is
/// `[batch.., ceil(R/br), ceil(C/bc), inner0, inner1]` where the inner dims follow
/// the order of `blocks`; e.g. a `[K, N]` weight with blocks `[(1, NB), (0, KB)]`
/// is stored as `[K/KB, N/NB, NB, KB]`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayoutDesc {
    #[default]
    Plain,
    Blocked {
        blocks: Vec<(usize, usize)>,
    },
    Any,
}

impl LayoutDesc {
    /// Blocked layout over the last two axes of a rank-`rank` tensor.
    /// `row_inner_first` selects `[.., br, bc]` (true) or `[.., bc, br]` (false).
    pub fn blocked2d(rank: usize, row_block: usize, col_block: usize, row_inner_first: bool) -> Self {
        assert!(rank >= 2 && row_block >= 1 && col_block >= 1);
        let (r, c) = (rank - 2, rank - 1);
        let blocks = if row_inner_first { vec![(r, row_block), (c, col_block)] } else { vec![(c, col_block), (r, row_block)] };
        LayoutDesc::Blocked { blocks }
    }

    pub fn is_plain(&self) -> bool {
        matches!(self, LayoutDesc::Plain)
    }

    pub fn is_blocked(&self) -> bool {
        matches!(self, LayoutDesc::Blocked { .. })
    }

    /// Decoded block parameters for a blocked layout of a tensor of `rank`.
    pub fn block_info(&self, rank: usize) -> Option<BlockInfo> {
        match self {
            LayoutDesc::Blocked { blocks } if blocks.len() == 2 && rank >= 2 => {
                let (r, c) = (rank - 2, rank - 1);
                let row_block = blocks.iter().find(|b| b.0 == r)?.1;
                let col_block = blocks.iter().find(|b| b.0 == c)?.1;
                Some(BlockInfo { row_block, col_block, row_inner_first: blocks[0].0 == r })
            }
            _ => None,
        }
    }

    /// Physical dims of a tensor with logical `shape` stored in this layout.
    pub fn physical_dims(&self, shape: &[usize]) -> Vec<usize> {
        match self.block_info(shape.len()) {
            Some(info) => {
                let rank = shape.len();
                let (rows, cols) = (shape[rank - 2], shape[rank - 1]);
                let mut dims = shape[..rank - 2].to_vec();
                dims.push(rows.div_ceil(info.row_block));
                dims.push(cols.div_ceil(info.col_block));
                if info.row_inner_first {
                    dims.push(info.row_block);
                    dims.push(info.col_block);
                } else {
                    dims.push(info.col_block);
                    dims.push(info.row_block);
                }
                dims
            }
            None => shape.to_vec(),
        }
    }

    /// Number of stored elements including block padding.
    pub fn physical_len(&self, shape: &[usize]) -> usize {
        self.physical_dims(shape).iter().product()
    }

    /// Element strides of a dense row-major plain tensor.
    pub fn plain_strides(shape: &[usize]) -> Vec<usize> {
        let mut strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        strides
    }
}

impl fmt::Display for LayoutDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutDesc::Plain => f.write_str("plain"),
            LayoutDesc::Any => f.write_str("any"),
            LayoutDesc::Blocked { blocks } => {
                f.write_str("blocked[")?;
                for (i, (axis, b)) in blocks.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{axis}:{b}")?;
                }
                f.write_str("]")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub row_block: usize,
    pub col_block: usize,
    pub row_inner_first: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorProperty {
    #[default]
    Variable,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicalTensor {
    pub id: TensorId,
    pub dtype: DataType,
    pub shape: Vec<usize>,
    pub layout: LayoutDesc,
    pub property: TensorProperty,
}

impl LogicalTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn physical_len(&self) -> usize {
        self.layout.physical_len(&self.shape)
    }

    pub fn physical_bytes(&self) -> usize {
        self.physical_len() * self.dtype.size_bytes()
    }

    pub fn is_constant(&self) -> bool {
        self.property == TensorProperty::Constant
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpCategory {
    Tunable,
    Fusible,
    Complex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    ReLU,
    Exp,
    Cast,
    Round,
    Clamp,
    Broadcast,
    ReduceSum,
    ReduceMax,
    Reorder,
    Transpose,
    Quantize,
    Dequantize,
    Softmax,
    BiasAdd,
}

impl OpKind {
    pub fn category(self) -> OpCategory {
        use OpKind::*;
        match self {
            MatMul => OpCategory::Tunable,
            Quantize | Dequantize | Softmax | BiasAdd => OpCategory::Complex,
            _ => OpCategory::Fusible,
        }
    }

    pub fn is_binary_elementwise(self) -> bool {
        use OpKind::*;
        matches!(self, Add | Sub | Mul | Div | Max | Min)
    }

    pub fn is_unary_elementwise(self) -> bool {
        use OpKind::*;
        matches!(self, ReLU | Exp | Cast | Round | Clamp)
    }

    pub fn is_elementwise(self) -> bool {
        self.is_binary_elementwise() || self.is_unary_elementwise()
    }

    pub fn is_reduction(self) -> bool {
        matches!(self, OpKind::ReduceSum | OpKind::ReduceMax)
    }

    pub fn is_data_movement(self) -> bool {
        matches!(self, OpKind::Reorder | OpKind::Transpose | OpKind::Broadcast)
    }

    /// (inputs, outputs) arity.
    pub fn arity(self) -> (usize, usize) {
        use OpKind::*;
        match self {
            MatMul | Add | Sub | Mul | Div | Max | Min | BiasAdd => (2, 1),
            _ => (1, 1),
        }
    }

    pub fn name(self) -> &'static str {
        use OpKind::*;
        match self {
            MatMul => "MatMul",
            Add => "Add",
            Sub => "Sub",
            Mul => "Mul",
            Div => "Div",
            Max => "Max",
            Min => "Min",
            ReLU => "ReLU",
            Exp => "Exp",
            Cast => "Cast",
            Round => "Round",
            Clamp => "Clamp",
            Broadcast => "Broadcast",
            ReduceSum => "ReduceSum",
            ReduceMax => "ReduceMax",
            Reorder => "Reorder",
            Transpose => "Transpose",
            Quantize => "Quantize",
            Dequantize => "Dequantize",
            Softmax => "Softmax",
            BiasAdd => "BiasAdd",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar or vector attribute value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
    Floats(Vec<f64>),
    Str(String),
}

pub type Attrs = BTreeMap<String, AttrValue>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Op {
    pub id: OpId,
    pub kind: OpKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: Attrs,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
}

impl Op {
    pub fn attr_bool(&self, key: &str) -> Option<bool> {
        match self.attrs.get(key)? {
            AttrValue::Bool(b) => Some(*b),
            AttrValue::Int(i) => Some(*i != 0),
            _ => None,
        }
    }

    pub fn attr_int(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key)? {
            AttrValue::Int(i) => Some(*i),
            AttrValue::Float(f) if f.fract() == 0.0 => Some(*f as i64),
            _ => None,
        }
    }

    pub fn attr_f64(&self, key: &str) -> Option<f64> {
        match self.attrs.get(key)? {
            AttrValue::Int(i) => Some(*i as f64),
            AttrValue::Float(f) => Some(*f),
            _ => None,
        }
    }

    /// Scalar or vector of floats.
    pub fn attr_floats(&self, key: &str) -> Option<Vec<f64>> {
        match self.attrs.get(key)? {
            AttrValue::Int(i) => Some(vec![*i as f64]),
            AttrValue::Float(f) => Some(vec![*f]),
            AttrValue::Ints(v) => Some(v.iter().map(|&i| i as f64).collect()),
            AttrValue::Floats(v) => Some(v.clone()),
            _ => None,
        }
    }

    pub fn attr_ints(&self, key: &str) -> Option<Vec<i64>> {
        match self.attrs.get(key)? {
            AttrValue::Int(i) => Some(vec![*i]),
            AttrValue::Ints(v) => Some(v.clone()),
            AttrValue::Floats(v) if v.iter().all(|f| f.fract() == 0.0) => Some(v.iter().map(|&f| f as i64).collect()),
            _ => None,
        }
    }

    pub fn attr_dtype(&self, key: &str) -> Option<DataType> {
        match self.attrs.get(key)? {
            AttrValue::Str(s) => DataType::parse(s),
            _ => None,
        }
    }

    pub fn output(&self) -> TensorId {
        self.outputs[0]
    }
}

/// DNN computation graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    pub tensors: BTreeMap<TensorId, LogicalTensor>,
    pub ops: Vec<Op>,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    /// Compile-time literal data for constant tensors (scales, zero points,
    /// folded compensation terms). Runtime-bound constants (weights) are absent.
    pub const_data: BTreeMap<TensorId, DenseValue>,
    pub(crate) next_tensor: usize,
    pub(crate) next_op: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(&self, id: TensorId) -> &LogicalTensor {
        self.tensors.get(&id).unwrap_or_else(|| panic!("unknown tensor {id}"))
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut LogicalTensor {
        self.tensors.get_mut(&id).unwrap_or_else(|| panic!("unknown tensor {id}"))
    }

    pub fn op(&self, id: OpId) -> &Op {
        self.ops.iter().find(|o| o.id == id).unwrap_or_else(|| panic!("unknown op {id}"))
    }

    pub fn op_mut(&mut self, id: OpId) -> &mut Op {
        self.ops.iter_mut().find(|o| o.id == id).unwrap_or_else(|| panic!("unknown op {id}"))
    }

    pub fn fresh_tensor_id(&mut self) -> TensorId {
        let floor = self.tensors.keys().next_back().map_or(0, |t| t.0 + 1);
        let id = self.next_tensor.max(floor);
        self.next_tensor = id + 1;
        TensorId(id)
    }

    pub fn fresh_op_id(&mut self) -> OpId {
        let floor = self.ops.iter().map(|o| o.id.0 + 1).max().unwrap_or(0);
        let id = self.next_op.max(floor);
        self.next_op = id + 1;
        OpId(id)
    }

    /// Adds a new tensor with plain layout.
    pub fn add_tensor(&mut self, dtype: DataType, shape: Vec<usize>, property: TensorProperty) -> TensorId {
        let id = self.fresh_tensor_id();
        self.tensors.insert(id, LogicalTensor { id, dtype, shape, layout: LayoutDesc::Plain, property });
        id
    }

    /// Adds a compile-time constant tensor with literal data.
    pub fn add_literal(&mut self, value: DenseValue) -> TensorId {
        let id = self.add_tensor(value.dtype(), value.shape.clone(), TensorProperty::Constant);
        self.const_data.insert(id, value);
        id
    }

    pub fn add_op(&mut self, kind: OpKind, attrs: Attrs, inputs: Vec<TensorId>, outputs: Vec<TensorId>) -> OpId {
        let id = self.fresh_op_id();
        self.ops.push(Op { id, kind, attrs, inputs, outputs });
        id
    }

    /// Map from tensor to the op producing it.
    pub fn producers(&self) -> BTreeMap<TensorId, OpId> {
        let mut map = BTreeMap::new();
        for op in &self.ops {
            for &t in &op.outputs {
                map.insert(t, op.id);
            }
        }
        map
    }

    /// Map from tensor to the ops consuming it, in op order.
    pub fn consumers(&self) -> BTreeMap<TensorId, Vec<OpId>> {
        let mut map: BTreeMap<TensorId, Vec<OpId>> = BTreeMap::new();
        for op in &self.ops {
            for &t in &op.inputs {
                let entry = map.entry(t).or_default();
                if !entry.contains(&op.id) {
                    entry.push(op.id);
                }
            }
        }
        map
    }

    pub fn is_graph_input(&self, t: TensorId) -> bool {
        self.inputs.contains(&t)
    }

    pub fn is_graph_output(&self, t: TensorId) -> bool {
        self.outputs.contains(&t)
    }

    pub fn is_literal(&self, t: TensorId) -> bool {
        self.const_data.contains_key(&t)
    }

    /// Replaces every use of `from` (op inputs and graph outputs) with `to`.
    pub fn replace_uses(&mut self, from: TensorId, to: TensorId) {
        for op in &mut self.ops {
            for t in &mut op.inputs {
                if *t == from {
                    *t = to;
                }
            }
        }
        for t in &mut self.outputs {
            if *t == from {
                *t = to;
            }
        }
    }

    /// Removes tensors not referenced by any op, graph input or output.
    pub fn prune_tensors(&mut self) {
        let mut live: BTreeSet<TensorId> = self.inputs.iter().chain(&self.outputs).copied().collect();
        for op in &self.ops {
            live.extend(op.inputs.iter().chain(&op.outputs).copied());
        }
        self.tensors.retain(|id, _| live.contains(id));
        self.const_data.retain(|id, _| live.contains(id));
    }

    /// Reorders `ops` into deterministic topological order.
    pub fn sort_ops(&mut self) -> Result<(), ValidationError> {
        let order = topo_order(self)?;
        let mut by_id: BTreeMap<OpId, Op> = self.ops.drain(..).map(|o| (o.id, o)).collect();
        self.ops = order.into_iter().map(|id| by_id.remove(&id).unwrap()).collect();
        Ok(())
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.ops.iter().filter(|o| o.kind == kind).count()
    }
}

/// A Tunable op plus anchored pre-ops and post-ops, or a single standalone
/// Fusible op (`tunable == false`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedOp {
    /// The MatMul for tunable regions, the lone op otherwise.
    pub main: OpId,
    pub tunable: bool,
    pub pre_ops: Vec<(OpId, AnchorId)>,
    pub post_ops: Vec<(OpId, AnchorId)>,
    pub params: Option<MatmulParams>,
    pub mergeable_with_next: bool,
}

impl FusedOp {
    pub fn standalone(op: OpId) -> Self {
        FusedOp { main: op, tunable: false, pre_ops: Vec::new(), post_ops: Vec::new(), params: None, mergeable_with_next: false }
    }

    /// Every op covered by this fused op, pre-ops first.
    pub fn ops(&self) -> Vec<OpId> {
        self.pre_ops.iter().map(|p| p.0).chain(std::iter::once(self.main)).chain(self.post_ops.iter().map(|p| p.0)).collect()
    }

    /// The tensor this fused op materializes.
    pub fn output(&self, g: &Graph) -> TensorId {
        match self.post_ops.last() {
            Some((op, _)) => g.op(*op).output(),
            None => g.op(self.main).output(),
        }
    }

    /// Tensors read from outside the region.
    pub fn external_inputs(&self, g: &Graph) -> Vec<TensorId> {
        let ops = self.ops();
        let internal: BTreeSet<TensorId> = ops.iter().flat_map(|&o| g.op(o).outputs.clone()).collect();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &o in &ops {
            for &t in &g.op(o).inputs {
                if !internal.contains(&t) && seen.insert(t) {
                    out.push(t);
                }
            }
        }
        out
    }
}
