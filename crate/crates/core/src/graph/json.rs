//! JSON graph format.
//!
//! ```text
//! { "tensors": [{"id", "dtype", "shape", "property"}],
//!   "ops":     [{"id", "kind", "attrs", "inputs", "outputs"}],
//!   "inputs":  [...], "outputs": [...] }
//! ```
//!
//! Shapes and dtypes of op outputs may be omitted; they are inferred. Constant
//! tensors may carry inline `data`. Layouts are only emitted in dumps.

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::graph::{
    infer_shapes, validate_graph, Attrs, DataType, Graph, LayoutDesc, LogicalTensor, Op, OpId, OpKind, TensorId, TensorProperty, ValidationError,
};
use crate::value::{Data, DenseValue};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("tensor {tensor}: {msg}")]
    Tensor { tensor: TensorId, msg: String },
    #[error("graph is invalid:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ValidationError>),
}

fn de_dtype<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DataType>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    match s {
        None => Ok(None),
        Some(s) => DataType::parse(&s)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("field `dtype`: unknown dtype \"{s}\", expected one of f32, s32, s8, u8"))),
    }
}

fn de_shape<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<usize>>, D::Error> {
    let dims: Option<Vec<serde_json::Value>> = Option::deserialize(d)?;
    let Some(dims) = dims else { return Ok(None) };
    dims.into_iter()
        .map(|v| match v.as_u64() {
            Some(x) if x > 0 => Ok(x as usize),
            _ => Err(serde::de::Error::custom(format!("field `shape`: dimension {v} is not a positive static size (dynamic shapes are not supported)"))),
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    id: TensorId,
    #[serde(default, deserialize_with = "de_dtype", skip_serializing_if = "Option::is_none")]
    dtype: Option<DataType>,
    #[serde(default, deserialize_with = "de_shape", skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<usize>>,
    #[serde(default)]
    property: TensorProperty,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layout: Option<LayoutDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    tensors: Vec<RawTensor>,
    ops: Vec<Op>,
    inputs: Vec<TensorId>,
    outputs: Vec<TensorId>,
}

fn literal_from(dtype: DataType, shape: &[usize], data: &[f64]) -> DenseValue {
    let shape = shape.to_vec();
    match dtype {
        DataType::F32 => DenseValue::new(shape, Data::F32(data.iter().map(|&x| x as f32).collect())),
        DataType::S32 => DenseValue::new(shape, Data::S32(data.iter().map(|&x| x as i32).collect())),
        DataType::S8 => DenseValue::new(shape, Data::S8(data.iter().map(|&x| x as i8).collect())),
        DataType::U8 => DenseValue::new(shape, Data::U8(data.iter().map(|&x| x as u8).collect())),
    }
}

/// Parses and validates a JSON graph. MatMul transpose flags are normalized
/// into explicit Transpose ops.
pub fn parse_graph(text: &str) -> Result<Graph, IngestError> {
    let raw: RawGraph = serde_json::from_str(text)?;
    let mut g = Graph::new();
    for rt in &raw.tensors {
        let is_input = raw.inputs.contains(&rt.id);
        if is_input || rt.data.is_some() {
            if rt.dtype.is_none() {
                return Err(IngestError::Tensor { tensor: rt.id, msg: "field `dtype` is required for graph inputs and literals".into() });
            }
            if rt.shape.is_none() {
                return Err(IngestError::Tensor { tensor: rt.id, msg: "field `shape` is required for graph inputs and literals".into() });
            }
        }
        if g.tensors.contains_key(&rt.id) {
            return Err(IngestError::Tensor { tensor: rt.id, msg: "duplicate tensor id".into() });
        }
        let dtype = rt.dtype.unwrap_or(DataType::F32);
        let shape = rt.shape.clone().unwrap_or_default();
        if let Some(data) = &rt.data {
            if data.len() != shape.iter().product::<usize>() {
                return Err(IngestError::Tensor {
                    tensor: rt.id,
                    msg: format!("field `data` has {} elements, shape {:?} needs {}", data.len(), shape, shape.iter().product::<usize>()),
                });
            }
            g.const_data.insert(rt.id, literal_from(dtype, &shape, data));
        }
        g.tensors.insert(
            rt.id,
            LogicalTensor {
                id: rt.id,
                dtype,
                shape,
                layout: rt.layout.clone().unwrap_or_default(),
                property: if rt.data.is_some() { TensorProperty::Constant } else { rt.property },
            },
        );
    }
    g.ops = raw.ops;
    g.inputs = raw.inputs;
    g.outputs = raw.outputs;
    g.next_tensor = g.tensors.keys().next_back().map_or(0, |t| t.0 + 1);
    g.next_op = g.ops.iter().map(|o| o.id.0 + 1).max().unwrap_or(0);

    let structural = validate_structure(&g);
    if !structural.is_empty() {
        return Err(IngestError::Invalid(structural));
    }
    let g = infer_shapes(&g).map_err(|e| IngestError::Invalid(vec![e]))?;
    let g = normalize_transposes(g).map_err(|e| IngestError::Invalid(vec![e]))?;
    let errors = validate_graph(&g);
    if !errors.is_empty() {
        return Err(IngestError::Invalid(errors));
    }
    Ok(g)
}

/// Validation errors that make shape inference impossible.
fn validate_structure(g: &Graph) -> Vec<ValidationError> {
    validate_graph(g)
        .into_iter()
        .filter(|e| {
            !matches!(
                e,
                ValidationError::Shape { .. } | ValidationError::Dtype { .. } | ValidationError::ContractionMismatch { .. } | ValidationError::EmptyDim(_)
            )
        })
        .collect()
}

/// Rewrites `MatMul(transpose_a/b)` into explicit Transpose ops feeding a
/// non-transposed MatMul.
pub fn normalize_transposes(mut g: Graph) -> Result<Graph, ValidationError> {
    let matmuls: Vec<OpId> = g.ops.iter().filter(|o| o.kind == OpKind::MatMul).map(|o| o.id).collect();
    for id in matmuls {
        for (slot, key) in [(0usize, "transpose_a"), (1, "transpose_b")] {
            let op = g.op(id).clone();
            if op.attr_bool(key) != Some(true) {
                g.op_mut(id).attrs.remove(key);
                continue;
            }
            let src = op.inputs[slot];
            let lt = g.tensor(src).clone();
            let mut shape = lt.shape.clone();
            let r = shape.len();
            shape.swap(r - 1, r - 2);
            let out = g.add_tensor(lt.dtype, shape, lt.property);
            g.add_op(OpKind::Transpose, Attrs::new(), vec![src], vec![out]);
            let m = g.op_mut(id);
            m.inputs[slot] = out;
            m.attrs.remove(key);
        }
    }
    g.sort_ops()?;
    infer_shapes(&g)
}

/// Deterministic JSON rendering of a graph (ops in graph order, tensors by id).
pub fn graph_to_json(g: &Graph) -> serde_json::Value {
    let tensors: Vec<RawTensor> = g
        .tensors
        .values()
        .map(|lt| RawTensor {
            id: lt.id,
            dtype: Some(lt.dtype),
            shape: Some(lt.shape.clone()),
            property: lt.property,
            data: g.const_data.get(&lt.id).map(|v| (0..v.numel()).map(|i| v.get_f64(i)).collect()),
            layout: (!lt.layout.is_plain()).then(|| lt.layout.clone()),
        })
        .collect();
    let raw = RawGraph { tensors, ops: g.ops.clone(), inputs: g.inputs.clone(), outputs: g.outputs.clone() };
    serde_json::to_value(&raw).expect("graph serializes")
}

pub fn graph_to_string(g: &Graph) -> String {
    serde_json::to_string_pretty(&graph_to_json(g)).expect("graph serializes")
}
