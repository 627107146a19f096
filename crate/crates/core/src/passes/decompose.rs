//! Rewrites complex ops into basic elementwise and reduction ops.

use crate::graph::shape::norm_axis;
use crate::graph::{AttrValue, Attrs, DataType, Graph, Op, OpCategory, OpKind, TensorId, TensorProperty};
use crate::value::DenseValue;

use super::PassError;

fn attrs(kv: &[(&str, AttrValue)]) -> Attrs {
    kv.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Scalar or per-channel quantization parameter as a broadcastable literal.
fn channel_literal(g: &mut Graph, op: &Op, key: &str, default: f64, shape: &[usize]) -> Result<TensorId, PassError> {
    let vals = op.attr_floats(key).unwrap_or_else(|| vec![default]);
    let data: Vec<f32> = vals.iter().map(|&v| v as f32).collect();
    if vals.len() == 1 {
        return Ok(g.add_literal(DenseValue::f32(vec![1], data)));
    }
    let axis = norm_axis(op.attr_int("axis").unwrap_or(-1), shape.len())
        .filter(|&a| shape[a] == vals.len())
        .ok_or_else(|| PassError::Unsupported(format!("{} {}: `{key}` does not match the channel axis", op.kind, op.id)))?;
    let mut lshape = vec![1; shape.len()];
    lshape[axis] = vals.len();
    Ok(g.add_literal(DenseValue::f32(lshape, data)))
}

/// Emits `kind(inputs)` into a fresh tensor, or into `out` when given.
fn emit(g: &mut Graph, kind: OpKind, a: Attrs, inputs: Vec<TensorId>, dtype: DataType, shape: &[usize], out: Option<TensorId>) -> TensorId {
    let t = out.unwrap_or_else(|| g.add_tensor(dtype, shape.to_vec(), TensorProperty::Variable));
    g.add_op(kind, a, inputs, vec![t]);
    t
}

/// Removes every Complex-category op. The last op of each expansion writes
/// the original output tensor, so graph outputs keep their ids.
pub fn decompose_complex(g: &Graph, fast_softmax: bool) -> Result<Graph, PassError> {
    let mut g = g.clone();
    let complex: Vec<Op> = g.ops.iter().filter(|o| o.kind.category() == OpCategory::Complex).cloned().collect();
    for op in complex {
        g.ops.retain(|o| o.id != op.id);
        let x = op.inputs[0];
        let out = op.output();
        let shape = g.tensor(x).shape.clone();
        let f = DataType::F32;
        match op.kind {
            OpKind::Quantize => {
                let to = op.attr_dtype("to").unwrap_or(DataType::U8);
                let (lo, hi) = to.int_range().unwrap();
                let s = channel_literal(&mut g, &op, "scale", 1.0, &shape)?;
                let z = channel_literal(&mut g, &op, "zero_point", 0.0, &shape)?;
                let d = emit(&mut g, OpKind::Div, Attrs::new(), vec![x, s], f, &shape, None);
                let r = emit(&mut g, OpKind::Round, Attrs::new(), vec![d], f, &shape, None);
                let a = emit(&mut g, OpKind::Add, Attrs::new(), vec![r, z], f, &shape, None);
                let clamp = attrs(&[("min", AttrValue::Float(lo as f64)), ("max", AttrValue::Float(hi as f64))]);
                let c = emit(&mut g, OpKind::Clamp, clamp, vec![a], f, &shape, None);
                emit(&mut g, OpKind::Cast, attrs(&[("to", AttrValue::Str(to.name().into()))]), vec![c], to, &shape, Some(out));
            }
            OpKind::Dequantize => {
                let s = channel_literal(&mut g, &op, "scale", 1.0, &shape)?;
                let z = channel_literal(&mut g, &op, "zero_point", 0.0, &shape)?;
                let c = emit(&mut g, OpKind::Cast, attrs(&[("to", AttrValue::Str("f32".into()))]), vec![x], f, &shape, None);
                let d = emit(&mut g, OpKind::Sub, Attrs::new(), vec![c, z], f, &shape, None);
                emit(&mut g, OpKind::Mul, Attrs::new(), vec![d, s], f, &shape, Some(out));
            }
            OpKind::Softmax => {
                let axis = op.attr_int("axis").unwrap_or(-1);
                let ax = norm_axis(axis, shape.len()).ok_or_else(|| PassError::Unsupported(format!("Softmax {}: bad axis", op.id)))?;
                let mut rshape = shape.clone();
                rshape[ax] = 1;
                let red = attrs(&[("axis", AttrValue::Int(ax as i64)), ("keepdims", AttrValue::Bool(true))]);
                let centered = if fast_softmax {
                    x
                } else {
                    let m = emit(&mut g, OpKind::ReduceMax, red.clone(), vec![x], f, &rshape, None);
                    emit(&mut g, OpKind::Sub, Attrs::new(), vec![x, m], f, &shape, None)
                };
                let e = emit(&mut g, OpKind::Exp, Attrs::new(), vec![centered], f, &shape, None);
                let s = emit(&mut g, OpKind::ReduceSum, red, vec![e], f, &rshape, None);
                emit(&mut g, OpKind::Div, Attrs::new(), vec![e, s], f, &shape, Some(out));
            }
            OpKind::BiasAdd => {
                let b = op.inputs[1];
                let dt = g.tensor(x).dtype;
                let target = AttrValue::Ints(shape.iter().map(|&d| d as i64).collect());
                let bb = emit(&mut g, OpKind::Broadcast, attrs(&[("shape", target)]), vec![b], dt, &shape, None);
                emit(&mut g, OpKind::Add, Attrs::new(), vec![x, bb], dt, &shape, Some(out));
            }
            k => return Err(PassError::Unsupported(format!("unknown complex op {k}"))),
        }
    }
    g.sort_ops().map_err(|e| PassError::Invalid(e.to_string()))?;
    crate::graph::infer_shapes(&g).map_err(|e| PassError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::eval_graph;
    use std::collections::BTreeMap;

    fn unary_graph(kind: OpKind, a: Attrs, dtype: DataType, shape: Vec<usize>) -> Graph {
        let mut g = Graph::new();
        let x = g.add_tensor(dtype, shape.clone(), TensorProperty::Variable);
        let y = g.add_tensor(DataType::F32, shape, TensorProperty::Variable);
        g.add_op(kind, a, vec![x], vec![y]);
        g.inputs = vec![x];
        g.outputs = vec![y];
        crate::graph::infer_shapes(&g).unwrap()
    }

    fn run(g: &Graph, v: DenseValue) -> DenseValue {
        let ins = BTreeMap::from([(g.inputs[0], v)]);
        eval_graph(g, &ins).unwrap().into_values().next().unwrap()
    }

    #[test]
    fn quantize_half_even() {
        let q = attrs(&[("scale", AttrValue::Float(1.0)), ("to", AttrValue::Str("u8".into()))]);
        let g = unary_graph(OpKind::Quantize, q, DataType::F32, vec![3]);
        let d = decompose_complex(&g, false).unwrap();
        assert!(d.ops.iter().all(|o| o.kind.category() != OpCategory::Complex));
        let out = run(&d, DenseValue::f32(vec![3], vec![2.49, 2.5, 3.5]));
        assert_eq!(out, DenseValue::u8(vec![3], vec![2, 2, 4]));
    }

    #[test]
    fn softmax_variants() {
        let sm = attrs(&[("axis", AttrValue::Int(-1))]);
        let g = unary_graph(OpKind::Softmax, sm, DataType::F32, vec![2]);
        let std = decompose_complex(&g, false).unwrap();
        let fast = decompose_complex(&g, true).unwrap();
        assert_eq!(fast.count_kind(OpKind::ReduceMax), 0);
        let x = DenseValue::f32(vec![2], vec![1000.0, 0.0]);
        assert_eq!(run(&std, x.clone()).as_f32().unwrap(), &[1.0, 0.0]);
        assert!(run(&fast, x).as_f32().unwrap()[0].is_nan());
        let z = unary_graph(OpKind::Softmax, Attrs::new(), DataType::F32, vec![4]);
        let out = run(&decompose_complex(&z, true).unwrap(), DenseValue::f32(vec![4], vec![0.0; 4]));
        assert_eq!(out.as_f32().unwrap(), &[0.25; 4]);
    }

    #[test]
    fn per_channel_dequantize_matches_oracle() {
        let dq = attrs(&[("scale", AttrValue::Floats(vec![0.5, 2.0])), ("zero_point", AttrValue::Floats(vec![1.0, 0.0])), ("axis", AttrValue::Int(1))]);
        let g = unary_graph(OpKind::Dequantize, dq, DataType::U8, vec![2, 2]);
        let v = DenseValue::u8(vec![2, 2], vec![3, 4, 5, 6]);
        let want = run(&g, v.clone());
        assert_eq!(run(&decompose_complex(&g, false).unwrap(), v), want);
    }
}
