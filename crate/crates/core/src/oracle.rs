//! Naive op-by-op reference evaluator.
//!
//! Every op, including the complex ones, is evaluated directly on logical
//! row-major values. f32 matmuls and sums accumulate in f64; integer paths are
//! exact; rounding is half-to-even. Layout annotations are ignored.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::shape::{broadcast_shapes, norm_axis};
use crate::graph::{topo_order, DataType, Graph, Op, OpKind, TensorId};
use crate::value::{Data, DenseValue};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("missing value for graph input {0}")]
    MissingInput(TensorId),
    #[error("input {tensor}: expected {expected} {expected_shape:?}, got {got} {got_shape:?}")]
    InputMismatch { tensor: TensorId, expected: DataType, expected_shape: Vec<usize>, got: DataType, got_shape: Vec<usize> },
    #[error("{0}: {1}")]
    Op(String, String),
    #[error("graph is invalid: {0}")]
    Graph(String),
}

/// Evaluates `g` on `inputs`, returning the graph outputs.
pub fn eval_graph(g: &Graph, inputs: &BTreeMap<TensorId, DenseValue>) -> Result<BTreeMap<TensorId, DenseValue>, OracleError> {
    let all = eval_all(g, inputs)?;
    Ok(g.outputs.iter().map(|t| (*t, all[t].clone())).collect())
}

/// Evaluates `g` and returns the value of every tensor.
pub fn eval_all(g: &Graph, inputs: &BTreeMap<TensorId, DenseValue>) -> Result<BTreeMap<TensorId, DenseValue>, OracleError> {
    let mut env: BTreeMap<TensorId, DenseValue> = g.const_data.clone();
    for &t in &g.inputs {
        let v = inputs.get(&t).ok_or(OracleError::MissingInput(t))?;
        let lt = g.tensor(t);
        if v.dtype() != lt.dtype || v.shape != lt.shape {
            return Err(OracleError::InputMismatch {
                tensor: t,
                expected: lt.dtype,
                expected_shape: lt.shape.clone(),
                got: v.dtype(),
                got_shape: v.shape.clone(),
            });
        }
        env.insert(t, v.clone());
    }
    let order = topo_order(g).map_err(|e| OracleError::Graph(e.to_string()))?;
    for id in order {
        let op = g.op(id);
        let args: Vec<&DenseValue> = op.inputs.iter().map(|t| env.get(t).ok_or(OracleError::MissingInput(*t))).collect::<Result<_, _>>()?;
        let out = eval_op(op, &args)?;
        env.insert(op.output(), out);
    }
    Ok(env)
}

fn op_err(op: &Op, msg: impl Into<String>) -> OracleError {
    OracleError::Op(format!("{} {}", op.kind, op.id), msg.into())
}

/// Evaluates a single op on concrete argument values.
pub fn eval_op(op: &Op, args: &[&DenseValue]) -> Result<DenseValue, OracleError> {
    use OpKind::*;
    match op.kind {
        MatMul => matmul(op, args[0], args[1]),
        Add | Sub | Mul | Div | Max | Min => binary(op, op.kind, args[0], args[1]),
        BiasAdd => binary(op, Add, args[0], args[1]),
        ReLU | Exp | Round | Clamp | Cast => unary(op, args[0]),
        Broadcast => {
            let target: Vec<usize> = op.attr_ints("shape").ok_or_else(|| op_err(op, "missing shape"))?.iter().map(|&d| d as usize).collect();
            let map = broadcast_map(&target, &args[0].shape);
            Ok(gather(args[0], target, &map))
        }
        ReduceSum | ReduceMax => reduce(op, args[0]),
        Reorder => Ok(args[0].clone()),
        Transpose => transpose(op, args[0]),
        Quantize => quantize(op, args[0]),
        Dequantize => dequantize(op, args[0]),
        Softmax => softmax(op, args[0]),
    }
}

/// For each element of `out_shape`, the flat index of the broadcast source element.
pub fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let off = rank - in_shape.len();
    let in_strides = crate::graph::LayoutDesc::plain_strides(in_shape);
    let strides: Vec<usize> = (0..rank).map(|i| if i < off || in_shape[i - off] == 1 { 0 } else { in_strides[i - off] }).collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn gather(v: &DenseValue, shape: Vec<usize>, map: &[usize]) -> DenseValue {
    let data = match &v.data {
        Data::F32(x) => Data::F32(map.iter().map(|&i| x[i]).collect()),
        Data::S32(x) => Data::S32(map.iter().map(|&i| x[i]).collect()),
        Data::S8(x) => Data::S8(map.iter().map(|&i| x[i]).collect()),
        Data::U8(x) => Data::U8(map.iter().map(|&i| x[i]).collect()),
    };
    DenseValue::new(shape, data)
}

/// Wraps an integer into `dtype` two's-complement style.
pub fn wrap_int(x: i64, dtype: DataType) -> i64 {
    match dtype {
        DataType::S32 => x as i32 as i64,
        DataType::S8 => x as i8 as i64,
        DataType::U8 => x as u8 as i64,
        DataType::F32 => x,
    }
}

fn int_data(dtype: DataType, v: Vec<i64>) -> Data {
    match dtype {
        DataType::S32 => Data::S32(v.into_iter().map(|x| x as i32).collect()),
        DataType::S8 => Data::S8(v.into_iter().map(|x| x as i8).collect()),
        DataType::U8 => Data::U8(v.into_iter().map(|x| x as u8).collect()),
        DataType::F32 => Data::F32(v.into_iter().map(|x| x as f32).collect()),
    }
}

fn ints(v: &DenseValue) -> Vec<i64> {
    (0..v.numel()).map(|i| v.get_i64(i)).collect()
}

/// f32 semantics of binary elementwise ops, shared with the compiled path.
pub fn binary_f32(kind: OpKind, a: f32, b: f32) -> f32 {
    match kind {
        OpKind::Add => a + b,
        OpKind::Sub => a - b,
        OpKind::Mul => a * b,
        OpKind::Div => a / b,
        OpKind::Max => a.max(b),
        OpKind::Min => a.min(b),
        _ => unreachable!("not a binary op"),
    }
}

/// Integer semantics of binary elementwise ops (division truncates, x/0 = 0).
pub fn binary_int(kind: OpKind, a: i64, b: i64) -> i64 {
    match kind {
        OpKind::Add => a.wrapping_add(b),
        OpKind::Sub => a.wrapping_sub(b),
        OpKind::Mul => a.wrapping_mul(b),
        OpKind::Div => a.checked_div(b).unwrap_or(0),
        OpKind::Max => a.max(b),
        OpKind::Min => a.min(b),
        _ => unreachable!("not a binary op"),
    }
}

/// f32 -> integer conversion: truncate toward zero, saturate, NaN -> 0.
pub fn f32_to_int(x: f32, dtype: DataType) -> i64 {
    let (lo, hi) = dtype.int_range().expect("integer dtype");
    (x as i64).clamp(lo, hi)
}

fn binary(op: &Op, kind: OpKind, a: &DenseValue, b: &DenseValue) -> Result<DenseValue, OracleError> {
    if a.dtype() != b.dtype() {
        return Err(op_err(op, "operand dtypes differ"));
    }
    let shape = broadcast_shapes(&a.shape, &b.shape).ok_or_else(|| op_err(op, "shapes do not broadcast"))?;
    let (ma, mb) = (broadcast_map(&shape, &a.shape), broadcast_map(&shape, &b.shape));
    let data = match (&a.data, &b.data) {
        (Data::F32(x), Data::F32(y)) => Data::F32(ma.iter().zip(&mb).map(|(&i, &j)| binary_f32(kind, x[i], y[j])).collect()),
        _ => {
            let dt = a.dtype();
            let (x, y) = (ints(a), ints(b));
            int_data(dt, ma.iter().zip(&mb).map(|(&i, &j)| wrap_int(binary_int(kind, x[i], y[j]), dt)).collect())
        }
    };
    Ok(DenseValue::new(shape, data))
}

fn unary(op: &Op, x: &DenseValue) -> Result<DenseValue, OracleError> {
    let shape = x.shape.clone();
    let dt = x.dtype();
    let data = match op.kind {
        OpKind::ReLU => match &x.data {
            Data::F32(v) => Data::F32(v.iter().map(|a| a.max(0.0)).collect()),
            _ => int_data(dt, ints(x).into_iter().map(|a| a.max(0)).collect()),
        },
        OpKind::Exp => Data::F32(x.as_f32().ok_or_else(|| op_err(op, "Exp needs f32"))?.iter().map(|a| a.exp()).collect()),
        OpKind::Round => Data::F32(x.as_f32().ok_or_else(|| op_err(op, "Round needs f32"))?.iter().map(|a| a.round_ties_even()).collect()),
        OpKind::Clamp => {
            let lo = op.attr_f64("min").unwrap_or(f64::NEG_INFINITY);
            let hi = op.attr_f64("max").unwrap_or(f64::INFINITY);
            match &x.data {
                Data::F32(v) => Data::F32(v.iter().map(|a| a.max(lo as f32).min(hi as f32)).collect()),
                _ => {
                    let (l, h) = (lo.ceil().max(-9e18) as i64, hi.floor().min(9e18) as i64);
                    int_data(dt, ints(x).into_iter().map(|a| a.max(l).min(h)).collect())
                }
            }
        }
        OpKind::Cast => {
            let to = op.attr_dtype("to").ok_or_else(|| op_err(op, "missing `to`"))?;
            cast_data(x, to)
        }
        _ => unreachable!(),
    };
    Ok(DenseValue::new(shape, data))
}

fn cast_data(x: &DenseValue, to: DataType) -> Data {
    match (&x.data, to) {
        (Data::F32(v), DataType::F32) => Data::F32(v.clone()),
        (Data::F32(v), dt) => int_data(dt, v.iter().map(|&a| f32_to_int(a, dt)).collect()),
        (_, DataType::F32) => Data::F32(ints(x).into_iter().map(|a| a as f32).collect()),
        (_, dt) => int_data(dt, ints(x).into_iter().map(|a| wrap_int(a, dt)).collect()),
    }
}

fn matmul(op: &Op, a: &DenseValue, b: &DenseValue) -> Result<DenseValue, OracleError> {
    let ta = op.attr_bool("transpose_a").unwrap_or(false);
    let tb = op.attr_bool("transpose_b").unwrap_or(false);
    let r = a.shape.len();
    if r < 2 || b.shape.len() != r {
        return Err(op_err(op, "rank mismatch"));
    }
    let (ar, ac) = (a.shape[r - 2], a.shape[r - 1]);
    let (br, bc) = (b.shape[r - 2], b.shape[r - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(op_err(op, "contraction mismatch"));
    }
    let batch: usize = a.shape[..r - 2].iter().product();
    let a_at = |bt: usize, i: usize, kk: usize| bt * ar * ac + if ta { kk * ac + i } else { i * ac + kk };
    let b_at = |bt: usize, kk: usize, j: usize| bt * br * bc + if tb { j * bc + kk } else { kk * bc + j };
    let mut shape = a.shape[..r - 2].to_vec();
    shape.extend([m, n]);
    let data = match (&a.data, &b.data) {
        (Data::F32(x), Data::F32(y)) => {
            let mut out = vec![0f32; batch * m * n];
            let mut acc = vec![0f64; n];
            for bt in 0..batch {
                for i in 0..m {
                    acc.fill(0.0);
                    for kk in 0..k {
                        let av = x[a_at(bt, i, kk)] as f64;
                        for (j, s) in acc.iter_mut().enumerate() {
                            *s += av * y[b_at(bt, kk, j)] as f64;
                        }
                    }
                    for j in 0..n {
                        out[(bt * m + i) * n + j] = acc[j] as f32;
                    }
                }
            }
            Data::F32(out)
        }
        (Data::U8(x), Data::S8(y)) => {
            let mut out = vec![0i32; batch * m * n];
            let mut acc = vec![0i64; n];
            for bt in 0..batch {
                for i in 0..m {
                    acc.fill(0);
                    for kk in 0..k {
                        let av = x[a_at(bt, i, kk)] as i64;
                        for (j, s) in acc.iter_mut().enumerate() {
                            *s += av * y[b_at(bt, kk, j)] as i64;
                        }
                    }
                    for j in 0..n {
                        out[(bt * m + i) * n + j] = acc[j] as i32;
                    }
                }
            }
            Data::S32(out)
        }
        _ => return Err(op_err(op, "unsupported dtypes")),
    };
    Ok(DenseValue::new(shape, data))
}

/// (outer, axis extent, inner) split of `shape` around `axis`.
fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

fn reduce(op: &Op, x: &DenseValue) -> Result<DenseValue, OracleError> {
    let axis_attr = op.attr_int("axis").unwrap_or(-1);
    let axis = norm_axis(axis_attr, x.shape.len()).ok_or_else(|| op_err(op, "bad axis"))?;
    let keep = op.attr_bool("keepdims").unwrap_or(true);
    let (outer, ext, inner) = split3(&x.shape, axis);
    let mut shape = x.shape.clone();
    if keep {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    let sum = op.kind == OpKind::ReduceSum;
    let data = match &x.data {
        Data::F32(v) => {
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let it = (0..ext).map(|e| v[(o * ext + e) * inner + i]);
                    out.push(if sum { it.map(|a| a as f64).sum::<f64>() as f32 } else { it.fold(f32::NEG_INFINITY, f32::max) });
                }
            }
            Data::F32(out)
        }
        _ => {
            let dt = x.dtype();
            let v = ints(x);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let it = (0..ext).map(|e| v[(o * ext + e) * inner + i]);
                    out.push(wrap_int(if sum { it.sum() } else { it.max().unwrap() }, dt));
                }
            }
            int_data(dt, out)
        }
    };
    Ok(DenseValue::new(shape, data))
}

fn transpose(op: &Op, x: &DenseValue) -> Result<DenseValue, OracleError> {
    let r = x.shape.len();
    let perm: Vec<usize> = match op.attr_ints("perm") {
        Some(p) => p.iter().map(|&a| norm_axis(a, r).ok_or_else(|| op_err(op, "bad perm"))).collect::<Result<_, _>>()?,
        None => {
            let mut p: Vec<usize> = (0..r).collect();
            if r >= 2 {
                p.swap(r - 1, r - 2);
            }
            p
        }
    };
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let in_strides = crate::graph::LayoutDesc::plain_strides(&x.shape);
    let n = x.numel();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    for _ in 0..n {
        map.push((0..r).map(|d| idx[d] * in_strides[perm[d]]).sum());
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(gather(x, shape, &map))
}

/// Per-element quantization parameter lookup (scalar or along `axis`).
fn channel_params(op: &Op, shape: &[usize], key: &str, default: f64) -> Result<Vec<f64>, OracleError> {
    let vals = op.attr_floats(key).unwrap_or_else(|| vec![default]);
    if vals.len() == 1 {
        return Ok(vec![vals[0]; shape.iter().product()]);
    }
    let axis = norm_axis(op.attr_int("axis").unwrap_or(-1), shape.len()).ok_or_else(|| op_err(op, "bad axis"))?;
    if shape[axis] != vals.len() {
        return Err(op_err(op, format!("`{key}` has {} entries for axis extent {}", vals.len(), shape[axis])));
    }
    let (outer, ext, inner) = split3(shape, axis);
    let mut out = Vec::with_capacity(outer * ext * inner);
    for _ in 0..outer {
        for v in &vals {
            out.extend(std::iter::repeat_n(*v, inner));
        }
    }
    Ok(out)
}

fn quantize(op: &Op, x: &DenseValue) -> Result<DenseValue, OracleError> {
    let to = op.attr_dtype("to").unwrap_or(DataType::U8);
    let (lo, hi) = to.int_range().unwrap();
    let s = channel_params(op, &x.shape, "scale", 1.0)?;
    let z = channel_params(op, &x.shape, "zero_point", 0.0)?;
    let v = x.as_f32().ok_or_else(|| op_err(op, "Quantize needs f32"))?;
    let q: Vec<i64> = v
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let t = (a / s[i] as f32).round_ties_even() + z[i] as f32;
            f32_to_int(t.max(lo as f32).min(hi as f32), to)
        })
        .collect();
    Ok(DenseValue::new(x.shape.clone(), int_data(to, q)))
}

fn dequantize(op: &Op, x: &DenseValue) -> Result<DenseValue, OracleError> {
    let s = channel_params(op, &x.shape, "scale", 1.0)?;
    let z = channel_params(op, &x.shape, "zero_point", 0.0)?;
    let out: Vec<f32> = (0..x.numel()).map(|i| (x.get_i64(i) as f32 - z[i] as f32) * s[i] as f32).collect();
    Ok(DenseValue::f32(x.shape.clone(), out))
}

fn softmax(op: &Op, x: &DenseValue) -> Result<DenseValue, OracleError> {
    let axis = norm_axis(op.attr_int("axis").unwrap_or(-1), x.shape.len()).ok_or_else(|| op_err(op, "bad axis"))?;
    let v = x.as_f32().ok_or_else(|| op_err(op, "Softmax needs f32"))?;
    let (outer, ext, inner) = split3(&x.shape, axis);
    let mut out = vec![0f32; v.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |e: usize| (o * ext + e) * inner + i;
            let mx = (0..ext).map(|e| v[at(e)] as f64).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..ext).map(|e| (v[at(e)] as f64 - mx).exp()).sum();
            for e in 0..ext {
                out[at(e)] = ((v[at(e)] as f64 - mx).exp() / sum) as f32;
            }
        }
    }
    Ok(DenseValue::f32(x.shape.clone(), out))
}
