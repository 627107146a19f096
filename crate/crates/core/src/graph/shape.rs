//! Static shape and dtype inference.

use crate::graph::{DataType, Graph, Op, OpKind, TensorProperty};

use super::ValidationError;

/// Numpy-style broadcast of two shapes, right-aligned.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Normalizes a possibly negative axis.
pub fn norm_axis(axis: i64, rank: usize) -> Option<usize> {
    let a = if axis < 0 { axis + rank as i64 } else { axis };
    (a >= 0 && (a as usize) < rank).then_some(a as usize)
}

/// Output (dtype, shape) of `op` given its input metadata.
pub fn op_output(g: &Graph, op: &Op) -> Result<(DataType, Vec<usize>), ValidationError> {
    let err = |msg: String| ValidationError::Shape { op: op.id, msg };
    let input = |i: usize| -> Result<(DataType, Vec<usize>), ValidationError> {
        let t = op.inputs.get(i).ok_or_else(|| err(format!("missing input {i}")))?;
        let lt = g.tensors.get(t).ok_or(ValidationError::Dangling { op: op.id, tensor: *t })?;
        Ok((lt.dtype, lt.shape.clone()))
    };
    use OpKind::*;
    match op.kind {
        MatMul => {
            let (da, a) = input(0)?;
            let (db, b) = input(1)?;
            if a.len() < 2 || b.len() < 2 {
                return Err(err("matmul operands must have rank >= 2".into()));
            }
            if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
                return Err(err(format!("batch dims differ: {a:?} vs {b:?}")));
            }
            let (ta, tb) = (op.attr_bool("transpose_a").unwrap_or(false), op.attr_bool("transpose_b").unwrap_or(false));
            let r = a.len();
            let (m, ka) = if ta { (a[r - 1], a[r - 2]) } else { (a[r - 2], a[r - 1]) };
            let (kb, n) = if tb { (b[r - 1], b[r - 2]) } else { (b[r - 2], b[r - 1]) };
            if ka != kb {
                return Err(ValidationError::ContractionMismatch { op: op.id, k_a: ka, k_b: kb });
            }
            let dtype = match (da, db) {
                (DataType::F32, DataType::F32) => DataType::F32,
                (DataType::U8, DataType::S8) => DataType::S32,
                _ => return Err(ValidationError::Dtype { op: op.id, msg: format!("unsupported matmul dtypes {da} x {db}") }),
            };
            let mut shape = a[..r - 2].to_vec();
            shape.extend([m, n]);
            Ok((dtype, shape))
        }
        Add | Sub | Mul | Div | Max | Min => {
            let (da, a) = input(0)?;
            let (db, b) = input(1)?;
            if da != db {
                return Err(ValidationError::Dtype { op: op.id, msg: format!("operand dtypes differ: {da} vs {db}") });
            }
            let shape = broadcast_shapes(&a, &b).ok_or_else(|| err(format!("cannot broadcast {a:?} with {b:?}")))?;
            Ok((da, shape))
        }
        ReLU | Clamp => input(0),
        Exp | Round => {
            let (d, s) = input(0)?;
            if d != DataType::F32 {
                return Err(ValidationError::Dtype { op: op.id, msg: format!("{} requires f32", op.kind) });
            }
            Ok((d, s))
        }
        Cast => {
            let (_, s) = input(0)?;
            let to = op.attr_dtype("to").ok_or_else(|| err("Cast requires attr `to`".into()))?;
            Ok((to, s))
        }
        Broadcast => {
            let (d, s) = input(0)?;
            let target: Vec<usize> =
                op.attr_ints("shape").ok_or_else(|| err("Broadcast requires attr `shape`".into()))?.into_iter().map(|x| x as usize).collect();
            match broadcast_shapes(&s, &target) {
                Some(out) if out == target => Ok((d, target)),
                _ => Err(err(format!("cannot broadcast {s:?} to {target:?}"))),
            }
        }
        ReduceSum | ReduceMax => {
            let (d, mut s) = input(0)?;
            let axis = op.attr_int("axis").unwrap_or(-1);
            let ax = norm_axis(axis, s.len()).ok_or_else(|| err(format!("bad axis {axis}")))?;
            if op.attr_bool("keepdims").unwrap_or(true) {
                s[ax] = 1;
            } else {
                s.remove(ax);
            }
            Ok((d, s))
        }
        Reorder => input(0),
        Transpose => {
            let (d, s) = input(0)?;
            let perm = match op.attr_ints("perm") {
                Some(p) => p,
                None => {
                    // default swaps the last two axes
                    let mut p: Vec<i64> = (0..s.len() as i64).collect();
                    let r = s.len();
                    if r >= 2 {
                        p.swap(r - 1, r - 2);
                    }
                    p
                }
            };
            if perm.len() != s.len() {
                return Err(err("perm rank mismatch".into()));
            }
            let mut seen = vec![false; s.len()];
            let mut out = Vec::with_capacity(s.len());
            for &p in &perm {
                let p = norm_axis(p, s.len()).ok_or_else(|| err("bad perm".into()))?;
                if seen[p] {
                    return Err(err("perm is not a permutation".into()));
                }
                seen[p] = true;
                out.push(s[p]);
            }
            Ok((d, out))
        }
        Quantize => {
            let (d, s) = input(0)?;
            if d != DataType::F32 {
                return Err(ValidationError::Dtype { op: op.id, msg: "Quantize input must be f32".into() });
            }
            let to = op.attr_dtype("to").unwrap_or(DataType::U8);
            if !matches!(to, DataType::U8 | DataType::S8) {
                return Err(ValidationError::Dtype { op: op.id, msg: "Quantize target must be u8 or s8".into() });
            }
            Ok((to, s))
        }
        Dequantize => {
            let (d, s) = input(0)?;
            if !matches!(d, DataType::U8 | DataType::S8 | DataType::S32) {
                return Err(ValidationError::Dtype { op: op.id, msg: "Dequantize input must be an integer dtype".into() });
            }
            Ok((DataType::F32, s))
        }
        Softmax => {
            let (d, s) = input(0)?;
            if d != DataType::F32 {
                return Err(ValidationError::Dtype { op: op.id, msg: "Softmax requires f32".into() });
            }
            Ok((d, s))
        }
        BiasAdd => {
            let (da, a) = input(0)?;
            let (db, b) = input(1)?;
            if da != db {
                return Err(ValidationError::Dtype { op: op.id, msg: "BiasAdd dtypes differ".into() });
            }
            if b.len() != 1 || a.last() != b.last() {
                return Err(err(format!("bias {b:?} does not match {a:?}")));
            }
            Ok((da, a))
        }
    }
}

/// Fills dtype and shape of every op output. Graph inputs must be fully specified.
///
/// Output tensors of ops whose inputs are all constant become constant.
pub fn infer_shapes(g: &Graph) -> Result<Graph, ValidationError> {
    let mut out = g.clone();
    let order = super::topo_order(g)?;
    for id in order {
        let op = out.op(id).clone();
        let (dtype, shape) = op_output(&out, &op)?;
        let constant = op.inputs.iter().all(|t| out.tensor(*t).is_constant());
        let t = op.output();
        let lt = out.tensors.get_mut(&t).ok_or(ValidationError::Dangling { op: op.id, tensor: t })?;
        lt.dtype = dtype;
        lt.shape = shape;
        if constant {
            lt.property = TensorProperty::Constant;
        }
    }
    Ok(out)
}

/// Batch dims (all but the last two) of a shape, flattened.
pub fn batch_count(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(2)].iter().product()
}

pub fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        r => (shape[r - 2], shape[r - 1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AttrValue, Attrs};

    fn attrs(kv: &[(&str, AttrValue)]) -> Attrs {
        kv.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn matmul_first_mlp_layer() {
        let mut g = Graph::new();
        let a = g.add_tensor(DataType::F32, vec![32, 13], TensorProperty::Variable);
        let b = g.add_tensor(DataType::F32, vec![13, 512], TensorProperty::Constant);
        let c = g.add_tensor(DataType::F32, vec![], TensorProperty::Variable);
        g.add_op(OpKind::MatMul, Attrs::new(), vec![a, b], vec![c]);
        g.inputs = vec![a, b];
        g.outputs = vec![c];
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.tensor(c).shape, vec![32, 512]);
        assert_eq!(g.tensor(c).dtype, DataType::F32);
    }

    #[test]
    fn reduce_keepdim_last_axis() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![2, 4, 128, 128], TensorProperty::Variable);
        let y = g.add_tensor(DataType::F32, vec![], TensorProperty::Variable);
        g.add_op(OpKind::ReduceMax, attrs(&[("axis", AttrValue::Int(-1))]), vec![x], vec![y]);
        g.inputs = vec![x];
        g.outputs = vec![y];
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.tensor(y).shape, vec![2, 4, 128, 1]);
    }

    #[test]
    fn broadcast_row_vector() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![1, 512], TensorProperty::Variable);
        let y = g.add_tensor(DataType::F32, vec![], TensorProperty::Variable);
        g.add_op(OpKind::Broadcast, attrs(&[("shape", AttrValue::Ints(vec![32, 512]))]), vec![x], vec![y]);
        g.inputs = vec![x];
        g.outputs = vec![y];
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.tensor(y).shape, vec![32, 512]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![3, 4], TensorProperty::Variable);
        let z = g.add_tensor(DataType::F32, vec![5, 4], TensorProperty::Variable);
        let y = g.add_tensor(DataType::F32, vec![], TensorProperty::Variable);
        g.add_op(OpKind::Add, Attrs::new(), vec![x, z], vec![y]);
        g.inputs = vec![x, z];
        g.outputs = vec![y];
        assert!(infer_shapes(&g).is_err());
    }

    #[test]
    fn idempotent() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![3, 4], TensorProperty::Variable);
        let y = g.add_tensor(DataType::F32, vec![], TensorProperty::Variable);
        g.add_op(OpKind::Exp, Attrs::new(), vec![x], vec![y]);
        g.inputs = vec![x];
        g.outputs = vec![y];
        let once = infer_shapes(&g).unwrap();
        let twice = infer_shapes(&once).unwrap();
        assert_eq!(once, twice);
    }
}
