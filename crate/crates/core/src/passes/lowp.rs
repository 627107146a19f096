//! Int8 rewrite of dequantize -> f32 matmul chains.
//!
//! `MatMul(Mul(Sub(Cast(A_q), a_z), a_s), Mul(Cast(B_q), b_s))` becomes
//! `Mul(Cast(MatMul_s32(A_q, B_q) - a_z * colsum(B_q)), a_s * b_s)`. A following
//! quantize divides by `c_s`, which cleanup folds into the same scale literal.

use crate::graph::{AttrValue, Attrs, DataType, Graph, OpId, OpKind, TensorId, TensorProperty};
use crate::value::DenseValue;

/// One dequantized matmul operand: `(q - zero) * scale`.
struct DqOperand {
    q: TensorId,
    zero: f64,
    scale: TensorId,
}

fn scalar_literal(g: &Graph, t: TensorId) -> Option<f64> {
    let v = g.const_data.get(&t)?;
    (v.numel() == 1).then(|| v.get_f64(0))
}

fn producer(g: &Graph, t: TensorId) -> Option<&crate::graph::Op> {
    g.ops.iter().find(|o| o.outputs.contains(&t))
}

fn match_operand(g: &Graph, t: TensorId, want: DataType) -> Option<DqOperand> {
    let mul = producer(g, t).filter(|o| o.kind == OpKind::Mul)?;
    let scale = mul.inputs[1];
    if !g.is_literal(scale) {
        return None;
    }
    let mut inner = producer(g, mul.inputs[0])?;
    let mut zero = 0.0;
    if inner.kind == OpKind::Sub {
        zero = scalar_literal(g, inner.inputs[1])?;
        if zero.fract() != 0.0 {
            return None;
        }
        inner = producer(g, inner.inputs[0])?;
    }
    if inner.kind != OpKind::Cast || g.tensor(inner.inputs[0]).dtype != want {
        return None;
    }
    Some(DqOperand { q: inner.inputs[0], zero, scale })
}

fn cast_attr(to: DataType) -> Attrs {
    Attrs::from([("to".to_string(), AttrValue::Str(to.name().into()))])
}

/// Rewrites every matching f32 MatMul. Returns the new graph and one note per
/// matmul examined.
pub fn low_precision_convert(g: &Graph) -> (Graph, Vec<String>) {
    let mut g = g.clone();
    let mut notes = Vec::new();
    let matmuls: Vec<OpId> = g.ops.iter().filter(|o| o.kind == OpKind::MatMul).map(|o| o.id).collect();
    for id in matmuls {
        let mm = g.op(id).clone();
        if g.tensor(mm.output()).dtype != DataType::F32 {
            continue;
        }
        let (Some(a), Some(b)) = (match_operand(&g, mm.inputs[0], DataType::U8), match_operand(&g, mm.inputs[1], DataType::S8)) else {
            notes.push(format!("{id}: pattern not found"));
            continue;
        };
        if !g.tensor(b.q).is_constant() {
            notes.push(format!("{id}: non-constant weight, rewrite skipped"));
            continue;
        }
        if b.zero != 0.0 {
            notes.push(format!("{id}: weight zero point {} unsupported, rewrite skipped", b.zero));
            continue;
        }
        let (Some(a_s), Some(bs)) = (scalar_literal(&g, a.scale), g.const_data.get(&b.scale).cloned()) else {
            notes.push(format!("{id}: activation scale is not a scalar literal, rewrite skipped"));
            continue;
        };
        let out_shape = g.tensor(mm.output()).shape.clone();
        let n = *out_shape.last().unwrap();
        let bs_vals: Vec<f32> = (0..bs.numel()).map(|i| bs.get_f64(i) as f32).collect();
        let per_channel = bs_vals.len() == n && n > 1 && bs.shape.iter().rev().skip(1).all(|&d| d == 1) && bs.shape.last() == Some(&n);
        if bs_vals.len() != 1 && !per_channel {
            notes.push(format!("{id}: weight scale is not per output channel, rewrite skipped"));
            continue;
        }
        g.ops.retain(|o| o.id != id);
        let acc = g.add_tensor(DataType::S32, out_shape.clone(), TensorProperty::Variable);
        g.add_op(OpKind::MatMul, Attrs::new(), vec![a.q, b.q], vec![acc]);
        let mut acc_c = acc;
        if a.zero != 0.0 {
            let bq_shape = g.tensor(b.q).shape.clone();
            let bc = g.add_tensor(DataType::S32, bq_shape.clone(), TensorProperty::Constant);
            g.add_op(OpKind::Cast, cast_attr(DataType::S32), vec![b.q], vec![bc]);
            let mut cs_shape = bq_shape;
            let r = cs_shape.len();
            cs_shape[r - 2] = 1;
            let cs = g.add_tensor(DataType::S32, cs_shape.clone(), TensorProperty::Constant);
            let red = Attrs::from([("axis".to_string(), AttrValue::Int(-2)), ("keepdims".to_string(), AttrValue::Bool(true))]);
            g.add_op(OpKind::ReduceSum, red, vec![bc], vec![cs]);
            let az = g.add_literal(DenseValue::s32(vec![1], vec![a.zero as i32]));
            let comp = g.add_tensor(DataType::S32, cs_shape, TensorProperty::Constant);
            g.add_op(OpKind::Mul, Attrs::new(), vec![cs, az], vec![comp]);
            acc_c = g.add_tensor(DataType::S32, out_shape.clone(), TensorProperty::Variable);
            g.add_op(OpKind::Sub, Attrs::new(), vec![acc, comp], vec![acc_c]);
        }
        let f = g.add_tensor(DataType::F32, out_shape.clone(), TensorProperty::Variable);
        g.add_op(OpKind::Cast, cast_attr(DataType::F32), vec![acc_c], vec![f]);
        let a_s32 = a_s as f32;
        let scale: Vec<f32> = bs_vals.iter().map(|&v| a_s32 * v).collect();
        let lit = g.add_literal(DenseValue::f32(vec![scale.len()], scale));
        g.add_op(OpKind::Mul, Attrs::new(), vec![f, lit], vec![mm.output()]);
        notes.push(format!("{id}: rewritten to u8 x s8 -> s32 (a_z = {})", a.zero));
    }
    g.sort_ops().expect("rewrite keeps the graph acyclic");
    let mut g = crate::graph::infer_shapes(&g).expect("rewrite keeps shapes valid");
    super::cleanup(&mut g);
    (g, notes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::eval_graph;
    use crate::passes::decompose_complex;
    use std::collections::BTreeMap;

    /// Dequantize both operands, f32 matmul, quantize: the running example.
    fn qmm(a_z: f64, b_s: Vec<f64>, n: usize) -> Graph {
        let mut g = Graph::new();
        let aq = g.add_tensor(DataType::U8, vec![1, 2], TensorProperty::Variable);
        let bq = g.add_tensor(DataType::S8, vec![2, n], TensorProperty::Constant);
        let af = g.add_tensor(DataType::F32, vec![1, 2], TensorProperty::Variable);
        let bf = g.add_tensor(DataType::F32, vec![2, n], TensorProperty::Variable);
        let c = g.add_tensor(DataType::F32, vec![1, n], TensorProperty::Variable);
        let q = g.add_tensor(DataType::U8, vec![1, n], TensorProperty::Variable);
        let dqa = Attrs::from([("scale".into(), AttrValue::Float(0.5)), ("zero_point".into(), AttrValue::Float(a_z))]);
        let dqb = Attrs::from([("scale".into(), AttrValue::Floats(b_s)), ("axis".into(), AttrValue::Int(1))]);
        let qa = Attrs::from([("scale".into(), AttrValue::Float(1.0)), ("to".into(), AttrValue::Str("u8".into()))]);
        g.add_op(OpKind::Dequantize, dqa, vec![aq], vec![af]);
        g.add_op(OpKind::Dequantize, dqb, vec![bq], vec![bf]);
        g.add_op(OpKind::MatMul, Attrs::new(), vec![af, bf], vec![c]);
        g.add_op(OpKind::Quantize, qa, vec![c], vec![q]);
        g.inputs = vec![aq, bq];
        g.outputs = vec![q];
        crate::graph::infer_shapes(&g).unwrap()
    }

    fn lower(g: &Graph) -> Graph {
        let mut d = decompose_complex(g, false).unwrap();
        crate::passes::cleanup(&mut d);
        low_precision_convert(&d).0
    }

    #[test]
    fn running_example_gives_18() {
        let g = qmm(1.0, vec![2.0], 1);
        let r = lower(&g);
        assert_eq!(r.ops.iter().filter(|o| o.kind == OpKind::MatMul).count(), 1);
        let mm = r.ops.iter().find(|o| o.kind == OpKind::MatMul).unwrap();
        assert_eq!(r.tensor(mm.output()).dtype, DataType::S32);
        let ins = BTreeMap::from([(g.inputs[0], DenseValue::u8(vec![1, 2], vec![2, 4])), (g.inputs[1], DenseValue::s8(vec![2, 1], vec![3, 5]))]);
        let want = eval_graph(&g, &ins).unwrap();
        let got = eval_graph(&r, &ins).unwrap();
        assert_eq!(want, got);
        assert_eq!(got.values().next().unwrap(), &DenseValue::u8(vec![1, 1], vec![18]));
    }

    #[test]
    fn zero_point_zero_drops_compensation() {
        let r = lower(&qmm(0.0, vec![2.0], 1));
        assert_eq!(r.count_kind(OpKind::Sub), 0);
        assert_eq!(r.count_kind(OpKind::ReduceSum), 0);
    }

    #[test]
    fn per_channel_scale() {
        let g = qmm(0.0, vec![1.0, 2.0], 2);
        let r = lower(&g);
        let ins = BTreeMap::from([(g.inputs[0], DenseValue::u8(vec![1, 2], vec![2, 4])), (g.inputs[1], DenseValue::s8(vec![2, 2], vec![3, 1, 5, 2]))]);
        assert_eq!(eval_graph(&g, &ins).unwrap(), eval_graph(&r, &ins).unwrap());
    }

    #[test]
    fn variable_weight_is_skipped() {
        let mut g = qmm(1.0, vec![2.0], 1);
        let bq = g.inputs[1];
        g.tensor_mut(bq).property = TensorProperty::Variable;
        let mut d = decompose_complex(&g, false).unwrap();
        crate::passes::cleanup(&mut d);
        let (r, notes) = low_precision_convert(&d);
        assert!(notes[0].contains("non-constant"));
        assert_eq!(r.count_kind(OpKind::MatMul), 1);
        assert!(r.ops.iter().all(|o| o.kind != OpKind::MatMul || r.tensor(o.output()).dtype == DataType::F32));
    }
}
