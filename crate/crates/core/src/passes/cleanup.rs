//! Generic cleanups run after every pass: dead-op elimination, identity and
//! broadcast elision, literal folding and elementwise CSE.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::shape::broadcast_shapes;
use crate::graph::{infer_shapes, Attrs, DataType, Graph, OpId, OpKind, TensorId};
use crate::oracle::eval_op;
use crate::value::DenseValue;

/// Literal results larger than this many elements are not folded.
pub const FOLD_LIMIT: usize = 1 << 16;

pub fn cleanup(g: &mut Graph) {
    loop {
        let changed = dead_ops(g) | elide_identities(g) | elide_broadcasts(g) | fold_literals(g) | fold_scale_chains(g) | cse(g);
        if !changed {
            break;
        }
    }
    g.prune_tensors();
    g.sort_ops().expect("cleanup keeps the graph acyclic");
    *g = infer_shapes(g).expect("cleanup keeps shapes valid");
}

fn dead_ops(g: &mut Graph) -> bool {
    let mut changed = false;
    loop {
        let used: BTreeSet<TensorId> = g.ops.iter().flat_map(|o| o.inputs.iter().copied()).chain(g.outputs.iter().copied()).collect();
        let before = g.ops.len();
        g.ops.retain(|o| o.outputs.iter().any(|t| used.contains(t)));
        if g.ops.len() == before {
            return changed;
        }
        changed = true;
    }
}

fn literal_all(g: &Graph, t: TensorId, v: f64) -> bool {
    g.const_data.get(&t).is_some_and(|d| (0..d.numel()).all(|i| d.get_f64(i) == v))
}

/// Removes `x + 0`, `x - 0`, `x * 1`, `x / 1` and same-layout reorders.
fn elide_identities(g: &mut Graph) -> bool {
    let mut changed = false;
    let ids: Vec<OpId> = g.ops.iter().map(|o| o.id).collect();
    for id in ids {
        let op = g.op(id).clone();
        let out = op.output();
        if g.is_graph_output(out) {
            continue;
        }
        let keep = match op.kind {
            OpKind::Add if literal_all(g, op.inputs[0], 0.0) => Some(op.inputs[1]),
            OpKind::Add | OpKind::Sub if literal_all(g, op.inputs[1], 0.0) => Some(op.inputs[0]),
            OpKind::Mul if literal_all(g, op.inputs[0], 1.0) => Some(op.inputs[1]),
            OpKind::Mul | OpKind::Div if literal_all(g, op.inputs[1], 1.0) => Some(op.inputs[0]),
            OpKind::Reorder if g.tensor(op.inputs[0]).layout == g.tensor(out).layout => Some(op.inputs[0]),
            _ => None,
        };
        if let Some(src) = keep {
            let (s, o) = (g.tensor(src), g.tensor(out));
            if s.shape == o.shape && s.dtype == o.dtype && s.layout == o.layout {
                g.replace_uses(out, src);
                g.ops.retain(|o| o.id != id);
                changed = true;
            }
        }
    }
    changed
}

/// Drops explicit Broadcasts whose consumers are all binary elementwise ops
/// that broadcast implicitly to the same result shape.
fn elide_broadcasts(g: &mut Graph) -> bool {
    let mut changed = false;
    let consumers = g.consumers();
    let ids: Vec<OpId> = g.ops.iter().filter(|o| o.kind == OpKind::Broadcast).map(|o| o.id).collect();
    for id in ids {
        let op = g.op(id).clone();
        let (src, out) = (op.inputs[0], op.output());
        if g.is_graph_output(out) {
            continue;
        }
        let src_shape = g.tensor(src).shape.clone();
        let users = consumers.get(&out).cloned().unwrap_or_default();
        let ok = !users.is_empty()
            && users.iter().all(|&u| {
                let uop = g.op(u);
                if !uop.kind.is_binary_elementwise() {
                    return false;
                }
                let other = if uop.inputs[0] == out { uop.inputs[1] } else { uop.inputs[0] };
                if other == out {
                    return false;
                }
                let other_shape = &g.tensor(other).shape;
                broadcast_shapes(other_shape, &src_shape).as_deref() == Some(g.tensor(uop.output()).shape.as_slice())
            });
        if ok {
            g.replace_uses(out, src);
            g.ops.retain(|o| o.id != id);
            changed = true;
        }
    }
    changed
}

/// Evaluates ops whose inputs are all compile-time literals.
fn fold_literals(g: &mut Graph) -> bool {
    let mut changed = false;
    let ids: Vec<OpId> = g.ops.iter().map(|o| o.id).collect();
    for id in ids {
        let op = g.op(id).clone();
        let out = op.output();
        if g.is_graph_output(out) || !op.inputs.iter().all(|t| g.is_literal(*t)) || g.tensor(out).numel() > FOLD_LIMIT {
            continue;
        }
        let args: Vec<&DenseValue> = op.inputs.iter().map(|t| &g.const_data[t]).collect();
        let Ok(v) = eval_op(&op, &args) else { continue };
        g.ops.retain(|o| o.id != id);
        g.const_data.insert(out, v);
        g.tensor_mut(out).property = crate::graph::TensorProperty::Constant;
        changed = true;
    }
    changed
}

/// `(x * c1) * c2 -> x * (c1 * c2)` and `(x * c1) / c2 -> x * (c1 / c2)` for
/// f32 literals, when the intermediate has no other use.
fn fold_scale_chains(g: &mut Graph) -> bool {
    let consumers = g.consumers();
    let producers = g.producers();
    let ids: Vec<OpId> = g.ops.iter().map(|o| o.id).collect();
    for id in ids {
        let op = g.op(id).clone();
        if !matches!(op.kind, OpKind::Mul | OpKind::Div) || !g.is_literal(op.inputs[1]) {
            continue;
        }
        let mid = op.inputs[0];
        if g.tensor(mid).dtype != DataType::F32 || g.is_graph_output(mid) || consumers.get(&mid).map_or(0, |c| c.len()) != 1 {
            continue;
        }
        let Some(&pid) = producers.get(&mid) else { continue };
        let prev = g.op(pid).clone();
        if prev.kind != OpKind::Mul || !g.is_literal(prev.inputs[1]) || g.is_literal(prev.inputs[0]) {
            continue;
        }
        let (c1, c2) = (&g.const_data[&prev.inputs[1]], &g.const_data[&op.inputs[1]]);
        let combine = crate::graph::Op { id, kind: op.kind, attrs: Attrs::new(), inputs: vec![], outputs: vec![] };
        let Ok(c) = eval_op(&combine, &[c1, c2]) else { continue };
        let x = prev.inputs[0];
        let out_shape = g.tensor(op.output()).shape.clone();
        if broadcast_shapes(&g.tensor(x).shape, &c.shape).as_deref() != Some(out_shape.as_slice()) {
            continue;
        }
        let lit = g.add_literal(c);
        let o = g.op_mut(id);
        o.kind = OpKind::Mul;
        o.inputs = vec![x, lit];
        return true;
    }
    false
}

/// Merges identical elementwise ops with identical inputs.
fn cse(g: &mut Graph) -> bool {
    let mut seen: BTreeMap<(OpKind, String, Vec<TensorId>), TensorId> = BTreeMap::new();
    let mut changed = false;
    let ids: Vec<OpId> = g.ops.iter().map(|o| o.id).collect();
    for id in ids {
        let op = g.op(id).clone();
        if !op.kind.is_elementwise() {
            continue;
        }
        let key = (op.kind, format!("{:?}", op.attrs), op.inputs.clone());
        let out = op.output();
        match seen.get(&key) {
            Some(&prev) if !g.is_graph_output(out) && g.tensor(prev).layout == g.tensor(out).layout => {
                g.replace_uses(out, prev);
                g.ops.retain(|o| o.id != id);
                changed = true;
            }
            Some(_) => {}
            None => {
                seen.insert(key, out);
            }
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TensorProperty;

    #[test]
    fn removes_dead_and_identity() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![2, 2], TensorProperty::Variable);
        let zero = g.add_literal(DenseValue::f32(vec![1], vec![0.0]));
        let a = g.add_tensor(DataType::F32, vec![2, 2], TensorProperty::Variable);
        let dead = g.add_tensor(DataType::F32, vec![2, 2], TensorProperty::Variable);
        let y = g.add_tensor(DataType::F32, vec![2, 2], TensorProperty::Variable);
        g.add_op(OpKind::Sub, Attrs::new(), vec![x, zero], vec![a]);
        g.add_op(OpKind::Exp, Attrs::new(), vec![x], vec![dead]);
        g.add_op(OpKind::ReLU, Attrs::new(), vec![a], vec![y]);
        g.inputs = vec![x];
        g.outputs = vec![y];
        cleanup(&mut g);
        assert_eq!(g.ops.len(), 1);
        assert_eq!(g.ops[0].inputs, vec![x]);
    }

    #[test]
    fn folds_mul_then_div() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![2, 2], TensorProperty::Variable);
        let c1 = g.add_literal(DenseValue::f32(vec![2], vec![2.0, 4.0]));
        let c2 = g.add_literal(DenseValue::f32(vec![1], vec![2.0]));
        let a = g.add_tensor(DataType::F32, vec![2, 2], TensorProperty::Variable);
        let y = g.add_tensor(DataType::F32, vec![2, 2], TensorProperty::Variable);
        g.add_op(OpKind::Mul, Attrs::new(), vec![x, c1], vec![a]);
        g.add_op(OpKind::Div, Attrs::new(), vec![a, c2], vec![y]);
        g.inputs = vec![x];
        g.outputs = vec![y];
        cleanup(&mut g);
        assert_eq!(g.ops.len(), 1);
        let lit = g.ops[0].inputs[1];
        assert_eq!(g.const_data[&lit].as_f32().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn cse_merges_twins() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![3], TensorProperty::Variable);
        let a = g.add_tensor(DataType::F32, vec![3], TensorProperty::Variable);
        let b = g.add_tensor(DataType::F32, vec![3], TensorProperty::Variable);
        let y = g.add_tensor(DataType::F32, vec![3], TensorProperty::Variable);
        g.add_op(OpKind::Exp, Attrs::new(), vec![x], vec![a]);
        g.add_op(OpKind::Exp, Attrs::new(), vec![x], vec![b]);
        g.add_op(OpKind::Add, Attrs::new(), vec![a, b], vec![y]);
        g.inputs = vec![x];
        g.outputs = vec![y];
        cleanup(&mut g);
        assert_eq!(g.count_kind(OpKind::Exp), 1);
    }
}
