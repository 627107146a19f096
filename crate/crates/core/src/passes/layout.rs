//! Blocked-layout assignment around matmuls.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::graph::shape::{batch_count, rows_cols};
use crate::graph::{Attrs, Graph, LayoutDesc, OpId, OpKind, TensorId};
use crate::template::{choose_params, desired_layouts, MachineModel, MatmulParams};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InsertedReorder {
    pub op: OpId,
    pub src: TensorId,
    pub dst: TensorId,
    pub from: String,
    pub to: String,
    pub reason: &'static str,
}

/// Template parameters for every MatMul, keyed by op id.
pub fn matmul_params(g: &Graph, mm: &MachineModel) -> BTreeMap<OpId, MatmulParams> {
    g.ops
        .iter()
        .filter(|o| o.kind == OpKind::MatMul)
        .map(|o| {
            let a = g.tensor(o.inputs[0]);
            let b = g.tensor(o.inputs[1]);
            let (m, k) = rows_cols(&a.shape);
            let n = rows_cols(&b.shape).1;
            (o.id, choose_params(m, n, k, batch_count(&a.shape), a.dtype, mm))
        })
        .collect()
}

/// Gives every MatMul operand its desired blocked layout, inserting Reorders
/// where the producer's layout differs, and restores plain layout at graph
/// outputs. Elementwise ops inherit the layout of a same-shaped input.
pub fn propagate_layouts(g: &Graph, params: &BTreeMap<OpId, MatmulParams>) -> (Graph, Vec<InsertedReorder>) {
    let mut g = g.clone();
    let mut inserted = Vec::new();
    let mut cache: BTreeMap<(TensorId, LayoutDesc), TensorId> = BTreeMap::new();
    let order: Vec<OpId> = g.ops.iter().map(|o| o.id).collect();
    let mut reorder = |g: &mut Graph, src: TensorId, to: LayoutDesc, reason: &'static str, inserted: &mut Vec<InsertedReorder>| -> TensorId {
        if let Some(&t) = cache.get(&(src, to.clone())) {
            return t;
        }
        let lt = g.tensor(src).clone();
        let dst = g.add_tensor(lt.dtype, lt.shape.clone(), lt.property);
        g.tensor_mut(dst).layout = to.clone();
        let op = g.add_op(OpKind::Reorder, Attrs::new(), vec![src], vec![dst]);
        inserted.push(InsertedReorder { op, src, dst, from: lt.layout.to_string(), to: to.to_string(), reason });
        cache.insert((src, to), dst);
        dst
    };
    for id in order {
        let op = g.op(id).clone();
        let out = op.output();
        let layout = match op.kind {
            OpKind::MatMul => {
                let p = &params[&id];
                let rank = g.tensor(out).shape.len();
                let (la, lb, lc) = desired_layouts(p, rank);
                for (slot, want) in [(0, la), (1, lb)] {
                    let src = op.inputs[slot];
                    if g.tensor(src).layout != want {
                        let reason = if g.is_graph_input(src) || g.is_literal(src) { "entry" } else { "internal" };
                        let t = reorder(&mut g, src, want, reason, &mut inserted);
                        g.op_mut(id).inputs[slot] = t;
                    }
                }
                lc
            }
            OpKind::Reorder => g.tensor(out).layout.clone(),
            k if k.is_elementwise() => {
                let shape = &g.tensor(out).shape;
                op.inputs.iter().map(|&t| g.tensor(t)).find(|t| &t.shape == shape && t.layout.is_blocked()).map_or(LayoutDesc::Plain, |t| t.layout.clone())
            }
            _ => LayoutDesc::Plain,
        };
        if matches!(op.kind, OpKind::Transpose | OpKind::Broadcast) {
            // these are only lowered for plain operands
            for (slot, &src) in op.inputs.iter().enumerate() {
                if g.tensor(src).layout.is_blocked() {
                    let t = reorder(&mut g, src, LayoutDesc::Plain, "internal", &mut inserted);
                    g.op_mut(id).inputs[slot] = t;
                }
            }
        } else if op.kind.is_elementwise() && layout.is_blocked() {
            // every operand must agree with the blocked result or broadcast onto it
            let out_shape = g.tensor(out).shape.clone();
            for (slot, &src) in op.inputs.iter().enumerate() {
                let lt = g.tensor(src);
                let full = lt.shape.len() == out_shape.len() && lt.shape[lt.shape.len() - 2..] == out_shape[out_shape.len() - 2..];
                if full && lt.layout != layout {
                    let t = reorder(&mut g, src, layout.clone(), "internal", &mut inserted);
                    g.op_mut(id).inputs[slot] = t;
                } else if !full && lt.layout.is_blocked() {
                    let t = reorder(&mut g, src, LayoutDesc::Plain, "internal", &mut inserted);
                    g.op_mut(id).inputs[slot] = t;
                }
            }
        }
        g.tensor_mut(out).layout = layout;
    }
    let outs = g.outputs.clone();
    for (i, t) in outs.into_iter().enumerate() {
        if g.tensor(t).layout.is_blocked() {
            let p = reorder(&mut g, t, LayoutDesc::Plain, "exit", &mut inserted);
            g.outputs[i] = p;
        }
    }
    g.sort_ops().expect("layout propagation keeps the graph acyclic");
    (g, inserted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DataType, TensorProperty};

    fn chain(dims: &[usize], relu: bool) -> Graph {
        let mut g = Graph::new();
        let mut x = g.add_tensor(DataType::F32, vec![dims[0], dims[1]], TensorProperty::Variable);
        g.inputs.push(x);
        for w in dims[1..].windows(2) {
            let wt = g.add_tensor(DataType::F32, vec![w[0], w[1]], TensorProperty::Constant);
            g.inputs.push(wt);
            let y = g.add_tensor(DataType::F32, vec![dims[0], w[1]], TensorProperty::Variable);
            g.add_op(OpKind::MatMul, Attrs::new(), vec![x, wt], vec![y]);
            x = y;
            if relu {
                let r = g.add_tensor(DataType::F32, vec![dims[0], w[1]], TensorProperty::Variable);
                g.add_op(OpKind::ReLU, Attrs::new(), vec![x], vec![r]);
                x = r;
            }
        }
        g.outputs = vec![x];
        g
    }

    #[test]
    fn single_matmul_three_reorders() {
        let g = chain(&[64, 64, 64], false);
        let p = matmul_params(&g, &MachineModel::default());
        let (out, ins) = propagate_layouts(&g, &p);
        assert_eq!(ins.len(), 3);
        assert_eq!(ins.iter().filter(|r| r.reason == "exit").count(), 1);
        let weight = ins.iter().find(|r| r.src == g.inputs[1]).unwrap();
        assert!(out.tensor(weight.dst).is_constant());
        assert!(out.tensor(out.outputs[0]).layout.is_plain());
    }

    #[test]
    fn matching_blocks_need_no_internal_reorder() {
        let g = chain(&[64, 64, 64, 64], true);
        let mut p = matmul_params(&g, &MachineModel::default());
        for v in p.values_mut() {
            *v = MatmulParams::new((64, 64, 64), 1, DataType::F32, (32, 32, 32), 2, (1, 1), Default::default()).unwrap();
        }
        let (_, ins) = propagate_layouts(&g, &p);
        assert_eq!(ins.iter().filter(|r| r.reason == "internal").count(), 0);
    }

    #[test]
    fn mismatched_blocks_insert_one_reorder() {
        let g = chain(&[64, 64, 64, 64], true);
        let mut p = matmul_params(&g, &MachineModel::default());
        let ids: Vec<OpId> = p.keys().copied().collect();
        p.insert(ids[0], MatmulParams::new((64, 64, 64), 1, DataType::F32, (32, 32, 32), 2, (1, 1), Default::default()).unwrap());
        p.insert(ids[1], MatmulParams::new((64, 64, 64), 1, DataType::F32, (32, 32, 64), 1, (1, 1), Default::default()).unwrap());
        let (_, ins) = propagate_layouts(&g, &p);
        assert_eq!(ins.iter().filter(|r| r.reason == "internal").count(), 1);
    }
}
