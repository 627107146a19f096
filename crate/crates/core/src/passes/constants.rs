//! Splits constant-only work into a fold function that runs once.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::graph::{Graph, OpId, TensorId};

/// Ops moved to the fold function and the tensors they hand to the main graph.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConstCachePlan {
    /// Fold ops in execution order.
    pub fold_ops: Vec<OpId>,
    /// Fold outputs read by main-graph ops, with their physical byte sizes.
    pub slots: Vec<(TensorId, usize)>,
}

impl ConstCachePlan {
    pub fn is_fold_op(&self, op: OpId) -> bool {
        self.fold_ops.contains(&op)
    }

    pub fn is_slot(&self, t: TensorId) -> bool {
        self.slots.iter().any(|s| s.0 == t)
    }

    pub fn total_bytes(&self) -> usize {
        self.slots.iter().map(|s| s.1).sum()
    }
}

/// Every op whose output is a non-literal constant goes to the fold function,
/// unless it produces a graph output.
pub fn preprocess_constants(g: &Graph) -> ConstCachePlan {
    let fold_ops: Vec<OpId> = g
        .ops
        .iter()
        .filter(|o| {
            let t = o.output();
            g.tensor(t).is_constant() && !g.is_literal(t) && !g.is_graph_output(t)
        })
        .map(|o| o.id)
        .collect();
    let fold: BTreeSet<OpId> = fold_ops.iter().copied().collect();
    let mut slots = Vec::new();
    let mut seen = BTreeSet::new();
    for op in g.ops.iter().filter(|o| !fold.contains(&o.id)) {
        for &t in &op.inputs {
            let produced_in_fold = g.ops.iter().any(|p| fold.contains(&p.id) && p.outputs.contains(&t));
            if produced_in_fold && seen.insert(t) {
                slots.push((t, g.tensor(t).physical_bytes()));
            }
        }
    }
    ConstCachePlan { fold_ops, slots }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Attrs, DataType, LayoutDesc, OpKind, TensorProperty};

    #[test]
    fn weight_reorder_is_folded() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![4, 4], TensorProperty::Variable);
        let w = g.add_tensor(DataType::F32, vec![4, 4], TensorProperty::Constant);
        let wb = g.add_tensor(DataType::F32, vec![4, 4], TensorProperty::Constant);
        g.tensor_mut(wb).layout = LayoutDesc::blocked2d(2, 2, 2, false);
        let y = g.add_tensor(DataType::F32, vec![4, 4], TensorProperty::Variable);
        let r = g.add_op(OpKind::Reorder, Attrs::new(), vec![w], vec![wb]);
        g.add_op(OpKind::MatMul, Attrs::new(), vec![x, wb], vec![y]);
        g.inputs = vec![x, w];
        g.outputs = vec![y];
        let plan = preprocess_constants(&g);
        assert_eq!(plan.fold_ops, vec![r]);
        assert_eq!(plan.slots, vec![(wb, 64)]);
    }

    #[test]
    fn no_constants_no_fold() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        let y = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        g.add_op(OpKind::ReLU, Attrs::new(), vec![x], vec![y]);
        g.inputs = vec![x];
        g.outputs = vec![y];
        assert_eq!(preprocess_constants(&g), ConstCachePlan::default());
    }
}
