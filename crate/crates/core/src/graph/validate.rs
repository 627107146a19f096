//! Structural validation and topological ordering.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use thiserror::Error;

use crate::graph::{DataType, Graph, OpId, TensorId};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("cycle detected among ops {0:?}")]
    Cycle(Vec<OpId>),
    #[error("{op}: arity mismatch, expected {expected:?} (in, out) got {got:?}")]
    Arity { op: OpId, expected: (usize, usize), got: (usize, usize) },
    #[error("{op}: dangling tensor id {tensor}")]
    Dangling { op: OpId, tensor: TensorId },
    #[error("tensor {tensor} has multiple producers {producers:?}")]
    MultipleProducers { tensor: TensorId, producers: Vec<OpId> },
    #[error("{op}: contraction dim mismatch ({k_a} vs {k_b})")]
    ContractionMismatch { op: OpId, k_a: usize, k_b: usize },
    #[error("{op}: dtype mismatch: {msg}")]
    Dtype { op: OpId, msg: String },
    #[error("{op}: shape error: {msg}")]
    Shape { op: OpId, msg: String },
    #[error("tensor {0} is neither a graph input, a literal nor produced by an op")]
    Undefined(TensorId),
    #[error("graph input {0} is produced by an op")]
    ProducedInput(TensorId),
    #[error("graph input {0} has dtype s32")]
    S32Input(TensorId),
    #[error("unknown graph boundary tensor {0}")]
    UnknownBoundary(TensorId),
    #[error("tensor {0} has a zero-sized dimension")]
    EmptyDim(TensorId),
}

/// Returns every structural violation; an empty list means the graph is valid.
pub fn validate_graph(g: &Graph) -> Vec<ValidationError> {
    let mut errors = Vec::new();

    for &t in g.inputs.iter().chain(&g.outputs) {
        if !g.tensors.contains_key(&t) {
            errors.push(ValidationError::UnknownBoundary(t));
        }
    }
    for &t in &g.inputs {
        if let Some(lt) = g.tensors.get(&t) {
            if lt.dtype == DataType::S32 {
                errors.push(ValidationError::S32Input(t));
            }
        }
    }
    for lt in g.tensors.values() {
        if lt.shape.contains(&0) {
            errors.push(ValidationError::EmptyDim(lt.id));
        }
    }

    let mut producers: BTreeMap<TensorId, Vec<OpId>> = BTreeMap::new();
    for op in &g.ops {
        let got = (op.inputs.len(), op.outputs.len());
        if got != op.kind.arity() {
            errors.push(ValidationError::Arity { op: op.id, expected: op.kind.arity(), got });
        }
        for &t in op.inputs.iter().chain(&op.outputs) {
            if !g.tensors.contains_key(&t) {
                errors.push(ValidationError::Dangling { op: op.id, tensor: t });
            }
        }
        for &t in &op.outputs {
            producers.entry(t).or_default().push(op.id);
        }
    }
    for (t, ps) in &producers {
        if ps.len() > 1 {
            errors.push(ValidationError::MultipleProducers { tensor: *t, producers: ps.clone() });
        }
        if g.inputs.contains(t) {
            errors.push(ValidationError::ProducedInput(*t));
        }
    }
    for op in &g.ops {
        for &t in &op.inputs {
            if g.tensors.contains_key(&t) && !producers.contains_key(&t) && !g.inputs.contains(&t) && !g.is_literal(t) {
                errors.push(ValidationError::Undefined(t));
            }
        }
    }
    for &t in &g.outputs {
        if g.tensors.contains_key(&t) && !producers.contains_key(&t) && !g.inputs.contains(&t) && !g.is_literal(t) {
            errors.push(ValidationError::Undefined(t));
        }
    }

    if let Err(e) = topo_order(g) {
        errors.push(e);
        return errors;
    }
    if !errors.is_empty() {
        return errors;
    }

    // shape/dtype rules, only once the structure is sound
    for op in &g.ops {
        match super::shape::op_output(g, op) {
            Ok((dtype, shape)) => {
                let out = g.tensor(op.output());
                if out.dtype != dtype {
                    errors.push(ValidationError::Dtype { op: op.id, msg: format!("output declared {} but op produces {}", out.dtype, dtype) });
                }
                if out.shape != shape {
                    errors.push(ValidationError::Shape { op: op.id, msg: format!("output declared {:?} but op produces {:?}", out.shape, shape) });
                }
            }
            Err(e) => errors.push(e),
        }
    }
    errors
}

/// Deterministic topological order of op ids (ties broken by ascending id).
pub fn topo_order(g: &Graph) -> Result<Vec<OpId>, ValidationError> {
    let producers = g.producers();
    let mut indegree: BTreeMap<OpId, usize> = g.ops.iter().map(|o| (o.id, 0)).collect();
    let mut succ: BTreeMap<OpId, BTreeSet<OpId>> = BTreeMap::new();
    for op in &g.ops {
        let preds: BTreeSet<OpId> = op.inputs.iter().filter_map(|t| producers.get(t).copied()).collect();
        for p in preds {
            if succ.entry(p).or_default().insert(op.id) {
                *indegree.get_mut(&op.id).unwrap() += 1;
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<OpId>> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| Reverse(id)).collect();
    let mut order = Vec::with_capacity(g.ops.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        if let Some(next) = succ.get(&id) {
            for &s in next {
                let d = indegree.get_mut(&s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(s));
                }
            }
        }
    }
    if order.len() != g.ops.len() {
        let done: BTreeSet<OpId> = order.iter().copied().collect();
        let stuck = g.ops.iter().map(|o| o.id).filter(|id| !done.contains(id)).collect();
        return Err(ValidationError::Cycle(stuck));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Attrs, OpKind, TensorProperty};

    fn matmul_graph(a: Vec<usize>, b: Vec<usize>, c: Vec<usize>) -> Graph {
        let mut g = Graph::new();
        let ta = g.add_tensor(DataType::F32, a, TensorProperty::Variable);
        let tb = g.add_tensor(DataType::F32, b, TensorProperty::Variable);
        let tc = g.add_tensor(DataType::F32, c, TensorProperty::Variable);
        g.add_op(OpKind::MatMul, Attrs::new(), vec![ta, tb], vec![tc]);
        g.inputs = vec![ta, tb];
        g.outputs = vec![tc];
        g
    }

    #[test]
    fn minimal_matmul_ok() {
        assert!(validate_graph(&matmul_graph(vec![4, 8], vec![8, 4], vec![4, 4])).is_empty());
    }

    #[test]
    fn contraction_mismatch() {
        let errs = validate_graph(&matmul_graph(vec![4, 8], vec![7, 4], vec![4, 4]));
        assert_eq!(errs.len(), 1);
        assert!(errs[0].to_string().contains("contraction dim mismatch"), "{}", errs[0]);
    }

    #[test]
    fn multiple_producers() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        let t3 = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        g.add_op(OpKind::ReLU, Attrs::new(), vec![x], vec![t3]);
        g.add_op(OpKind::Exp, Attrs::new(), vec![x], vec![t3]);
        g.inputs = vec![x];
        g.outputs = vec![t3];
        let errs = validate_graph(&g);
        assert!(errs.iter().any(|e| e.to_string().contains("multiple producers")), "{errs:?}");
    }

    #[test]
    fn chain_order() {
        let mut g = Graph::new();
        let a = g.add_tensor(DataType::F32, vec![4, 4], TensorProperty::Variable);
        let w1 = g.add_tensor(DataType::F32, vec![4, 4], TensorProperty::Constant);
        let w2 = g.add_tensor(DataType::F32, vec![4, 4], TensorProperty::Constant);
        let t1 = g.add_tensor(DataType::F32, vec![4, 4], TensorProperty::Variable);
        let t2 = g.add_tensor(DataType::F32, vec![4, 4], TensorProperty::Variable);
        let t3 = g.add_tensor(DataType::F32, vec![4, 4], TensorProperty::Variable);
        // ids deliberately out of data order
        g.ops.push(crate::graph::Op { id: OpId(7), kind: OpKind::MatMul, attrs: Attrs::new(), inputs: vec![t2, w2], outputs: vec![t3] });
        g.ops.push(crate::graph::Op { id: OpId(3), kind: OpKind::ReLU, attrs: Attrs::new(), inputs: vec![t1], outputs: vec![t2] });
        g.ops.push(crate::graph::Op { id: OpId(5), kind: OpKind::MatMul, attrs: Attrs::new(), inputs: vec![a, w1], outputs: vec![t1] });
        g.inputs = vec![a, w1, w2];
        g.outputs = vec![t3];
        assert_eq!(topo_order(&g).unwrap(), vec![OpId(5), OpId(3), OpId(7)]);
    }

    #[test]
    fn diamond_tie_break() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        let l = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        let r = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        let y = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        let join = g.add_op(OpKind::Add, Attrs::new(), vec![l, r], vec![y]);
        let right = g.add_op(OpKind::Exp, Attrs::new(), vec![x], vec![r]);
        let left = g.add_op(OpKind::ReLU, Attrs::new(), vec![x], vec![l]);
        g.inputs = vec![x];
        g.outputs = vec![y];
        assert_eq!(topo_order(&g).unwrap(), vec![right, left, join]);
    }

    #[test]
    fn back_edge_is_cycle() {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        let a = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        let b = g.add_tensor(DataType::F32, vec![4], TensorProperty::Variable);
        g.add_op(OpKind::Add, Attrs::new(), vec![x, b], vec![a]);
        g.add_op(OpKind::ReLU, Attrs::new(), vec![a], vec![b]);
        g.inputs = vec![x];
        g.outputs = vec![b];
        assert!(matches!(topo_order(&g), Err(ValidationError::Cycle(_))));
        assert!(validate_graph(&g).iter().any(|e| matches!(e, ValidationError::Cycle(_))));
    }
}
