//! Fine-grain fusion: grows a region of post-ops and entry pre-ops around each
//! matmul and wraps everything else as standalone fused ops.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::graph::shape::norm_axis;
use crate::graph::{FusedOp, Graph, Op, OpId, OpKind, TensorId};
use crate::template::{select_anchor, AnchorChoice, AnchorId, FusibleDesc, MachineModel, MatmulParams, Operand, Side};

use super::constants::ConstCachePlan;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionLimits {
    pub max_post_ops: usize,
    pub max_reorders: usize,
    pub max_reductions: usize,
}

impl Default for FusionLimits {
    fn default() -> Self {
        FusionLimits { max_post_ops: 16, max_reorders: 1, max_reductions: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpDecision {
    pub op: OpId,
    pub kind: OpKind,
    pub choice: AnchorChoice,
    pub costs: Vec<(AnchorChoice, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionDecision {
    pub main: OpId,
    pub params: String,
    pub pre_ops: Vec<OpDecision>,
    pub post_ops: Vec<OpDecision>,
    /// Why growth stopped, if it did before running out of consumers.
    pub stop: Option<String>,
    /// Candidates dropped because an intermediate would have escaped the region.
    pub dropped_escaping: Vec<OpId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FusionResult {
    pub fused: Vec<FusedOp>,
    pub decisions: Vec<FusionDecision>,
}

fn es(g: &Graph, t: TensorId) -> f64 {
    g.tensor(t).dtype.size_bytes() as f64
}

fn is_scalar_literal(g: &Graph, t: TensorId) -> bool {
    g.is_literal(t) && g.tensor(t).numel() == 1
}

struct Growth<'a> {
    g: &'a Graph,
    pos: &'a BTreeMap<OpId, usize>,
    producers: &'a BTreeMap<TensorId, OpId>,
    main_pos: usize,
    region: BTreeSet<TensorId>,
    region_shape: Vec<usize>,
    budget: usize,
    extra: usize,
    reorders: usize,
    reductions: usize,
}

impl Growth<'_> {
    /// Cost description of `op` if it may join the region, else why not.
    fn admit(&mut self, op: &Op, limits: &FusionLimits) -> Result<FusibleDesc, String> {
        let g = self.g;
        let out = op.output();
        let full = |t: TensorId| g.tensor(t).shape == self.region_shape;
        let mut bpe = es(g, out);
        let mut extra = 0;
        for &t in &op.inputs {
            bpe += es(g, t);
            if self.region.contains(&t) {
                continue;
            }
            let early = self.producers.get(&t).is_none_or(|p| self.pos.get(p).is_none_or(|&i| i < self.main_pos));
            if !early {
                return Err(format!("{} {} reads {t}, produced after the matmul", op.kind, op.id));
            }
            if !is_scalar_literal(g, t) {
                extra += g.tensor(t).physical_bytes();
            }
        }
        match op.kind {
            OpKind::MatMul => return Err(format!("tunable op {} ends the region", op.id)),
            k if k.is_elementwise() => {
                if !full(out) {
                    return Err(format!("{k} {} changes the region shape", op.id));
                }
            }
            OpKind::ReduceSum | OpKind::ReduceMax => {
                let last = g.tensor(out).shape.len() - 1;
                let axis = norm_axis(op.attr_int("axis").unwrap_or(-1), last + 1);
                if !full(op.inputs[0]) || axis != Some(last) || op.attr_bool("keepdims") == Some(false) {
                    return Err(format!("{} {} is not a keepdims reduction over the last axis", op.kind, op.id));
                }
                if self.reductions >= limits.max_reductions {
                    return Err(format!("reduction limit reached at {}", op.id));
                }
            }
            OpKind::Reorder => {
                if !full(op.inputs[0]) {
                    return Err(format!("Reorder {} does not cover the region", op.id));
                }
                if self.reorders >= limits.max_reorders {
                    return Err(format!("reorder limit reached at {}", op.id));
                }
            }
            k => return Err(format!("{k} {} is not fused", op.id)),
        }
        if self.extra + extra > self.budget {
            return Err(format!("extra input bytes exceed the budget at {}", op.id));
        }
        self.extra += extra;
        Ok(FusibleDesc {
            bytes_per_elem: bpe,
            slice_bytes_per_elem: bpe,
            full_elems: g.tensor(op.inputs[0]).numel().max(g.tensor(out).numel()),
            is_reduction: op.kind.is_reduction(),
        })
    }
}

/// Reorder (optionally behind a last-two-axes Transpose) from a graph input
/// that produces exactly `operand`'s blocked layout.
fn pre_chain(
    g: &Graph,
    t: TensorId,
    consumers: &BTreeMap<TensorId, Vec<OpId>>,
    producers: &BTreeMap<TensorId, OpId>,
    fold: &ConstCachePlan,
) -> Option<Vec<OpId>> {
    let single = |t: TensorId| consumers.get(&t).is_some_and(|c| c.len() == 1) && !g.is_graph_output(t);
    let &r = producers.get(&t)?;
    let rop = g.op(r);
    if rop.kind != OpKind::Reorder || fold.is_fold_op(r) || !single(t) {
        return None;
    }
    let src = rop.inputs[0];
    if !g.tensor(src).layout.is_plain() {
        return None;
    }
    if g.is_graph_input(src) && !g.tensor(src).is_constant() {
        return Some(vec![r]);
    }
    let &tr = producers.get(&src)?;
    let top = g.op(tr);
    let rank = g.tensor(src).shape.len();
    let swap_last: Vec<i64> = {
        let mut p: Vec<i64> = (0..rank as i64).collect();
        p.swap(rank - 1, rank - 2);
        p
    };
    let perm_ok = top.attr_ints("perm").is_none_or(|p| p == swap_last);
    let x = top.inputs[0];
    if top.kind == OpKind::Transpose && perm_ok && single(src) && g.is_graph_input(x) && !g.tensor(x).is_constant() {
        return Some(vec![tr, r]);
    }
    None
}

/// Groups the main-graph ops (fold ops excluded) into fused ops in execution order.
pub fn fine_grain_fuse(
    g: &Graph,
    fold: &ConstCachePlan,
    params: &BTreeMap<OpId, MatmulParams>,
    mm: &MachineModel,
    limits: &FusionLimits,
    enabled: bool,
) -> FusionResult {
    let main_ops: Vec<&Op> = g.ops.iter().filter(|o| !fold.is_fold_op(o.id)).collect();
    let pos: BTreeMap<OpId, usize> = main_ops.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
    let producers = g.producers();
    let consumers = g.consumers();
    let mut taken: BTreeSet<OpId> = BTreeSet::new();
    let mut regions: BTreeMap<OpId, FusedOp> = BTreeMap::new();
    let mut decisions = Vec::new();
    for (i, m) in main_ops.iter().enumerate() {
        if m.kind != OpKind::MatMul {
            continue;
        }
        let p = params[&m.id].clone();
        let mut f = FusedOp { main: m.id, tunable: true, pre_ops: vec![], post_ops: vec![], params: Some(p.clone()), mergeable_with_next: false };
        let mut dec = FusionDecision { main: m.id, params: p.to_string(), pre_ops: vec![], post_ops: vec![], stop: None, dropped_escaping: vec![] };
        if !enabled {
            regions.insert(m.id, f);
            decisions.push(dec);
            continue;
        }
        let out0 = m.output();
        let mut gr = Growth {
            g,
            pos: &pos,
            producers: &producers,
            main_pos: i,
            region: BTreeSet::from([out0]),
            region_shape: g.tensor(out0).shape.clone(),
            budget: g.tensor(out0).numel() * g.tensor(out0).dtype.size_bytes(),
            extra: 0,
            reorders: 0,
            reductions: 0,
        };
        let mut chosen: Vec<(OpId, AnchorId, OpDecision)> = Vec::new();
        let mut floor = AnchorId::Post1;
        for op in &main_ops[i + 1..] {
            if taken.contains(&op.id) || !op.inputs.iter().any(|t| gr.region.contains(t)) {
                continue;
            }
            if chosen.len() >= limits.max_post_ops {
                dec.stop = Some(format!("post-op limit {} reached", limits.max_post_ops));
                break;
            }
            let desc = match gr.admit(op, limits) {
                Ok(d) => d,
                Err(why) => {
                    dec.stop = Some(why);
                    break;
                }
            };
            let d = select_anchor(&desc, Side::Post, &p, mm);
            let od = OpDecision { op: op.id, kind: op.kind, choice: d.choice, costs: d.costs };
            let AnchorChoice::Anchor(a) = d.choice else {
                dec.stop = Some(format!("not fusing {} {} is cheaper", op.kind, op.id));
                dec.post_ops.push(od);
                break;
            };
            floor = floor.max(a);
            chosen.push((op.id, floor, od));
            gr.region.insert(op.output());
            if op.kind == OpKind::Reorder {
                gr.reorders += 1;
                dec.stop = Some(format!("Reorder {} ends the region", op.id));
                break;
            }
            if op.kind.is_reduction() {
                gr.reductions += 1;
            }
        }
        // longest prefix whose intermediates stay inside the region
        let mut k = chosen.len();
        while k > 0 {
            let inside: BTreeSet<OpId> = chosen[..k].iter().map(|c| c.0).collect();
            let mut produced = vec![out0];
            produced.extend(chosen[..k - 1].iter().map(|c| g.op(c.0).output()));
            let ok = produced.iter().all(|t| !g.is_graph_output(*t) && consumers.get(t).is_none_or(|cs| cs.iter().all(|c| inside.contains(c))));
            if ok {
                break;
            }
            k -= 1;
        }
        for (id, _, _) in chosen.drain(k..) {
            dec.dropped_escaping.push(id);
        }
        for (id, a, od) in chosen {
            taken.insert(id);
            f.post_ops.push((id, a));
            dec.post_ops.push(od);
        }
        for (slot, operand) in [(0, Operand::A), (1, Operand::B)] {
            let Some(chain) = pre_chain(g, m.inputs[slot], &consumers, &producers, fold) else { continue };
            if chain.iter().any(|o| taken.contains(o)) {
                continue;
            }
            let first = g.op(chain[0]);
            let src = first.inputs[0];
            let desc =
                FusibleDesc { bytes_per_elem: es(g, src) * 2.0, slice_bytes_per_elem: es(g, src), full_elems: g.tensor(src).numel(), is_reduction: false };
            let d = select_anchor(&desc, Side::Pre(operand), &p, mm);
            for &o in &chain {
                dec.pre_ops.push(OpDecision { op: o, kind: g.op(o).kind, choice: d.choice, costs: d.costs.clone() });
            }
            if let AnchorChoice::Anchor(a) = d.choice {
                for &o in &chain {
                    taken.insert(o);
                    f.pre_ops.push((o, a));
                }
            }
        }
        regions.insert(m.id, f);
        decisions.push(dec);
    }
    let fused = main_ops
        .iter()
        .filter_map(|o| match regions.remove(&o.id) {
            Some(f) => Some(f),
            None if taken.contains(&o.id) => None,
            None => Some(FusedOp::standalone(o.id)),
        })
        .collect();
    FusionResult { fused, decisions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Attrs, DataType, LayoutDesc, TensorProperty};
    use crate::passes::{matmul_params, preprocess_constants, propagate_layouts};

    fn mm_chain(post: &[OpKind]) -> Graph {
        mm_chain_sized(64, 64, 64, post)
    }

    fn mm_chain_sized(m: usize, k: usize, n: usize, post: &[OpKind]) -> Graph {
        let mut g = Graph::new();
        let x = g.add_tensor(DataType::F32, vec![m, k], TensorProperty::Variable);
        let w = g.add_tensor(DataType::F32, vec![k, n], TensorProperty::Constant);
        let mut y = g.add_tensor(DataType::F32, vec![m, n], TensorProperty::Variable);
        g.add_op(OpKind::MatMul, Attrs::new(), vec![x, w], vec![y]);
        for &k in post {
            let z = g.add_tensor(DataType::F32, vec![m, n], TensorProperty::Variable);
            g.add_op(k, Attrs::new(), vec![y], vec![z]);
            y = z;
        }
        g.inputs = vec![x, w];
        g.outputs = vec![y];
        g
    }

    fn fuse(g: &Graph) -> (Graph, FusionResult) {
        let mm = MachineModel::default();
        let p = matmul_params(g, &mm);
        let (g, _) = propagate_layouts(g, &p);
        let plan = preprocess_constants(&g);
        let r = fine_grain_fuse(&g, &plan, &p, &mm, &FusionLimits::default(), true);
        (g, r)
    }

    #[test]
    fn relu_and_exit_reorder_at_post1_with_entry_reorder_pre4() {
        let (g, r) = fuse(&mm_chain_sized(256, 1024, 256, &[OpKind::ReLU]));
        assert_eq!(r.fused.len(), 1);
        let f = &r.fused[0];
        let kinds: Vec<(OpKind, AnchorId)> = f.post_ops.iter().map(|(o, a)| (g.op(*o).kind, *a)).collect();
        assert_eq!(kinds, vec![(OpKind::ReLU, AnchorId::Post1), (OpKind::Reorder, AnchorId::Post1)]);
        assert_eq!(f.pre_ops.len(), 1);
        assert_eq!(f.pre_ops[0].1, AnchorId::Pre4);
    }

    #[test]
    fn second_reorder_is_standalone() {
        let mut g = mm_chain(&[]);
        let y = g.outputs[0];
        let a = g.add_tensor(DataType::F32, vec![64, 64], TensorProperty::Variable);
        g.tensor_mut(a).layout = LayoutDesc::blocked2d(2, 16, 16, true);
        g.add_op(OpKind::Reorder, Attrs::new(), vec![y], vec![a]);
        g.outputs = vec![a];
        let (_, r) = fuse(&g);
        // the exit reorder back to plain cannot join: limit of one reorder
        assert_eq!(r.fused.len(), 2);
        assert!(r.decisions[0].stop.as_deref().unwrap().contains("Reorder"));
    }

    #[test]
    fn disabled_gives_one_fused_op_per_op() {
        let g = mm_chain(&[OpKind::ReLU, OpKind::Exp]);
        let mm = MachineModel::default();
        let p = matmul_params(&g, &mm);
        let (g, _) = propagate_layouts(&g, &p);
        let plan = preprocess_constants(&g);
        let r = fine_grain_fuse(&g, &plan, &p, &mm, &FusionLimits::default(), false);
        assert_eq!(r.fused.len(), g.ops.len() - plan.fold_ops.len());
        assert!(r.fused.iter().all(|f| f.pre_ops.is_empty() && f.post_ops.is_empty()));
    }

    #[test]
    fn escaping_intermediate_is_dropped() {
        let mut g = mm_chain(&[OpKind::ReLU, OpKind::Exp]);
        let relu_out = g.ops[1].output();
        g.outputs.push(relu_out);
        let (g, r) = fuse(&g);
        let f = r.fused.iter().find(|f| f.tunable).unwrap();
        let kinds: Vec<OpKind> = f.post_ops.iter().map(|(o, _)| g.op(*o).kind).collect();
        assert!(!kinds.contains(&OpKind::Exp));
    }
}
