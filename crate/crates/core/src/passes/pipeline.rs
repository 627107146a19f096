use std::collections::BTreeMap;

use serde::Serialize;

use crate::graph::{validate_graph, FusedOp, Graph, OpId, OpKind, TensorId};
use crate::template::{MachineModel, MatmulParams};

use super::coarse::mark_coarse_grain;
use super::constants::{preprocess_constants, ConstCachePlan};
use super::fusion::{fine_grain_fuse, FusionDecision, FusionLimits};
use super::layout::{matmul_params, propagate_layouts, InsertedReorder};
use super::{cleanup, decompose_complex, low_precision_convert, PassError};

/// Names accepted by `--dump-graph`, in pipeline order.
pub const STAGES: [&str; 7] = ["input", "decompose", "low_precision", "layout", "constants", "fusion", "coarse"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineOptions {
    pub fuse: bool,
    pub coarse_grain: bool,
    pub fast_softmax: bool,
    pub machine: MachineModel,
    pub limits: FusionLimits,
    /// Parameters used instead of the heuristic's choice for matmuls of the
    /// same problem size and dtype.
    pub params_override: Vec<MatmulParams>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            fuse: true,
            coarse_grain: true,
            fast_softmax: false,
            machine: MachineModel::default(),
            limits: FusionLimits::default(),
            params_override: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PassDelta {
    pub pass: String,
    pub ops_before: usize,
    pub ops_after: usize,
    /// Per-kind change in op count; zero entries omitted.
    pub by_kind: BTreeMap<String, i64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PassPipelineReport {
    pub deltas: Vec<PassDelta>,
    pub low_precision: Vec<String>,
    pub inserted_reorders: Vec<InsertedReorder>,
    pub fusion: Vec<FusionDecision>,
    pub coarse_grain: Vec<String>,
    pub cache_slots: Vec<(TensorId, usize)>,
    pub final_op_counts: BTreeMap<String, usize>,
}

impl PassPipelineReport {
    /// Recomputes `final_op_counts` from a graph; used to check the report.
    pub fn op_counts(g: &Graph) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for o in &g.ops {
            *m.entry(o.kind.name().to_string()).or_insert(0) += 1;
        }
        m
    }
}

/// Everything the graph passes produce.
#[derive(Clone, Debug)]
pub struct GraphPipeline {
    pub graph: Graph,
    pub stages: Vec<(String, Graph)>,
    pub plan: ConstCachePlan,
    pub params: BTreeMap<OpId, MatmulParams>,
    pub fused: Vec<FusedOp>,
    pub report: PassPipelineReport,
}

fn delta(pass: &str, before: &Graph, after: &Graph) -> PassDelta {
    let (b, a) = (PassPipelineReport::op_counts(before), PassPipelineReport::op_counts(after));
    let mut by_kind = BTreeMap::new();
    for k in b.keys().chain(a.keys()) {
        let d = *a.get(k).unwrap_or(&0) as i64 - *b.get(k).unwrap_or(&0) as i64;
        if d != 0 {
            by_kind.insert(k.clone(), d);
        }
    }
    PassDelta { pass: pass.into(), ops_before: before.ops.len(), ops_after: after.ops.len(), by_kind }
}

/// Runs decompose, low precision, layout propagation, constant preprocessing,
/// fine-grain fusion and coarse-grain marking, with cleanups in between.
pub fn run_graph_passes(input: &Graph, opts: &PipelineOptions) -> Result<GraphPipeline, PassError> {
    let errs = validate_graph(input);
    if let Some(e) = errs.first() {
        return Err(PassError::Invalid(e.to_string()));
    }
    opts.machine.validate().map_err(PassError::Invalid)?;
    let mut report = PassPipelineReport::default();
    let mut stages = vec![("input".to_string(), input.clone())];

    let mut g = decompose_complex(input, opts.fast_softmax)?;
    cleanup(&mut g);
    report.deltas.push(delta("decompose", input, &g));
    stages.push(("decompose".into(), g.clone()));

    let (mut g2, notes) = low_precision_convert(&g);
    cleanup(&mut g2);
    report.low_precision = notes;
    report.deltas.push(delta("low_precision", &g, &g2));
    stages.push(("low_precision".into(), g2.clone()));

    let mut params = matmul_params(&g2, &opts.machine);
    for p in params.values_mut() {
        if let Some(o) = opts.params_override.iter().find(|o| (o.m, o.n, o.k, o.batch, o.dtype) == (p.m, p.n, p.k, p.batch, p.dtype)) {
            *p = o.clone();
        }
    }
    let (mut g3, inserted) = propagate_layouts(&g2, &params);
    cleanup(&mut g3);
    report.inserted_reorders = inserted.into_iter().filter(|r| g3.ops.iter().any(|o| o.id == r.op)).collect();
    report.deltas.push(delta("layout", &g2, &g3));
    stages.push(("layout".into(), g3.clone()));

    let plan = preprocess_constants(&g3);
    report.cache_slots = plan.slots.clone();
    stages.push(("constants".into(), g3.clone()));

    let fr = fine_grain_fuse(&g3, &plan, &params, &opts.machine, &opts.limits, opts.fuse);
    let mut fused = fr.fused;
    report.fusion = fr.decisions;
    stages.push(("fusion".into(), g3.clone()));

    // coarse-grain merging is a form of fusion
    if opts.coarse_grain && opts.fuse {
        report.coarse_grain = mark_coarse_grain(&g3, &mut fused);
    }
    stages.push(("coarse".into(), g3.clone()));
    report.final_op_counts = PassPipelineReport::op_counts(&g3);
    let errs = validate_graph(&g3);
    if let Some(e) = errs.first() {
        return Err(PassError::Invalid(format!("pipeline produced an invalid graph: {e}")));
    }
    debug_assert!(g3.ops.iter().all(|o| o.kind.category() != crate::graph::OpCategory::Complex));
    debug_assert!(g3.ops.iter().filter(|o| o.kind == OpKind::MatMul).all(|o| params.contains_key(&o.id)));
    Ok(GraphPipeline { graph: g3, stages, plan, params, fused, report })
}
