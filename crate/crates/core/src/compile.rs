//! End-to-end compilation: graph passes, lowering, loop-IR passes,
//! verification and buffer planning.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::graph::json::graph_to_string;
use crate::graph::{Graph, TensorId};
use crate::passes::{run_graph_passes, GraphPipeline, PassError, PipelineOptions};
use crate::runtime::{ExecutionContext, Program, RunError, TensorSig};
use crate::template::{lower_module, LowerError, LowerOptions};
use crate::tir::*;
use crate::value::DenseValue;

/// Names accepted by `--dump-tir`, in pipeline order.
pub const TIR_STAGES: [&str; 3] = ["lowered", "merged", "shrunk"];

#[derive(Clone, Debug, PartialEq)]
pub struct CompileOptions {
    pub pipeline: PipelineOptions,
    pub buffer_reuse: bool,
    /// Count executions of every anchor site.
    pub probes: bool,
    pub alignment: usize,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { pipeline: PipelineOptions::default(), buffer_reuse: true, probes: false, alignment: 64 }
    }
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Pass(#[from] PassError),
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error("verification failed: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Verify(Vec<VerifyError>),
}

pub struct Compiled {
    pub passes: GraphPipeline,
    /// Loop IR after lowering, loop merging and shrinking.
    pub tir: Vec<(String, Module)>,
    pub merge: MergeReport,
    pub shrink: Vec<ShrinkRecord>,
    pub program: Arc<Program>,
    pub inputs: Vec<TensorSig>,
    pub outputs: Vec<TensorSig>,
}

pub fn compile(g: &Graph, opts: &CompileOptions) -> Result<Compiled, CompileError> {
    let passes = run_graph_passes(g, &opts.pipeline)?;
    let lowered = lower_module(&passes.graph, &passes.fused, &passes.plan, &passes.params, &LowerOptions { probes: opts.probes })?;
    let (merged, merge) = merge_parallel_loops(&lowered);
    let (shrunk, shrink) = shrink_temporaries(&merged);
    verify_module(&shrunk).map_err(CompileError::Verify)?;
    let plan = plan_buffers(&shrunk, opts.alignment, opts.buffer_reuse);
    let fg = &passes.graph;
    let sig = |t: &TensorId, b: &BufId| TensorSig { tensor: *t, dtype: fg.tensor(*t).dtype, shape: fg.tensor(*t).shape.clone(), buf: *b };
    let inputs = shrunk.inputs.iter().map(|(t, b)| sig(t, b)).collect();
    let outputs = shrunk.outputs.iter().map(|(t, b)| sig(t, b)).collect();
    let program = Arc::new(Program::new(shrunk.clone(), plan));
    Ok(Compiled {
        tir: vec![("lowered".into(), lowered), ("merged".into(), merged), ("shrunk".into(), shrunk)],
        passes,
        merge,
        shrink,
        program,
        inputs,
        outputs,
    })
}

impl Compiled {
    pub fn context(&self, workers: usize) -> ExecutionContext {
        ExecutionContext::new(self.program.clone(), self.inputs.clone(), self.outputs.clone(), workers)
    }

    pub fn module(&self) -> &Module {
        &self.program.module
    }

    pub fn plan(&self) -> &BufferPlan {
        &self.program.plan
    }

    pub fn tir_stage(&self, name: &str) -> Option<&Module> {
        self.tir.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Text of a graph stage; the fusion stages also list the fused ops.
    pub fn dump_graph(&self, stage: &str) -> Option<String> {
        let (_, g) = self.passes.stages.iter().find(|(n, _)| n == stage)?;
        let mut out = graph_to_string(g);
        if stage == "fusion" || stage == "coarse" {
            out.push('\n');
            for f in &self.passes.fused {
                let pre: Vec<String> = f.pre_ops.iter().map(|(o, a)| format!("{o}@{a}")).collect();
                let post: Vec<String> = f.post_ops.iter().map(|(o, a)| format!("{o}@{a}")).collect();
                out.push_str(&format!(
                    "fused {} {} pre=[{}] post=[{}]{}\n",
                    f.main,
                    g.op(f.main).kind.name(),
                    pre.join(", "),
                    post.join(", "),
                    if stage == "coarse" && f.mergeable_with_next { " mergeable" } else { "" }
                ));
            }
        }
        Some(out)
    }

    pub fn dump_tir(&self, stage: &str) -> Option<String> {
        self.tir_stage(stage).map(print_module)
    }

    /// Orders `values` keyed by tensor into the program's input order.
    pub fn order_inputs(&self, values: &BTreeMap<TensorId, DenseValue>) -> Result<Vec<DenseValue>, RunError> {
        self.inputs
            .iter()
            .enumerate()
            .map(|(i, s)| values.get(&s.tensor).cloned().ok_or_else(|| RunError::Input { index: i, tensor: s.tensor.to_string(), msg: "missing".into() }))
            .collect()
    }
}
