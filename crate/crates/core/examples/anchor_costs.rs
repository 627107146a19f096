//! Blocking parameters, the per-core anchor table, and the anchor each fused
//! op was given, for a matmul followed by ReLU with plain input and output.
//!
//! `cargo run --example anchor_costs`

use tgc::compile::{compile, CompileOptions};
use tgc::graph::{Attrs, DataType, Graph, OpKind, TensorProperty};
use tgc::template::anchor_table;

fn main() -> anyhow::Result<()> {
    let mut g = Graph::new();
    let a = g.add_tensor(DataType::F32, vec![256, 1024], TensorProperty::Variable);
    let b = g.add_tensor(DataType::F32, vec![1024, 256], TensorProperty::Constant);
    let c = g.add_tensor(DataType::F32, vec![256, 256], TensorProperty::Variable);
    let d = g.add_tensor(DataType::F32, vec![256, 256], TensorProperty::Variable);
    g.add_op(OpKind::MatMul, Attrs::new(), vec![a, b], vec![c]);
    g.add_op(OpKind::ReLU, Attrs::new(), vec![c], vec![d]);
    g.inputs = vec![a, b];
    g.outputs = vec![d];

    let compiled = compile(&g, &CompileOptions::default())?;
    for (op, p) in &compiled.passes.params {
        println!("{op}: {p}");
        println!("{:<8} {:<3} {:>12} {:>12} {:>14}", "anchor", "op", "working set", "invocations", "total/core");
        for r in anchor_table(p) {
            println!(
                "{:<8} {:<3} {:>12} {:>12} {:>14}",
                r.anchor.to_string(),
                format!("{:?}", r.operand),
                r.working_set_elems,
                r.invocations_per_core,
                r.total_accesses_per_core
            );
        }
    }
    for f in &compiled.passes.report.fusion {
        for o in f.pre_ops.iter().chain(&f.post_ops) {
            let costs: Vec<String> = o.costs.iter().map(|(a, c)| format!("{a:?}={c:.0}")).collect();
            println!("{} {:?} -> {:?}  [{}]", o.op, o.kind, o.choice, costs.join(" "));
        }
    }
    Ok(())
}
