//! An int8 MLP: the low-precision rewrite, the chosen blocking, and a
//! bit-exact check of the u8 output against the reference evaluator.
//!
//! `cargo run --example int8_mlp [MLP-1|MLP-2]`

use tgc::compile::{compile, CompileOptions};
use tgc::oracle::eval_graph;
use tgc::value::{compare, Tolerance};
use tgc::workloads::{random_inputs, row, BenchConfig, Precision};

fn main() -> anyhow::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "MLP-1".into());
    let r = row(&name).ok_or_else(|| anyhow::anyhow!("unknown workload {name}"))?;
    let cfg = BenchConfig::new(&r, 32, Precision::Int8, 4);
    let g = cfg.graph();
    let c = compile(&g, &CompileOptions::default())?;

    println!("{}", cfg.label());
    for line in &c.passes.report.low_precision {
        println!("  rewrite: {line}");
    }
    for (op, p) in &c.passes.params {
        println!("  {op}: {p}");
    }

    let inputs = random_inputs(&g, 7);
    let outs = c.context(4).run(&c.order_inputs(&inputs)?)?;
    let want = eval_graph(&g, &inputs)?;
    let d = compare(&outs[0], &want[&g.outputs[0]], Tolerance::exact());
    println!("  output {:?} {:?}: max diff {} ({} mismatches)", outs[0].dtype(), outs[0].shape, d.max_abs, d.violations);
    Ok(())
}
