//! Compile a JSON graph, look at the fused loop IR, run it and compare with
//! the reference evaluator.
//!
//! `cargo run --example quickstart [graph.json]`

use tgc::compile::{compile, CompileOptions};
use tgc::graph::json::parse_graph;
use tgc::oracle::eval_graph;
use tgc::value::{compare, Tolerance};
use tgc::workloads::random_inputs;

fn main() -> anyhow::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/graphs/matmul_relu.json").into());
    let g = parse_graph(&std::fs::read_to_string(&path)?)?;
    let c = compile(&g, &CompileOptions::default())?;

    println!("{}", c.dump_graph("fusion").unwrap());
    println!("{}", c.dump_tir("shrunk").unwrap());

    let inputs = random_inputs(&g, 0);
    let mut ctx = c.context(2);
    let outs = ctx.run(&c.order_inputs(&inputs)?)?;
    let want = eval_graph(&g, &inputs)?;
    for (i, t) in g.outputs.iter().enumerate() {
        let d = compare(&outs[i], &want[t], Tolerance::default());
        println!("output {t}: shape {:?}, max abs diff {:.2e}, {} out of tolerance", outs[i].shape, d.max_abs, d.violations);
    }
    Ok(())
}
