mod common;

use common::*;
use tgc::compile::{compile, CompileOptions};
use tgc::graph::DataType;
use tgc::runtime::RunError;
use tgc::value::DenseValue;
use tgc::workloads::random_inputs;

#[test]
fn wrong_input_count_is_rejected() {
    let g = golden_graph();
    let c = compile(&g, &CompileOptions::default()).unwrap();
    let mut ctx = c.context(1);
    let err = ctx.run(&[]).unwrap_err();
    assert!(matches!(err, RunError::Arity { got: 0, .. }), "{err}");
}

#[test]
fn wrong_shape_or_dtype_is_rejected() {
    let g = golden_graph();
    let c = compile(&g, &CompileOptions::default()).unwrap();
    let mut inputs = c.order_inputs(&random_inputs(&g, 1)).unwrap();
    let mut ctx = c.context(1);
    let good = inputs[0].clone();
    inputs[0] = DenseValue::zeros(DataType::F32, vec![256, 1000]);
    assert!(matches!(ctx.run(&inputs), Err(RunError::Input { index: 0, .. })));
    inputs[0] = DenseValue::zeros(DataType::U8, good.shape.clone());
    assert!(matches!(ctx.run(&inputs), Err(RunError::Input { index: 0, .. })));
}

#[test]
fn repeated_runs_are_deterministic() {
    for (name, g) in random_corpus(5) {
        let c = compile(&g, &CompileOptions::default()).unwrap();
        let inputs = c.order_inputs(&random_inputs(&g, 2)).unwrap();
        let mut ctx = c.context(3);
        let a = ctx.run(&inputs).unwrap();
        let b = ctx.run(&inputs).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn profile_reports_every_call() {
    let g = golden_graph();
    let c = compile(&g, &CompileOptions::default()).unwrap();
    let inputs = c.order_inputs(&random_inputs(&g, 1)).unwrap();
    let mut ctx = c.context(1);
    let (_, stats, totals) = ctx.profile(&inputs, 1, 3).unwrap();
    assert_eq!(totals.len(), 3);
    let m = c.module();
    assert_eq!(stats.per_call.len(), m.callees(m.entry).len());
    assert_eq!(ctx.fold_runs(), 1);
}
