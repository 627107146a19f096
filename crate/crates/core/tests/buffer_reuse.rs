mod common;

use common::*;
use tgc::compile::{compile, CompileOptions};
use tgc::workloads::{random_inputs, row, BenchConfig, Precision};

#[test]
fn mlp2_arena_reuse_and_single_fold() {
    let o = c6_buffer_reuse();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn no_live_collisions_anywhere() {
    let mut graphs = corpus();
    graphs.extend(random_corpus(10));
    for (name, g) in graphs {
        for opts in [CompileOptions::default(), options(false, false, true)] {
            let c = compile(&g, &opts).unwrap();
            assert!(brute_force_collisions(&c).is_empty(), "{name}");
            assert!(c.plan().collisions().is_empty(), "{name}");
            assert!(c.plan().arena_bytes >= c.plan().peak_live_bytes, "{name}");
        }
    }
}

#[test]
fn disabling_reuse_gives_disjoint_placements() {
    let r = row("MLP-2").unwrap();
    let g = BenchConfig::new(&r, 8, Precision::F32, 4).graph();
    let c = compile(&g, &options(true, true, false)).unwrap();
    let plan = c.plan();
    assert_eq!(plan.arena_bytes, plan.temp_bytes);
    let mut spans: Vec<(usize, usize)> = plan.arena.values().map(|p| (p.offset, p.offset + p.size)).collect();
    spans.sort();
    assert!(spans.windows(2).all(|w| w[0].1 <= w[1].0));
}

#[test]
fn constants_fold_once_until_invalidated() {
    let r = row("MLP-1").unwrap();
    let g = BenchConfig::new(&r, 8, Precision::Int8, 4).graph();
    let c = compile(&g, &CompileOptions::default()).unwrap();
    let inputs = c.order_inputs(&random_inputs(&g, 1)).unwrap();
    let mut ctx = c.context(2);
    let first = ctx.run(&inputs).unwrap();
    for _ in 0..4 {
        assert_eq!(ctx.run(&inputs).unwrap(), first);
    }
    assert_eq!(ctx.fold_runs(), 1);
    ctx.invalidate_constants();
    assert_eq!(ctx.run(&inputs).unwrap(), first);
    assert_eq!(ctx.fold_runs(), 2);
}
