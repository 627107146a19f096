mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tgc::compile::{compile, CompileOptions};
use tgc::graph::DataType;
use tgc::template::{anchor_table, table_row, AnchorId, LoopOrder, MatmulParams, Operand};

fn example() -> MatmulParams {
    // MSN=4, NSN=4, KSN=8, BS=2, 32-blocks
    MatmulParams::new((128, 128, 256), 1, DataType::F32, (32, 32, 32), 2, (1, 1), LoopOrder::MKN).unwrap()
}

#[test]
fn table_and_probe_counts_agree() {
    let o = c4_anchor_table();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn worked_example_cells() {
    let p = example();
    assert_eq!((p.msn, p.nsn, p.ksn), (4, 4, 8));
    let post1 = table_row(&p, AnchorId::Post1, Operand::C);
    assert_eq!((post1.working_set_elems, post1.invocations_per_core, post1.total_accesses_per_core), (4096, 4, 16384));
    assert_eq!(table_row(&p, AnchorId::Pre4, Operand::A).invocations_per_core, 16);
    let pre5 = table_row(&p, AnchorId::Pre5, Operand::A);
    assert_eq!(pre5.total_accesses_per_core, 4 * table_row(&p, AnchorId::Pre4, Operand::A).total_accesses_per_core);
}

#[test]
fn full_batch_reduce_collapses_pre4_onto_pre3() {
    let p = MatmulParams::new((128, 128, 256), 1, DataType::F32, (32, 32, 32), 8, (1, 1), LoopOrder::MKN).unwrap();
    let inv = |a| table_row(&p, a, Operand::A).invocations_per_core;
    assert_eq!(inv(AnchorId::Pre4), inv(AnchorId::Pre3));
}

#[test]
fn probes_are_absent_unless_requested() {
    let g = matmul_graph(&example());
    let c = compile(&g, &CompileOptions::default()).unwrap();
    assert!(!c.dump_tir("lowered").unwrap().contains("probe"));
    let mut ctx = c.context(1);
    ctx.run(&c.order_inputs(&tgc::workloads::random_inputs(&g, 1)).unwrap()).unwrap();
    assert!(ctx.probe_counts().is_empty());
}

#[test]
fn elementwise_post_ops_land_at_post1() {
    let mut bad = Vec::new();
    for (name, g) in corpus() {
        let c = compile(&g, &CompileOptions::default()).unwrap();
        bad.extend(anchor_violations(&name, &c).into_iter().filter(|v| v.contains("post-op")));
    }
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn entry_reorders_of_a_avoid_pre5() {
    let mut bad = Vec::new();
    for (name, g) in corpus() {
        let c = compile(&g, &CompileOptions::default()).unwrap();
        bad.extend(anchor_violations(&name, &c).into_iter().filter(|v| v.contains("of A at")));
    }
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn golden_scenario_places_reorder_at_pre4() {
    let c = compile(&golden_graph(), &CompileOptions::default()).unwrap();
    let fused = fused_lines(&c.dump_graph("fusion").unwrap());
    assert_eq!(fused.len(), 1);
    let (_, pre, post) = &fused[0];
    assert!(pre.iter().all(|(_, a)| a == "pre#4"), "{pre:?}");
    assert_eq!(post.len(), 2);
    assert!(post.iter().all(|(_, a)| a == "post#1"), "{post:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn table_matches_formulas(seed: u64) {
        let p = random_params(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(anchor_table(&p), expected_rows(&p));
    }
}
