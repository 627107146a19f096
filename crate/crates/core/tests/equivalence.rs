mod common;

use common::*;
use proptest::prelude::*;
use tgc::compile::{compile, CompileOptions};
use tgc::oracle::eval_graph;
use tgc::value::{compare, Tolerance};
use tgc::workloads::{random_graph, random_inputs, row, BenchConfig, Precision};

#[test]
fn workloads_and_random_graphs_match_reference() {
    let o = c1_oracle_equivalence();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn variants_and_worker_counts_agree_on_small_graphs() {
    let mut graphs = random_corpus(6);
    for p in [Precision::F32, Precision::Int8] {
        let r = row("MLP-1").unwrap();
        graphs.push((format!("MLP-1 {p:?}"), BenchConfig::new(&r, 8, p, 4).graph()));
    }
    variant_invariance(&graphs).unwrap();
}

#[test]
fn full_batch_matches_reference() {
    let r = row("MHA-2").unwrap();
    let g = BenchConfig::new(&r, 32, Precision::Int8, 4).graph();
    oracle_equivalence(&[("MHA-2 int8 b32".into(), g)], 4).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_graphs_match_reference(seed in 1000u64..1_000_000, workers in 1usize..4) {
        let g = random_graph(seed);
        let c = compile(&g, &CompileOptions::default()).unwrap();
        let inputs = random_inputs(&g, seed);
        let want = eval_graph(&g, &inputs).unwrap();
        let got = run_compiled(&c, &inputs, workers);
        for (i, t) in g.outputs.iter().enumerate() {
            let d = compare(&got[i], &want[t], Tolerance::default());
            prop_assert_eq!(d.violations, 0, "output {} max_abs {:e}", t, d.max_abs);
        }
    }
}
