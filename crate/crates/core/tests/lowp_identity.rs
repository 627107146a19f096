mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tgc::compile::{compile, CompileOptions};
use tgc::oracle::eval_graph;
use tgc::value::DenseValue;

#[test]
fn identity_on_kernel_and_compiled_graphs() {
    let o = c2_int8_identity();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn reference_evaluator_computes_the_unrewritten_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inst = int8_instance(&mut rng);
    let g = dequant_matmul_graph(&inst);
    let inputs =
        [(g.inputs[0], DenseValue::u8(vec![inst.m, inst.k], inst.a.clone())), (g.inputs[1], DenseValue::s8(vec![inst.k, inst.n], inst.b.clone()))].into();
    let got = eval_graph(&g, &inputs).unwrap();
    let want = direct_shifted_product(&inst.a, &inst.b, inst.za as i64, inst.m, inst.n, inst.k);
    let got = got[&g.outputs[0]].as_f32().unwrap();
    assert!(want.iter().zip(got).all(|(w, g)| *w as f32 == *g));
}

#[test]
fn rewrite_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = dequant_matmul_graph(&int8_instance(&mut rng));
    let c = compile(&g, &CompileOptions::default()).unwrap();
    assert!(!c.passes.report.low_precision.is_empty());
    let counts = &c.passes.report.final_op_counts;
    assert!(!counts.contains_key("Dequantize"), "{counts:?}");
}

fn instance() -> impl Strategy<Value = Int8Instance> {
    (1usize..=64, 1usize..=64, 1usize..=64, any::<u8>()).prop_flat_map(|(m, n, k, za)| {
        (prop::collection::vec(any::<u8>(), m * k), prop::collection::vec(any::<i8>(), k * n)).prop_map(move |(a, b)| Int8Instance { m, n, k, za, a, b })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn compensation_is_exact(inst in instance()) {
        let want = direct_shifted_product(&inst.a, &inst.b, inst.za as i64, inst.m, inst.n, inst.k);
        let got = compensated_product(&inst.a, &inst.b, inst.za as i32, inst.m, inst.n, inst.k);
        prop_assert!(want.iter().zip(&got).all(|(w, g)| *w == *g as i64));
    }
}
