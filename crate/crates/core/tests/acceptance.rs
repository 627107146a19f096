//! Runs every acceptance check and prints one line per criterion. Failing
//! criteria are reported, not panicked on; the per-area test files assert
//! the attainable ones. Built without the libtest harness so the report is
//! always visible.

mod common;

use common::*;

fn main() {
    type Check = (&'static str, fn() -> Outcome);
    let checks: [Check; 9] = [
        ("1 oracle equivalence", c1_oracle_equivalence),
        ("2 int8 compensation identity", c2_int8_identity),
        ("3 parameter heuristic vs exhaustive", c3_params_search),
        ("4 anchor table and probe counts", c4_anchor_table),
        ("5 anchor selection on workloads", c5_anchor_selection),
        ("6 MLP-2 buffer reuse", c6_buffer_reuse),
        ("7 variant and worker invariance", c7_variant_invariance),
        ("8 speedups", c8_speedups),
        ("9 golden IR", c9_golden_ir),
    ];
    let mut passed = 0;
    for (name, f) in checks {
        let o = f();
        passed += o.pass as usize;
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{passed}/9 criteria pass");
}
