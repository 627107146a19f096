mod common;

use common::*;
use proptest::prelude::*;
use tgc::graph::DataType;
use tgc::template::{candidate_grid, choose_params, MachineModel};

#[test]
fn heuristic_matches_exhaustive_search() {
    let o = c3_params_search();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn square_problem_uses_every_core() {
    let mm = MachineModel::default();
    let p = choose_params(256, 256, 256, 1, DataType::F32, &mm);
    assert_eq!(p.mpn * p.npn, 4, "{p}");
}

#[test]
fn single_core_never_partitions() {
    let mm = MachineModel::default().with_cores(1);
    for (m, n, k) in [(256, 256, 256), (1, 512, 64), (500, 3, 77)] {
        let p = choose_params(m, n, k, 1, DataType::U8, &mm);
        assert_eq!((p.mpn, p.npn), (1, 1), "{p}");
    }
}

#[test]
fn gemv_reports_padding() {
    let p = choose_params(1, 256, 256, 1, DataType::F32, &MachineModel::default());
    assert!(p.m_padding_ratio() >= 16.0, "{p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chosen_params_are_grid_members(m in 1usize..700, n in 1usize..700, k in 1usize..700, batch in 1usize..4, cores in 1usize..9, int8: bool) {
        let mm = MachineModel::default().with_cores(cores);
        let dtype = if int8 { DataType::U8 } else { DataType::F32 };
        let p = choose_params(m, n, k, batch, dtype, &mm);
        prop_assert!(candidate_grid(m, n, k, batch, dtype, &mm).contains(&p));
        prop_assert!(p.mp() >= m && p.mp() - m < p.mb * p.mpn);
        prop_assert!(p.np() >= n && p.kp() >= k);
        prop_assert_eq!(p.ksn % p.bs, 0);
        if batch > 1 {
            prop_assert_eq!((p.mpn, p.npn), (1, 1));
        }
    }
}
