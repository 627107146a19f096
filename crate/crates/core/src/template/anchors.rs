//! Anchor points of the matmul template, their access-cost table and the
//! anchor selection cost model.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::params::{LoopOrder, MachineModel, MatmulParams};

/// Splice points in the template loop nest. Pre-op anchors precede the
/// microkernel, post-op anchors follow it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnchorId {
    /// Inside `mpi`, before the `npi` loop.
    Pre1,
    /// Inside `npi`, before the `msi` loop.
    Pre2,
    /// Inside `msi`, before the `ksi` loop.
    Pre3,
    /// Inside `ksi`, before the `nsi` loop.
    Pre4,
    /// Inside `nsi`, right before the microkernel.
    Pre5,
    /// Inside `msi`, after the `ksi` loop.
    Post1,
    /// Inside `npi`, after the `msi` loop.
    Post2,
    /// Inside `mpi`, after the `npi` loop.
    Post3,
}

impl AnchorId {
    pub const PRE: [AnchorId; 5] = [AnchorId::Pre1, AnchorId::Pre2, AnchorId::Pre3, AnchorId::Pre4, AnchorId::Pre5];
    pub const POST: [AnchorId; 3] = [AnchorId::Post1, AnchorId::Post2, AnchorId::Post3];

    pub fn is_pre(self) -> bool {
        self < AnchorId::Post1
    }
}

impl fmt::Display for AnchorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnchorId::Pre1 => "pre#1",
            AnchorId::Pre2 => "pre#2",
            AnchorId::Pre3 => "pre#3",
            AnchorId::Pre4 => "pre#4",
            AnchorId::Pre5 => "pre#5",
            AnchorId::Post1 => "post#1",
            AnchorId::Post2 => "post#2",
            AnchorId::Post3 => "post#3",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operand {
    A,
    B,
    C,
}

/// Per-core access profile of the tensor slice visible at one anchor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorCostRow {
    pub anchor: AnchorId,
    pub operand: Operand,
    pub working_set_elems: usize,
    pub invocations_per_core: usize,
    pub total_accesses_per_core: usize,
}

/// One row per (anchor, operand): A and B for each pre-op anchor, C for each
/// post-op anchor.
pub fn anchor_table(p: &MatmulParams) -> Vec<AnchorCostRow> {
    let (mb, nb, kb, bs) = (p.mb, p.nb, p.kb, p.bs);
    let (msn, nsn, ksn) = (p.msn, p.nsn, p.ksn);
    let (msbn, nsbn, npsn) = (p.msbn(), p.nsbn(), p.npsn());
    let row = |anchor, operand, ws: usize, inv: usize, total: usize| AnchorCostRow {
        anchor,
        operand,
        working_set_elems: ws,
        invocations_per_core: inv,
        total_accesses_per_core: total,
    };
    use AnchorId::*;
    use Operand::*;
    vec![
        row(Pre1, A, msn * ksn * mb * kb, 1, msn * mb * ksn * kb),
        row(Pre1, B, ksn * npsn * nb * kb, 1, npsn * nb * ksn * kb),
        row(Pre2, A, msn * ksn * mb * kb, 1, msn * mb * ksn * kb),
        row(Pre2, B, ksn * nsn * nb * kb, 1, nsn * nb * ksn * kb),
        row(Pre3, A, ksn * mb * kb, msn, msn * mb * ksn * kb),
        row(Pre3, B, ksn * nsn * nb * kb, msn, msn * nsn * nb * ksn * kb),
        row(Pre4, A, bs * mb * kb, msn * ksn / bs, msn * mb * ksn * kb),
        row(Pre4, B, bs * nsn * nb * kb, msn * ksn / bs, msn * nsn * nb * ksn * kb),
        row(Pre5, A, bs * mb * kb, msn * nsn * ksn / bs, msn * mb * ksn * kb * nsn),
        row(Pre5, B, bs * kb * nb, msn * nsn * ksn / bs, msn * nsn * nb * ksn * kb),
        row(Post1, C, mb * nsbn, msn, msbn * nsbn),
        row(Post2, C, msbn * nsbn, 1, msbn * nsbn),
        // the full padded row of blocks, NPSN * NB columns
        row(Post3, C, msbn * npsn * nb, 1, msbn * npsn * nb),
    ]
}

pub fn table_row(p: &MatmulParams, anchor: AnchorId, operand: Operand) -> AnchorCostRow {
    anchor_table(p).into_iter().find(|r| r.anchor == anchor && r.operand == operand).expect("anchor/operand pair is in the table")
}

/// Where a fusible op is placed relative to the template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Pre(Operand),
    Post,
}

/// Cost-relevant description of a fusible op candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusibleDesc {
    /// Bytes touched per output element: its inputs, output and extra inputs.
    pub bytes_per_elem: f64,
    /// Bytes per element of the buffer the fused op materializes in the anchor's slice.
    pub slice_bytes_per_elem: f64,
    /// Logical elements of the op's full output.
    pub full_elems: usize,
    pub is_reduction: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorChoice {
    Anchor(AnchorId),
    NoFuse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorDecision {
    pub choice: AnchorChoice,
    /// Every option evaluated, in evaluation order.
    pub costs: Vec<(AnchorChoice, f64)>,
}

/// Anchors a fusible op may legally take for this template instance.
pub fn legal_anchors(side: Side, p: &MatmulParams, is_reduction: bool) -> Vec<AnchorId> {
    match side {
        Side::Pre(_) => match p.loop_order {
            LoopOrder::MKN => AnchorId::PRE.to_vec(),
            LoopOrder::MNK => AnchorId::PRE[..3].to_vec(),
        },
        Side::Post => {
            if is_reduction && p.npn > 1 {
                vec![AnchorId::Post3]
            } else {
                AnchorId::POST.to_vec()
            }
        }
    }
}

/// Estimated cost of fusing at `anchor`.
pub fn anchor_cost(f: &FusibleDesc, side: Side, anchor: AnchorId, p: &MatmulParams, mm: &MachineModel) -> f64 {
    let operand = match side {
        Side::Pre(o) => o,
        Side::Post => Operand::C,
    };
    let r = table_row(p, anchor, operand);
    let ws_bytes = r.working_set_elems as f64 * f.slice_bytes_per_elem;
    let mut cost = r.total_accesses_per_core as f64 * f.bytes_per_elem * mm.level_cost(ws_bytes);
    if anchor.is_pre() {
        cost += ws_bytes * mm.dram_cost() / mm.l1 as f64;
    }
    cost
}

/// Cost of running the op as its own streaming loop over the whole tensor.
pub fn nofuse_cost(f: &FusibleDesc, mm: &MachineModel) -> f64 {
    f.full_elems as f64 / mm.cores as f64 * f.bytes_per_elem * mm.dram_cost()
}

/// Argmin over the legal anchors and not fusing; earlier options win ties.
pub fn select_anchor(f: &FusibleDesc, side: Side, p: &MatmulParams, mm: &MachineModel) -> AnchorDecision {
    let mut costs = Vec::new();
    for a in legal_anchors(side, p, f.is_reduction) {
        costs.push((AnchorChoice::Anchor(a), anchor_cost(f, side, a, p, mm)));
    }
    costs.push((AnchorChoice::NoFuse, nofuse_cost(f, mm)));
    let mut best = 0;
    for (i, c) in costs.iter().enumerate() {
        if c.1 < costs[best].1 {
            best = i;
        }
    }
    AnchorDecision { choice: costs[best].0, costs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DataType;

    fn example() -> MatmulParams {
        // MSN=4, NSN=4, KSN=8, BS=2, MB=NB=KB=32
        MatmulParams::new((128, 128, 256), 1, DataType::F32, (32, 32, 32), 2, (1, 1), LoopOrder::MKN).unwrap()
    }

    #[test]
    fn post1_example_row() {
        let r = table_row(&example(), AnchorId::Post1, Operand::C);
        assert_eq!(r.working_set_elems, 4096);
        assert_eq!(r.invocations_per_core, 4);
        assert_eq!(r.total_accesses_per_core, 16384);
    }

    #[test]
    fn pre4_invocations() {
        assert_eq!(table_row(&example(), AnchorId::Pre4, Operand::A).invocations_per_core, 16);
    }

    #[test]
    fn pre3_pre4_coincide_when_bs_is_ksn() {
        let p = MatmulParams::new((128, 128, 64), 1, DataType::F32, (32, 32, 32), 2, (1, 1), LoopOrder::MKN).unwrap();
        assert_eq!(p.bs, p.ksn);
        assert_eq!(table_row(&p, AnchorId::Pre3, Operand::A).invocations_per_core, table_row(&p, AnchorId::Pre4, Operand::A).invocations_per_core);
    }

    #[test]
    fn rows_multiply_out() {
        for r in anchor_table(&example()) {
            assert_eq!(r.working_set_elems * r.invocations_per_core, r.total_accesses_per_core, "{r:?}");
        }
    }

    fn relu() -> FusibleDesc {
        FusibleDesc { bytes_per_elem: 8.0, slice_bytes_per_elem: 8.0, full_elems: 128 * 128, is_reduction: false }
    }

    #[test]
    fn relu_lands_at_post1() {
        let d = select_anchor(&relu(), Side::Post, &example(), &MachineModel::default());
        assert_eq!(d.choice, AnchorChoice::Anchor(AnchorId::Post1));
    }

    #[test]
    fn entry_reorder_prefers_pre4() {
        let f = FusibleDesc { bytes_per_elem: 8.0, slice_bytes_per_elem: 4.0, full_elems: 128 * 256, is_reduction: false };
        let d = select_anchor(&f, Side::Pre(Operand::A), &example(), &MachineModel::default());
        assert_eq!(d.choice, AnchorChoice::Anchor(AnchorId::Pre4));
        let cost = |a| d.costs.iter().find(|c| c.0 == AnchorChoice::Anchor(a)).unwrap().1;
        assert!(cost(AnchorId::Pre5) > cost(AnchorId::Pre4));
    }

    #[test]
    fn reduction_with_split_n_only_post3() {
        let p = MatmulParams::new((128, 128, 256), 1, DataType::F32, (32, 32, 32), 2, (1, 2), LoopOrder::MKN).unwrap();
        assert_eq!(legal_anchors(Side::Post, &p, true), vec![AnchorId::Post3]);
    }
}
