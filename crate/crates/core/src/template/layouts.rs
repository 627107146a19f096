use crate::graph::LayoutDesc;

use super::params::MatmulParams;

/// Blocked layouts the template wants for A, B and C of a rank-`rank` matmul:
/// `A' = [.., M/MB, K/KB, MB, KB]`, `B' = [.., K/KB, N/NB, NB, KB]`,
/// `C' = [.., M/MB, N/NB, MB, NB]`.
pub fn desired_layouts(p: &MatmulParams, rank: usize) -> (LayoutDesc, LayoutDesc, LayoutDesc) {
    (LayoutDesc::blocked2d(rank, p.mb, p.kb, true), LayoutDesc::blocked2d(rank, p.kb, p.nb, false), LayoutDesc::blocked2d(rank, p.mb, p.nb, true))
}
