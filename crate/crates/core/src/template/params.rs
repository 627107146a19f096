//! Matmul template parameters and the analytic parameter heuristic.

use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::DataType;

/// Cache hierarchy and core count used by the cost models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineModel {
    pub cores: usize,
    pub l1: usize,
    pub l2: usize,
    pub llc: usize,
    /// Per-byte access weight for L1, L2, LLC and DRAM.
    pub level_costs: [f64; 4],
    /// f32 lanes per vector register.
    pub vector_lanes: usize,
}

impl Default for MachineModel {
    fn default() -> Self {
        MachineModel { cores: 4, l1: 48 * 1024, l2: 2 * 1024 * 1024, llc: 32 * 1024 * 1024, level_costs: [1.0, 4.0, 14.0, 60.0], vector_lanes: 16 }
    }
}

impl MachineModel {
    /// Default caches with the host's available parallelism as core count.
    pub fn host() -> Self {
        MachineModel { cores: std::thread::available_parallelism().map_or(1, |n| n.get()), ..Self::default() }
    }

    pub fn with_cores(mut self, cores: usize) -> Self {
        self.cores = cores.max(1);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.cores == 0 || self.vector_lanes == 0 {
            return Err("cores and vector_lanes must be >= 1".into());
        }
        if !(self.l1 < self.l2 && self.l2 < self.llc) {
            return Err(format!("cache sizes must satisfy l1 < l2 < llc (got {} {} {})", self.l1, self.l2, self.llc));
        }
        let w = self.level_costs;
        if !(w[0] > 0.0 && w[0] < w[1] && w[1] < w[2] && w[2] < w[3]) {
            return Err(format!("level_costs must be positive and strictly increasing (got {w:?})"));
        }
        Ok(())
    }

    /// Access weight of a working set of `bytes`.
    pub fn level_cost(&self, bytes: f64) -> f64 {
        let w = self.level_costs;
        if bytes <= self.l1 as f64 {
            w[0]
        } else if bytes <= self.l2 as f64 {
            w[1]
        } else if bytes <= self.llc as f64 {
            w[2]
        } else {
            w[3]
        }
    }

    pub fn dram_cost(&self) -> f64 {
        self.level_costs[3]
    }
}

/// Order of the three inner loops of the single-core kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoopOrder {
    /// msi -> ksi -> nsi
    #[default]
    MKN,
    /// msi -> nsi -> ksi
    MNK,
}

/// Instantiation parameters of the matmul template plus the problem size.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatmulParams {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Flattened batch count (1 for plain 2-D matmul).
    pub batch: usize,
    /// Input element type (f32, or u8 for the int8 path).
    pub dtype: DataType,
    pub mb: usize,
    pub nb: usize,
    pub kb: usize,
    pub bs: usize,
    pub mpn: usize,
    pub npn: usize,
    pub msn: usize,
    pub nsn: usize,
    pub ksn: usize,
    pub loop_order: LoopOrder,
}

impl MatmulParams {
    /// Builds parameters from block sizes and the core grid, deriving the
    /// per-core block counts.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        (m, n, k): (usize, usize, usize),
        batch: usize,
        dtype: DataType,
        (mb, nb, kb): (usize, usize, usize),
        bs: usize,
        (mpn, npn): (usize, usize),
        loop_order: LoopOrder,
    ) -> Result<Self, String> {
        if [m, n, k, batch, mb, nb, kb, bs, mpn, npn].contains(&0) {
            return Err("all matmul parameters must be >= 1".into());
        }
        let (mblocks, nblocks, kblocks) = (m.div_ceil(mb), n.div_ceil(nb), k.div_ceil(kb));
        if mblocks % mpn != 0 || nblocks % npn != 0 {
            return Err(format!("MPN={mpn}/NPN={npn} must divide the block counts {mblocks}/{nblocks}"));
        }
        if kblocks % bs != 0 {
            return Err(format!("BS={bs} must divide KSN={kblocks}"));
        }
        if batch > 1 && (mpn, npn) != (1, 1) {
            return Err("batched matmul requires MPN = NPN = 1".into());
        }
        Ok(MatmulParams { m, n, k, batch, dtype, mb, nb, kb, bs, mpn, npn, msn: mblocks / mpn, nsn: nblocks / npn, ksn: kblocks, loop_order })
    }

    pub fn es(&self) -> usize {
        self.dtype.size_bytes()
    }
    pub fn out_es(&self) -> usize {
        4
    }
    pub fn mp(&self) -> usize {
        self.mb * self.msn * self.mpn
    }
    pub fn np(&self) -> usize {
        self.nb * self.nsn * self.npn
    }
    pub fn kp(&self) -> usize {
        self.kb * self.ksn
    }
    pub fn msbn(&self) -> usize {
        self.mb * self.msn
    }
    pub fn nsbn(&self) -> usize {
        self.nb * self.nsn
    }
    pub fn ksbn(&self) -> usize {
        self.kb * self.ksn
    }
    pub fn mpsn(&self) -> usize {
        self.msn * self.mpn
    }
    pub fn npsn(&self) -> usize {
        self.nsn * self.npn
    }
    pub fn is_batched(&self) -> bool {
        self.batch > 1
    }

    /// Ratio of padded to logical rows of A.
    pub fn m_padding_ratio(&self) -> f64 {
        self.mp() as f64 / self.m as f64
    }
}

impl fmt::Display for MatmulParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "M={} N={} K={} batch={} MB={} NB={} KB={} BS={} MPN={} NPN={} MSN={} NSN={} KSN={} order={:?}",
            self.m, self.n, self.k, self.batch, self.mb, self.nb, self.kb, self.bs, self.mpn, self.npn, self.msn, self.nsn, self.ksn, self.loop_order
        )
    }
}

pub const BLOCK_CHOICES: [usize; 3] = [16, 32, 64];

fn block_options(dim: usize) -> Vec<usize> {
    let cap = dim.div_ceil(16) * 16;
    BLOCK_CHOICES.iter().copied().filter(|&b| b <= cap.max(16)).collect()
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Largest divisor of `ksn` whose BS blocks of A and B plus the C tile fit in half of L1.
pub fn batch_size_for(mb: usize, nb: usize, kb: usize, ksn: usize, es: usize, mm: &MachineModel) -> usize {
    divisors(ksn).into_iter().rev().find(|&bs| (mb * kb + nb * kb) * es * bs + mb * nb * 4 <= mm.l1 / 2).unwrap_or(1)
}

/// Every parameter set the heuristic considers for this problem.
pub fn candidate_grid(m: usize, n: usize, k: usize, batch: usize, dtype: DataType, mm: &MachineModel) -> Vec<MatmulParams> {
    let es = dtype.size_bytes();
    let mut nbs: Vec<usize> = block_options(n).into_iter().filter(|b| b % mm.vector_lanes == 0).collect();
    if nbs.is_empty() {
        nbs = vec![*block_options(n).last().unwrap()];
    }
    let mut out = Vec::new();
    for &mb in &block_options(m) {
        for &nb in &nbs {
            for &kb in &block_options(k) {
                let (mblocks, nblocks, ksn) = (m.div_ceil(mb), n.div_ceil(nb), k.div_ceil(kb));
                let bs = batch_size_for(mb, nb, kb, ksn, es, mm);
                let grids: Vec<(usize, usize)> = if batch > 1 {
                    vec![(1, 1)]
                } else {
                    let mut v = Vec::new();
                    for mpn in divisors(mblocks) {
                        for npn in divisors(nblocks) {
                            if mpn * npn <= mm.cores {
                                v.push((mpn, npn));
                            }
                        }
                    }
                    // utilization maximal-first
                    v.sort_by_key(|&(a, b)| (Reverse(a * b), a));
                    v
                };
                for (mpn, npn) in grids {
                    let nsn = nblocks / npn;
                    let order = if nsn * nb * kb * es > mm.l2 { LoopOrder::MNK } else { LoopOrder::MKN };
                    let p = MatmulParams::new((m, n, k), batch, dtype, (mb, nb, kb), bs, (mpn, npn), order).expect("grid candidates are valid");
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Load-imbalance part of the cost: relative excess of the busiest core's
/// padded FLOPs over the mean useful FLOPs.
pub fn imbalance_penalty(p: &MatmulParams, mm: &MachineModel) -> f64 {
    let items = if p.is_batched() { p.batch } else { p.mpn * p.npn };
    let unit = 2.0 * (p.msbn() * p.nsbn() * p.kp()) as f64;
    let valid = 2.0 * (p.m * p.n * p.k * p.batch) as f64;
    let mean = valid / mm.cores as f64;
    let ceil_work = items.div_ceil(mm.cores) as f64 * unit;
    (ceil_work - mean) / mean
}

/// Single-core kernel part of the cost: weighted bytes streamed per FLOP.
pub fn singlecore_cost(p: &MatmulParams, mm: &MachineModel) -> f64 {
    let es = p.es() as f64;
    let (mb, nb, kb) = (p.mb as f64, p.nb as f64, p.kb as f64);
    let (msn, nsn, ksn, bs) = (p.msn as f64, p.nsn as f64, p.ksn as f64, p.bs as f64);
    let a_bytes = msn * nsn * ksn * mb * kb * es;
    let b_bytes = msn * nsn * ksn * nb * kb * es;
    let c_bytes = 2.0 * msn * nsn * (ksn / bs) * mb * nb * 4.0;
    let (a_fp, c_fp) = match p.loop_order {
        LoopOrder::MKN => (bs * mb * kb * es, nsn * mb * nb * 4.0),
        LoopOrder::MNK => (ksn * mb * kb * es, mb * nb * 4.0),
    };
    let b_fp = ksn * nsn * nb * kb * es;
    let flops = 2.0 * (p.msbn() * p.nsbn() * p.kp()) as f64;
    (a_bytes * mm.level_cost(a_fp) + b_bytes * mm.level_cost(b_fp) + c_bytes * mm.level_cost(c_fp)) / flops
}

pub fn params_cost(p: &MatmulParams, mm: &MachineModel) -> f64 {
    imbalance_penalty(p, mm) + singlecore_cost(p, mm)
}

/// Tie-break key: smaller blocks first, then higher core utilization, then smaller MPN.
pub fn tie_key(p: &MatmulParams) -> (usize, usize, usize, usize, Reverse<usize>, usize) {
    (p.mb, p.nb, p.kb, p.bs, Reverse(p.mpn * p.npn), p.mpn)
}

/// Picks the minimum-cost parameters by branch-and-bound over the candidate
/// grid, using the imbalance penalty as a lower bound.
pub fn choose_params(m: usize, n: usize, k: usize, batch: usize, dtype: DataType, mm: &MachineModel) -> MatmulParams {
    let mut cands: Vec<(f64, MatmulParams)> = candidate_grid(m, n, k, batch, dtype, mm).into_iter().map(|p| (imbalance_penalty(&p, mm), p)).collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| tie_key(&a.1).cmp(&tie_key(&b.1))));
    let mut best: Option<(f64, MatmulParams)> = None;
    for (lb, p) in cands {
        if let Some((bc, _)) = &best {
            // singlecore cost is strictly positive, so nothing at or past this bound can tie
            if lb >= *bc {
                break;
            }
        }
        let c = lb + singlecore_cost(&p, mm);
        let better = match &best {
            None => true,
            Some((bc, bp)) => c < *bc || (c == *bc && tie_key(&p) < tie_key(bp)),
        };
        if better {
            best = Some((c, p));
        }
    }
    best.expect("candidate grid is never empty").1
}
