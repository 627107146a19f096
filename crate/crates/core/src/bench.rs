//! Benchmark harness: times the reference evaluator and three compiled
//! variants of the same graph after checking that they agree.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::compile::{compile, CompileError, CompileOptions};
use crate::graph::{Graph, TensorId};
use crate::oracle::{eval_graph, OracleError};
use crate::runtime::{median, RunError, RuntimeStats};
use crate::template::MachineModel;
use crate::value::{compare, Diff, Tolerance};
use crate::workloads::{random_inputs, BenchConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Variant {
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "unfused")]
    Unfused,
    #[serde(rename = "fused")]
    Fused,
    #[serde(rename = "fused+coarse")]
    FusedCoarse,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Naive, Variant::Unfused, Variant::Fused, Variant::FusedCoarse];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Unfused => "unfused",
            Variant::Fused => "fused",
            Variant::FusedCoarse => "fused+coarse",
        }
    }

    /// Compile options for a compiled variant; `None` for the naive evaluator.
    pub fn options(self, base: &CompileOptions) -> Option<CompileOptions> {
        let (fuse, coarse) = match self {
            Variant::Naive => return None,
            Variant::Unfused => (false, false),
            Variant::Fused => (true, false),
            Variant::FusedCoarse => (true, true),
        };
        let mut o = base.clone();
        o.pipeline.fuse = fuse;
        o.pipeline.coarse_grain = coarse;
        Some(o)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repeats: usize,
    pub workers: usize,
    pub seed: u64,
    pub compile: CompileOptions,
    pub variants: Vec<Variant>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 3,
            repeats: 10,
            workers: MachineModel::host().cores,
            seed: 0,
            compile: CompileOptions::default(),
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub median_ns: u64,
    /// Naive median divided by this variant's median.
    pub speedup_vs_naive: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<RuntimeStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub label: String,
    pub workers: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub variants: Vec<VariantResult>,
    /// Pairwise ratios such as `fused/unfused` (baseline median over variant median).
    pub speedups: BTreeMap<String, f64>,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{variant}: {source}")]
    Compile { variant: &'static str, source: CompileError },
    #[error("{variant}: {source}")]
    Run { variant: &'static str, source: RunError },
    #[error("reference evaluation failed: {0}")]
    Oracle(#[from] OracleError),
    #[error("{variant} disagrees with the reference on output {output}: {diff:?}")]
    Disagree { variant: &'static str, output: TensorId, diff: Diff },
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        return 0.0;
    }
    (num as f64 / den as f64 * 1000.0).round() / 1000.0
}

/// Benchmarks one generated workload.
pub fn run_bench(cfg: &BenchConfig, opts: &BenchOptions) -> Result<BenchResult, BenchError> {
    bench_graph(&cfg.label(), &cfg.graph(), opts)
}

/// Benchmarks `g` with seeded random inputs. Every compiled variant must
/// match the reference evaluator before any timing is reported.
pub fn bench_graph(label: &str, g: &Graph, opts: &BenchOptions) -> Result<BenchResult, BenchError> {
    let inputs = random_inputs(g, opts.seed);
    let reference = eval_graph(g, &inputs)?;
    let mut compiled = Vec::new();
    for &v in &opts.variants {
        let Some(o) = v.options(&opts.compile) else { continue };
        let c = compile(g, &o).map_err(|source| BenchError::Compile { variant: v.name(), source })?;
        let ordered = c.order_inputs(&inputs).map_err(|source| BenchError::Run { variant: v.name(), source })?;
        let mut ctx = c.context(opts.workers);
        let outs = ctx.run(&ordered).map_err(|source| BenchError::Run { variant: v.name(), source })?;
        for (i, t) in g.outputs.iter().enumerate() {
            let diff = compare(&outs[i], &reference[t], Tolerance::default());
            if diff.violations > 0 {
                return Err(BenchError::Disagree { variant: v.name(), output: *t, diff });
            }
        }
        compiled.push((v, ctx, ordered));
    }

    let mut results = Vec::new();
    if opts.variants.contains(&Variant::Naive) {
        let mut times = Vec::new();
        for i in 0..opts.warmup + opts.repeats.max(1) {
            let t = Instant::now();
            std::hint::black_box(eval_graph(g, &inputs)?);
            if i >= opts.warmup {
                times.push(t.elapsed().as_nanos() as u64);
            }
        }
        results.push(VariantResult { variant: Variant::Naive, median_ns: median(&times), speedup_vs_naive: 1.0, stats: None });
    }
    for (v, mut ctx, ordered) in compiled {
        let (_, stats, totals) = ctx.profile(&ordered, opts.warmup, opts.repeats).map_err(|source| BenchError::Run { variant: v.name(), source })?;
        results.push(VariantResult { variant: v, median_ns: median(&totals), speedup_vs_naive: 0.0, stats: Some(stats) });
    }
    let naive = results.iter().find(|r| r.variant == Variant::Naive).map(|r| r.median_ns);
    if let Some(n) = naive {
        for r in &mut results {
            r.speedup_vs_naive = ratio(n, r.median_ns);
        }
    }
    let med = |v: Variant| results.iter().find(|r| r.variant == v).map(|r| r.median_ns);
    let mut speedups = BTreeMap::new();
    for (num, den) in [(Variant::Unfused, Variant::Fused), (Variant::Fused, Variant::FusedCoarse), (Variant::Unfused, Variant::FusedCoarse)] {
        if let (Some(a), Some(b)) = (med(num), med(den)) {
            speedups.insert(format!("{}/{}", den.name(), num.name()), ratio(a, b));
        }
    }
    Ok(BenchResult { label: label.to_string(), workers: opts.workers, warmup: opts.warmup, repeats: opts.repeats, variants: results, speedups })
}

/// Aligned text table of several results; prints the same numbers as the JSON form.
pub fn render_text(results: &[BenchResult]) -> String {
    let mut out = String::new();
    let w = results.iter().map(|r| r.label.len()).max().unwrap_or(8).max(8);
    let _ = writeln!(out, "{:<w$}  {:<13}  {:>14}  {:>10}", "workload", "variant", "median_ns", "vs_naive");
    for r in results {
        for v in &r.variants {
            let _ = writeln!(out, "{:<w$}  {:<13}  {:>14}  {:>10.3}", r.label, v.variant.name(), v.median_ns, v.speedup_vs_naive);
        }
        for (k, s) in &r.speedups {
            let _ = writeln!(out, "{:<w$}  {:<28}  {:>10.3}", r.label, k, s);
        }
    }
    out
}
