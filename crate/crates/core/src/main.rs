use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tgc::bench::{render_text, run_bench, BenchOptions};
use tgc::compile::{compile, CompileError, CompileOptions, Compiled, TIR_STAGES};
use tgc::graph::json::parse_graph;
use tgc::graph::{DataType, Graph};
use tgc::oracle::eval_graph;
use tgc::passes::STAGES;
use tgc::template::MachineModel;
use tgc::value::{compare, parse_values, DenseValue, NamedValue, Tolerance};
use tgc::workloads::{random_inputs, row, table, BenchConfig, Precision};

#[derive(Parser)]
#[command(name = "tgc", version, about = "Miniature tensor graph compiler")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a JSON graph and print the requested dumps.
    Compile {
        #[command(flatten)]
        source: GraphSource,
        #[command(flatten)]
        pipeline: PipelineFlags,
        #[command(flatten)]
        dumps: DumpFlags,
    },
    /// Compile and execute a JSON graph.
    Run {
        #[command(flatten)]
        source: GraphSource,
        #[command(flatten)]
        pipeline: PipelineFlags,
        #[command(flatten)]
        dumps: DumpFlags,
        /// Values file with every graph input.
        #[arg(long, conflicts_with = "random_seed")]
        inputs: Option<PathBuf>,
        /// Generate seeded random inputs instead of reading a file.
        #[arg(long)]
        random_seed: Option<u64>,
        /// Compare against the reference evaluator; exit 3 beyond tolerance.
        #[arg(long)]
        check_oracle: bool,
        /// Worker threads (default: --cores, else the host's parallelism).
        #[arg(long)]
        workers: Option<usize>,
        /// Write outputs as a values file.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Profile 3 warmups + 10 runs and write runtime stats JSON here.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Time the reference evaluator and compiled variants on generated workloads.
    Bench {
        #[command(flatten)]
        pipeline: PipelineFlags,
        /// Workload names (default: all rows).
        #[arg(long = "workload")]
        workloads: Vec<String>,
        /// f32 or int8 (repeatable; default both).
        #[arg(long = "precision")]
        precisions: Vec<Precision>,
        /// Batch sizes before scaling (default: the row's list).
        #[arg(long = "batch")]
        batches: Vec<usize>,
        /// Divisor for batch and sequence length.
        #[arg(long, default_value_t = 4)]
        scale_factor: usize,
        /// Timed repeats after 3 warmups.
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(10..))]
        repeats: u64,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 0)]
        random_seed: u64,
        /// Also write the results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print every graph stage and every loop-IR stage.
    Dump {
        #[command(flatten)]
        source: GraphSource,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
}

#[derive(Args, Clone)]
struct GraphSource {
    /// JSON graph file.
    #[arg(required_unless_present = "workload", conflicts_with = "workload")]
    graph: Option<PathBuf>,
    /// Use a generated workload instead of a file.
    #[arg(long)]
    workload: Option<String>,
    #[arg(long, default_value = "f32", requires = "workload")]
    precision: Precision,
    /// Batch size before scaling (default: the row's smallest).
    #[arg(long, requires = "workload")]
    batch: Option<usize>,
    #[arg(long, default_value_t = 4, requires = "workload")]
    scale_factor: usize,
}

impl GraphSource {
    fn load(&self) -> Result<Graph, Fail> {
        match (&self.graph, &self.workload) {
            (Some(p), _) => parse_graph(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display()))),
            (None, Some(w)) => {
                let r = row(w).ok_or_else(|| usage(format!("unknown workload `{w}`")))?;
                let b = self.batch.unwrap_or(r.batches[0]);
                Ok(BenchConfig::new(&r, b, self.precision, self.scale_factor).graph())
            }
            (None, None) => Err(usage("no graph given")),
        }
    }
}

#[derive(Args, Clone)]
struct PipelineFlags {
    #[arg(long)]
    no_fuse: bool,
    #[arg(long)]
    no_coarse_grain: bool,
    #[arg(long)]
    no_buffer_reuse: bool,
    /// Softmax without the max subtraction.
    #[arg(long)]
    fast_softmax: bool,
    /// Core count of the machine model.
    #[arg(long)]
    cores: Option<usize>,
    /// Machine model JSON: {cores, l1, l2, llc, level_costs, vector_lanes}.
    #[arg(long)]
    machine: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DumpFlags {
    /// Graph stage to print (repeatable, or `all`).
    #[arg(long)]
    dump_graph: Vec<String>,
    /// Loop-IR stage to print (repeatable, or `all`).
    #[arg(long)]
    dump_tir: Vec<String>,
    /// Print the chosen matmul parameters.
    #[arg(long)]
    dump_params: bool,
}

/// Failure with its process exit code.
struct Fail {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail { code: 2, msg: msg.into() }
}

fn read(path: &Path) -> Result<String, Fail> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Fail> {
    std::fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

impl PipelineFlags {
    fn machine(&self) -> Result<MachineModel, Fail> {
        let mut m = match &self.machine {
            Some(p) => serde_json::from_str::<MachineModel>(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
            None => MachineModel::default(),
        };
        if let Some(c) = self.cores {
            m = m.with_cores(c);
        }
        m.validate().map_err(|e| usage(format!("machine model: {e}")))?;
        Ok(m)
    }

    fn options(&self) -> Result<CompileOptions, Fail> {
        let mut o = CompileOptions { buffer_reuse: !self.no_buffer_reuse, ..Default::default() };
        o.pipeline.fuse = !self.no_fuse;
        o.pipeline.coarse_grain = !self.no_coarse_grain;
        o.pipeline.fast_softmax = self.fast_softmax;
        o.pipeline.machine = self.machine()?;
        Ok(o)
    }

    fn workers(&self, explicit: Option<usize>) -> usize {
        explicit.or(self.cores).unwrap_or_else(|| MachineModel::host().cores).max(1)
    }
}

fn build(g: &Graph, flags: &PipelineFlags) -> Result<Compiled, Fail> {
    compile(g, &flags.options()?).map_err(|e| match e {
        CompileError::Verify(_) => Fail { code: 3, msg: e.to_string() },
        e => usage(e.to_string()),
    })
}

fn expand(requested: &[String], all: &[&str], what: &str) -> Result<Vec<String>, Fail> {
    let mut out = Vec::new();
    for r in requested {
        if r == "all" {
            out.extend(all.iter().map(|s| s.to_string()));
        } else if all.contains(&r.as_str()) {
            out.push(r.clone());
        } else {
            return Err(usage(format!("unknown {what} stage `{r}` (expected one of {}, all)", all.join(", "))));
        }
    }
    Ok(out)
}

fn print_dumps(c: &Compiled, d: &DumpFlags) -> Result<(), Fail> {
    for s in expand(&d.dump_graph, &STAGES, "graph")? {
        println!("== graph: {s}\n{}", c.dump_graph(&s).unwrap_or_default());
    }
    for s in expand(&d.dump_tir, &TIR_STAGES, "tir")? {
        println!("== tir: {s}\n{}", c.dump_tir(&s).unwrap_or_default());
    }
    if d.dump_params {
        let params: BTreeMap<String, _> = c.passes.params.iter().map(|(k, v)| (k.to_string(), v)).collect();
        println!("== params\n{}", serde_json::to_string_pretty(&params).unwrap());
    }
    Ok(())
}

fn summary(c: &Compiled) {
    let m = c.module();
    let calls = m.callees(m.entry).len();
    let fold = m.fold.map_or(0, |f| m.callees(f).len());
    println!(
        "compiled: {} functions, {calls} entry calls, {fold} fold calls, arena {} bytes, scratch {} bytes/worker",
        m.funcs.len(),
        c.plan().arena_bytes,
        c.plan().scratch_bytes
    );
}

fn describe(v: &DenseValue) -> String {
    let n = v.numel().max(1) as f64;
    let sum: f64 = (0..v.numel()).map(|i| v.get_f64(i)).sum();
    format!("{}{:?} mean={:.6}", v.dtype(), v.shape, sum / n)
}

fn oracle_report(g: &Graph, inputs: &BTreeMap<tgc::graph::TensorId, DenseValue>, outs: &[DenseValue]) -> Result<(bool, String), Fail> {
    let want = eval_graph(g, inputs).map_err(|e| usage(format!("reference evaluation: {e}")))?;
    let mut ok = true;
    let mut worst: BTreeMap<DataType, (f64, f64)> = BTreeMap::new();
    for (t, got) in g.outputs.iter().zip(outs) {
        let d = compare(got, &want[t], Tolerance::default());
        ok &= d.violations == 0;
        let e = worst.entry(got.dtype()).or_insert((0.0, 0.0));
        e.0 = e.0.max(d.max_abs);
        e.1 = e.1.max(d.max_rel);
    }
    let parts: Vec<String> = worst
        .iter()
        .map(|(dt, (abs, rel))| match dt {
            DataType::F32 => format!("max_abs_diff={abs:.3e} max_rel_diff={rel:.3e}"),
            dt => format!("max_{dt}_diff={abs}"),
        })
        .collect();
    Ok((ok, format!("{} {}", if ok { "PASS" } else { "FAIL" }, parts.join(" "))))
}

fn run(cli: Cli) -> Result<(), Fail> {
    match cli.cmd {
        Cmd::Compile { source, pipeline, dumps } => {
            let g = source.load()?;
            let c = build(&g, &pipeline)?;
            summary(&c);
            print_dumps(&c, &dumps)
        }
        Cmd::Dump { source, pipeline } => {
            let g = source.load()?;
            let c = build(&g, &pipeline)?;
            let all = DumpFlags { dump_graph: vec!["all".into()], dump_tir: vec!["all".into()], dump_params: true };
            print_dumps(&c, &all)
        }
        Cmd::Run { source, pipeline, dumps, inputs, random_seed, check_oracle, workers, output, stats } => {
            let g = source.load()?;
            let c = build(&g, &pipeline)?;
            print_dumps(&c, &dumps)?;
            let values = match (&inputs, random_seed) {
                (Some(p), _) => parse_values(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
                (None, Some(s)) => random_inputs(&g, s),
                (None, None) => return Err(usage("give --inputs <file> or --random-seed <n>")),
            };
            let ordered = c.order_inputs(&values).map_err(|e| usage(format!("inputs: {e}")))?;
            let mut ctx = c.context(pipeline.workers(workers));
            let outs = ctx.run(&ordered).map_err(|e| usage(format!("inputs: {e}")))?;
            for (t, v) in g.outputs.iter().zip(&outs) {
                println!("output {t}: {}", describe(v));
            }
            if let Some(p) = output {
                let named: Vec<NamedValue> = g.outputs.iter().zip(&outs).map(|(t, v)| NamedValue { id: *t, value: v.clone() }).collect();
                write(&p, &serde_json::to_string(&named).unwrap())?;
            }
            if let Some(p) = stats {
                let (_, st, _) = ctx.profile(&ordered, 3, 10).map_err(|e| usage(e.to_string()))?;
                write(&p, &serde_json::to_string_pretty(&st).unwrap())?;
            }
            if check_oracle {
                let (ok, line) = oracle_report(&g, &values, &outs)?;
                println!("{line}");
                if !ok {
                    return Err(Fail { code: 3, msg: "outputs differ from the reference beyond tolerance".into() });
                }
            }
            Ok(())
        }
        Cmd::Bench { pipeline, workloads, precisions, batches, scale_factor, repeats, workers, random_seed, json } => {
            let rows = if workloads.is_empty() {
                table()
            } else {
                workloads.iter().map(|w| row(w).ok_or_else(|| usage(format!("unknown workload `{w}`")))).collect::<Result<_, _>>()?
            };
            let precisions = if precisions.is_empty() { vec![Precision::F32, Precision::Int8] } else { precisions };
            let opts = BenchOptions {
                warmup: 3,
                repeats: repeats as usize,
                workers: pipeline.workers(workers),
                seed: random_seed,
                compile: pipeline.options()?,
                ..Default::default()
            };
            let mut results = Vec::new();
            for r in &rows {
                let bs = if batches.is_empty() { r.batches.clone() } else { batches.clone() };
                for &p in &precisions {
                    for &b in &bs {
                        let cfg = BenchConfig::new(r, b, p, scale_factor);
                        let res = run_bench(&cfg, &opts).map_err(|e| Fail { code: 3, msg: format!("{}: {e}", cfg.label()) })?;
                        results.push(res);
                    }
                }
            }
            print!("{}", render_text(&results));
            if let Some(p) = json {
                write(&p, &serde_json::to_string_pretty(&results).unwrap())?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
