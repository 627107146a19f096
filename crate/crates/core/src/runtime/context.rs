//! Execution context: buffer storage, constant cache, worker pool, counters.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::graph::DataType;
use crate::template::AnchorId;
use crate::tir::*;
use crate::value::{Data, DenseValue};

use super::exec::{call, Counters, Frame, Program, Raw, Shared};

#[derive(Debug, Error, PartialEq)]
pub enum RunError {
    #[error("expected {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("input {index} ({tensor}): {msg}")]
    Input { index: usize, tensor: String, msg: String },
}

/// Dtype and shape of one graph input or output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorSig {
    pub tensor: crate::graph::TensorId,
    pub dtype: DataType,
    pub shape: Vec<usize>,
    pub buf: BufId,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CallStat {
    pub func: String,
    pub median_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RuntimeStats {
    pub per_call: Vec<CallStat>,
    pub fold_ns: u64,
    pub arena_bytes: usize,
    pub peak_live_bytes: usize,
}

fn words(bytes: usize) -> Vec<u64> {
    vec![0; bytes.div_ceil(8) + 1]
}

fn raw_words(v: &mut [u64], off: usize, b: &BufDecl) -> Raw {
    assert!(off + b.bytes() <= v.len() * 8);
    Raw { ptr: unsafe { (v.as_mut_ptr() as *mut u8).add(off) }, len: b.numel() }
}

fn raw_data(d: &Data) -> Raw {
    let (ptr, len) = match d {
        Data::F32(v) => (v.as_ptr() as *mut u8, v.len()),
        Data::S32(v) => (v.as_ptr() as *mut u8, v.len()),
        Data::S8(v) => (v.as_ptr() as *mut u8, v.len()),
        Data::U8(v) => (v.as_ptr() as *mut u8, v.len()),
    };
    Raw { ptr, len }
}

fn read_words(words: &[u64], dtype: DataType, n: usize) -> Data {
    let bytes = unsafe { std::slice::from_raw_parts(words.as_ptr() as *const u8, n * dtype.size_bytes()) };
    match dtype {
        DataType::F32 => Data::F32(bytes.chunks_exact(4).map(|c| f32::from_ne_bytes(c.try_into().unwrap())).collect()),
        DataType::S32 => Data::S32(bytes.chunks_exact(4).map(|c| i32::from_ne_bytes(c.try_into().unwrap())).collect()),
        DataType::S8 => Data::S8(bytes.iter().map(|&b| b as i8).collect()),
        DataType::U8 => Data::U8(bytes.to_vec()),
    }
}

/// Runs a compiled program. Constant-cache slots are computed by the fold
/// function on the first run and reused afterwards.
pub struct ExecutionContext {
    prog: Arc<Program>,
    pub inputs: Vec<TensorSig>,
    pub outputs: Vec<TensorSig>,
    workers: usize,
    pool: Option<rayon::ThreadPool>,
    arena: Vec<u64>,
    fold_arena: Vec<u64>,
    scratch: Vec<Vec<u64>>,
    persistent: BTreeMap<BufId, Vec<u64>>,
    const_ready: bool,
    counters: Counters,
    fold_ns: u64,
}

impl ExecutionContext {
    pub fn new(prog: Arc<Program>, inputs: Vec<TensorSig>, outputs: Vec<TensorSig>, workers: usize) -> ExecutionContext {
        let workers = workers.max(1);
        let pool = (workers > 1).then(|| rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("thread pool"));
        let m = &prog.module;
        let mut fold_written = BTreeSet::new();
        if let Some(f) = m.fold {
            for c in m.callees(f) {
                fold_written.extend(buffer_accesses(&m.funcs[c.0].body).into_iter().filter(|(_, w)| *w).map(|(b, _)| b));
            }
        }
        let persistent = m
            .bufs
            .iter()
            .enumerate()
            .filter(|(i, b)| b.kind == BufKind::Const || (b.kind == BufKind::Output && fold_written.contains(&BufId(*i))))
            .map(|(i, b)| (BufId(i), words(b.bytes())))
            .collect();
        ExecutionContext {
            arena: words(prog.plan.arena_bytes),
            fold_arena: words(prog.plan.fold_arena_bytes),
            scratch: (0..workers).map(|_| words(prog.plan.scratch_bytes)).collect(),
            counters: prog.new_counters(),
            prog,
            inputs,
            outputs,
            workers,
            pool,
            persistent,
            const_ready: false,
            fold_ns: 0,
        }
    }

    pub fn program(&self) -> &Program {
        &self.prog
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Forgets cached constants; the next run folds again.
    pub fn invalidate_constants(&mut self) {
        self.const_ready = false;
    }

    fn check_inputs(&self, inputs: &[DenseValue]) -> Result<(), RunError> {
        if inputs.len() != self.inputs.len() {
            return Err(RunError::Arity { expected: self.inputs.len(), got: inputs.len() });
        }
        for (i, (v, s)) in inputs.iter().zip(&self.inputs).enumerate() {
            let err = |msg: String| RunError::Input { index: i, tensor: s.tensor.to_string(), msg };
            if v.dtype() != s.dtype {
                return Err(err(format!("dtype {} does not match {}", v.dtype(), s.dtype)));
            }
            if v.shape != s.shape {
                return Err(err(format!("shape {:?} does not match {:?}", v.shape, s.shape)));
            }
        }
        Ok(())
    }

    pub fn run(&mut self, inputs: &[DenseValue]) -> Result<Vec<DenseValue>, RunError> {
        self.run_inner(inputs, false)
    }

    fn run_inner(&mut self, inputs: &[DenseValue], timing: bool) -> Result<Vec<DenseValue>, RunError> {
        self.check_inputs(inputs)?;
        let prog = self.prog.clone();
        let m = &prog.module;
        let plan = &prog.plan;
        if cfg!(debug_assertions) {
            self.arena.fill(u64::MAX);
            self.fold_arena.fill(u64::MAX);
        }
        let mut outs: BTreeMap<BufId, Data> = BTreeMap::new();
        let mut bufs = vec![Raw::NULL; m.bufs.len()];
        for (i, b) in m.bufs.iter().enumerate() {
            let id = BufId(i);
            bufs[i] = match b.kind {
                BufKind::Literal => raw_data(&m.literals[&id].data),
                BufKind::Const => raw_words(self.persistent.get_mut(&id).unwrap(), 0, b),
                BufKind::Output if self.persistent.contains_key(&id) => raw_words(self.persistent.get_mut(&id).unwrap(), 0, b),
                BufKind::Output => {
                    let d = outs.entry(id).or_insert_with(|| Data::zeros(b.dtype, b.numel()));
                    raw_data(d)
                }
                BufKind::Temp => match (plan.arena.get(&id), plan.fold_arena.get(&id)) {
                    (Some(p), _) => raw_words(&mut self.arena, p.offset, b),
                    (_, Some(p)) => raw_words(&mut self.fold_arena, p.offset, b),
                    _ => Raw::NULL,
                },
                BufKind::Local => raw_words(&mut self.scratch[0], plan.scratch[&id], b),
                BufKind::Input | BufKind::Elided => Raw::NULL,
            };
        }
        for (v, s) in inputs.iter().zip(&self.inputs) {
            bufs[s.buf.0] = raw_data(&v.data);
        }
        let locals: Vec<Vec<(BufId, Raw)>> =
            self.scratch.iter_mut().map(|sc| plan.scratch.iter().map(|(b, off)| (*b, raw_words(sc, *off, &m.bufs[b.0]))).collect()).collect();
        let mut frame = Frame::new(m.vars.len(), bufs);
        let sh = Shared { prog: &prog, counters: &self.counters, pool: self.pool.as_ref(), workers: self.workers, locals: &locals, timing };
        if !self.const_ready {
            if let Some(f) = m.fold {
                self.counters.fold_runs.fetch_add(1, Ordering::Relaxed);
                let t = Instant::now();
                call(f, &mut frame, &sh);
                self.fold_ns = t.elapsed().as_nanos() as u64;
            }
            self.const_ready = true;
        }
        call(m.entry, &mut frame, &sh);
        let mut result = Vec::new();
        for s in &self.outputs {
            let b = &m.bufs[s.buf.0];
            let data = match b.kind {
                BufKind::Output if self.persistent.contains_key(&s.buf) => read_words(&self.persistent[&s.buf], b.dtype, b.numel()),
                BufKind::Output => outs[&s.buf].clone(),
                BufKind::Literal => m.literals[&s.buf].data.clone(),
                BufKind::Input => {
                    let k = self.inputs.iter().position(|i| i.buf == s.buf).expect("passthrough output is an input");
                    inputs[k].data.clone()
                }
                k => panic!("graph output bound to a {k} buffer"),
            };
            result.push(DenseValue::new(s.shape.clone(), data));
        }
        Ok(result)
    }

    /// Runs `warmup + repeats` times and reports per-call medians of the
    /// timed repeats.
    pub fn profile(&mut self, inputs: &[DenseValue], warmup: usize, repeats: usize) -> Result<(Vec<DenseValue>, RuntimeStats, Vec<u64>), RunError> {
        let mut out = Vec::new();
        for _ in 0..warmup {
            out = self.run_inner(inputs, false)?;
        }
        self.counters.call_ns.lock().unwrap().iter_mut().for_each(Vec::clear);
        let mut totals = Vec::new();
        for _ in 0..repeats.max(1) {
            let t = Instant::now();
            out = self.run_inner(inputs, true)?;
            totals.push(t.elapsed().as_nanos() as u64);
        }
        let m = &self.prog.module;
        let ns = self.counters.call_ns.lock().unwrap();
        let per_call = m.callees(m.entry).into_iter().map(|f| CallStat { func: self.prog.func_name(f).to_string(), median_ns: median(&ns[f.0]) }).collect();
        let stats = RuntimeStats { per_call, fold_ns: self.fold_ns, arena_bytes: self.prog.plan.arena_bytes, peak_live_bytes: self.prog.plan.peak_live_bytes };
        Ok((out, stats, totals))
    }

    pub fn fold_runs(&self) -> u64 {
        self.counters.fold_runs.load(Ordering::Relaxed)
    }

    pub fn fold_ns(&self) -> u64 {
        self.fold_ns
    }

    pub fn call_count(&self, f: FuncId) -> u64 {
        self.counters.calls[f.0].load(Ordering::Relaxed)
    }

    /// Probe hits per (function name, anchor).
    pub fn probe_counts(&self) -> BTreeMap<(String, AnchorId), u64> {
        let mut out = BTreeMap::new();
        for (i, (f, a)) in self.prog.probe_sites.iter().enumerate() {
            *out.entry((self.prog.func_name(*f).to_string(), *a)).or_insert(0) += self.counters.probes[i].load(Ordering::Relaxed);
        }
        out
    }

    pub fn reset_counters(&self) {
        self.counters.reset();
    }
}

pub fn median(v: &[u64]) -> u64 {
    if v.is_empty() {
        return 0;
    }
    let mut s = v.to_vec();
    s.sort_unstable();
    s[s.len() / 2]
}
