//! Closure compilation of tensor IR.
//!
//! Every expression becomes an integer or float closure over a [`Frame`];
//! loads and stores with affine indices fold their index arithmetic into one
//! dot product. Parallel loops split their range into one contiguous chunk
//! per worker.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use crate::graph::DataType;
use crate::kernels::{brgemm_f32, brgemm_u8s8s32, reorder_pack, reorder_unpack, BlockGeom, BlockRange, BrgemmShape, PlainView};
use crate::template::AnchorId;
use crate::tir::affine::affine;
use crate::tir::*;

/// Base pointer and element count of a buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Raw {
    pub ptr: *mut u8,
    pub len: usize,
}

// Raw pointers are shared across workers; the verifier guarantees that
// parallel iterations write disjoint elements.
unsafe impl Send for Raw {}
unsafe impl Sync for Raw {}

impl Raw {
    pub const NULL: Raw = Raw { ptr: std::ptr::null_mut(), len: 0 };

    unsafe fn slice<'a, T>(&self, off: usize, n: usize) -> &'a [T] {
        assert!(off + n <= self.len, "index out of bounds");
        std::slice::from_raw_parts((self.ptr as *const T).add(off), n)
    }

    #[allow(clippy::mut_from_ref)]
    unsafe fn slice_mut<'a, T>(&self, off: usize, n: usize) -> &'a mut [T] {
        assert!(off + n <= self.len, "index out of bounds");
        std::slice::from_raw_parts_mut((self.ptr as *mut T).add(off), n)
    }
}

/// Per-worker evaluation state.
#[derive(Clone)]
pub(crate) struct Frame {
    pub iv: Vec<i64>,
    pub fv: Vec<f64>,
    pub bufs: Vec<Raw>,
    offs_a: Vec<usize>,
    offs_b: Vec<usize>,
}

impl Frame {
    pub fn new(nvars: usize, bufs: Vec<Raw>) -> Frame {
        Frame { iv: vec![0; nvars], fv: vec![0.0; nvars], bufs, offs_a: Vec::new(), offs_b: Vec::new() }
    }
}

/// Execution counters shared by all workers.
#[derive(Debug, Default)]
pub struct Counters {
    pub probes: Vec<AtomicU64>,
    pub calls: Vec<AtomicU64>,
    pub fold_runs: AtomicU64,
    pub call_ns: Mutex<Vec<Vec<u64>>>,
}

impl Counters {
    fn new(nprobes: usize, nfuncs: usize) -> Counters {
        Counters {
            probes: (0..nprobes).map(|_| AtomicU64::new(0)).collect(),
            calls: (0..nfuncs).map(|_| AtomicU64::new(0)).collect(),
            fold_runs: AtomicU64::new(0),
            call_ns: Mutex::new(vec![Vec::new(); nfuncs]),
        }
    }

    pub fn reset(&self) {
        self.probes.iter().chain(&self.calls).for_each(|c| c.store(0, Ordering::Relaxed));
        self.fold_runs.store(0, Ordering::Relaxed);
        self.call_ns.lock().unwrap().iter_mut().for_each(Vec::clear);
    }
}

/// What a running statement may touch besides its frame.
pub(crate) struct Shared<'a> {
    pub prog: &'a Program,
    pub counters: &'a Counters,
    pub pool: Option<&'a rayon::ThreadPool>,
    pub workers: usize,
    /// Local-buffer pointers of each worker, indexed by worker then buffer.
    pub locals: &'a [Vec<(BufId, Raw)>],
    pub timing: bool,
}

type IFn = Box<dyn Fn(&Frame) -> i64 + Send + Sync>;
type FFn = Box<dyn Fn(&Frame) -> f64 + Send + Sync>;
type SFn = Box<dyn Fn(&mut Frame, &Shared) + Send + Sync>;

enum CE {
    I(IFn),
    F(FFn),
}

impl CE {
    fn int(self) -> IFn {
        match self {
            CE::I(f) => f,
            CE::F(_) => panic!("expected an integer expression"),
        }
    }

    fn float(self) -> FFn {
        match self {
            CE::F(f) => f,
            CE::I(_) => panic!("expected a float expression"),
        }
    }
}

/// Element offset of an access.
enum Off {
    A0(i64),
    A1(i64, (usize, i64)),
    A2(i64, [(usize, i64); 2]),
    A3(i64, [(usize, i64); 3]),
    Affine { c: i64, terms: Vec<(usize, i64)> },
    General(Vec<(IFn, i64)>),
}

impl Off {
    fn new(m: &Module, buf: BufId, idx: &[Expr]) -> Off {
        let strides = m.bufs[buf.0].strides();
        let forms: Option<Vec<_>> = idx.iter().map(affine).collect();
        match forms {
            Some(forms) => {
                let mut c = 0;
                let mut terms: std::collections::BTreeMap<usize, i64> = Default::default();
                for (f, &s) in forms.iter().zip(&strides) {
                    c += f.c * s as i64;
                    for (v, k) in &f.terms {
                        *terms.entry(v.0).or_insert(0) += k * s as i64;
                    }
                }
                let terms: Vec<(usize, i64)> = terms.into_iter().filter(|(_, k)| *k != 0).collect();
                match terms.len() {
                    0 => Off::A0(c),
                    1 => Off::A1(c, terms[0]),
                    2 => Off::A2(c, [terms[0], terms[1]]),
                    3 => Off::A3(c, [terms[0], terms[1], terms[2]]),
                    _ => Off::Affine { c, terms },
                }
            }
            None => Off::General(idx.iter().zip(&strides).map(|(e, &s)| (cexpr(m, e).int(), s as i64)).collect()),
        }
    }

    #[inline(always)]
    fn eval(&self, f: &Frame) -> i64 {
        let iv = &f.iv;
        match self {
            Off::A0(c) => *c,
            Off::A1(c, (v, k)) => c + iv[*v] * k,
            Off::A2(c, [(v0, k0), (v1, k1)]) => c + iv[*v0] * k0 + iv[*v1] * k1,
            Off::A3(c, [(v0, k0), (v1, k1), (v2, k2)]) => c + iv[*v0] * k0 + iv[*v1] * k1 + iv[*v2] * k2,
            Off::Affine { c, terms } => {
                let mut o = *c;
                for &(v, k) in terms {
                    o += f.iv[v] * k;
                }
                o
            }
            Off::General(v) => v.iter().map(|(e, s)| e(f) * s).sum(),
        }
    }

    #[inline(always)]
    fn at(&self, f: &Frame, b: usize) -> usize {
        let o = self.eval(f);
        let raw = f.bufs[b];
        if o as usize >= raw.len {
            panic!("index out of bounds: offset {o} of {}", raw.len);
        }
        o as usize
    }
}

trait Elem: Copy + Send + Sync + 'static {
    fn get_i(self) -> i64;
    fn get_f(self) -> f64;
    fn put_i(x: i64) -> Self;
    fn put_f(x: f64) -> Self;
}

macro_rules! int_elem {
    ($t:ty) => {
        impl Elem for $t {
            fn get_i(self) -> i64 {
                self as i64
            }
            fn get_f(self) -> f64 {
                self as f64
            }
            fn put_i(x: i64) -> Self {
                x as $t
            }
            fn put_f(x: f64) -> Self {
                x as $t
            }
        }
    };
}
int_elem!(i32);
int_elem!(i8);
int_elem!(u8);

impl Elem for f32 {
    fn get_i(self) -> i64 {
        self as i64
    }
    fn get_f(self) -> f64 {
        self as f64
    }
    fn put_i(x: i64) -> Self {
        x as f32
    }
    fn put_f(x: f64) -> Self {
        x as f32
    }
}

fn load<T: Elem>(b: usize, off: Off, float: bool) -> CE {
    if float {
        CE::F(Box::new(move |f| unsafe { (*(f.bufs[b].ptr as *const T).add(off.at(f, b))).get_f() }))
    } else {
        CE::I(Box::new(move |f| unsafe { (*(f.bufs[b].ptr as *const T).add(off.at(f, b))).get_i() }))
    }
}

fn store<T: Elem>(b: usize, off: Off, rhs: CE) -> SFn {
    match rhs {
        CE::F(r) => Box::new(move |f, _| {
            let v = T::put_f(r(f));
            let o = off.at(f, b);
            unsafe { *(f.bufs[b].ptr as *mut T).add(o) = v }
        }),
        CE::I(r) => Box::new(move |f, _| {
            let v = T::put_i(r(f));
            let o = off.at(f, b);
            unsafe { *(f.bufs[b].ptr as *mut T).add(o) = v }
        }),
    }
}

fn int_bounds(t: ScalarTy) -> (i64, i64) {
    match t {
        ScalarTy::S32 => (i32::MIN as i64, i32::MAX as i64),
        ScalarTy::S8 => (i8::MIN as i64, i8::MAX as i64),
        ScalarTy::U8 => (0, u8::MAX as i64),
        _ => (i64::MIN, i64::MAX),
    }
}

fn cexpr(m: &Module, e: &Expr) -> CE {
    match e {
        Expr::Const { value, ty } => match ty {
            ScalarTy::F32 => {
                let v = *value as f32 as f64;
                CE::F(Box::new(move |_| v))
            }
            ScalarTy::F64 => {
                let v = *value;
                CE::F(Box::new(move |_| v))
            }
            _ => {
                let v = *value as i64;
                CE::I(Box::new(move |_| v))
            }
        },
        Expr::Var(v) => {
            let i = v.0;
            if m.vars[i].ty.is_float() {
                CE::F(Box::new(move |f| f.fv[i]))
            } else {
                CE::I(Box::new(move |f| f.iv[i]))
            }
        }
        Expr::Load { buf, idx } => {
            let off = Off::new(m, *buf, idx);
            let b = buf.0;
            match m.bufs[b].dtype {
                DataType::F32 => load::<f32>(b, off, true),
                DataType::S32 => load::<i32>(b, off, false),
                DataType::S8 => load::<i8>(b, off, false),
                DataType::U8 => load::<u8>(b, off, false),
            }
        }
        Expr::Binary { op, lhs, rhs } => {
            let ty = lhs.ty(m);
            let (a, b) = (cexpr(m, lhs), cexpr(m, rhs));
            match ty {
                ScalarTy::F32 => {
                    let (a, b) = (a.float(), b.float());
                    macro_rules! f32op {
                        ($x:ident, $y:ident, $e:expr) => {
                            CE::F(Box::new(move |f| {
                                let ($x, $y) = (a(f) as f32, b(f) as f32);
                                ($e) as f64
                            }))
                        };
                    }
                    match op {
                        BinOp::Add => f32op!(x, y, x + y),
                        BinOp::Sub => f32op!(x, y, x - y),
                        BinOp::Mul => f32op!(x, y, x * y),
                        BinOp::Div => f32op!(x, y, x / y),
                        BinOp::Rem => f32op!(x, y, x % y),
                        BinOp::Max => f32op!(x, y, x.max(y)),
                        BinOp::Min => f32op!(x, y, x.min(y)),
                    }
                }
                ScalarTy::F64 => {
                    let (a, b) = (a.float(), b.float());
                    match op {
                        BinOp::Add => CE::F(Box::new(move |f| a(f) + b(f))),
                        BinOp::Sub => CE::F(Box::new(move |f| a(f) - b(f))),
                        BinOp::Mul => CE::F(Box::new(move |f| a(f) * b(f))),
                        BinOp::Div => CE::F(Box::new(move |f| a(f) / b(f))),
                        BinOp::Rem => CE::F(Box::new(move |f| a(f) % b(f))),
                        BinOp::Max => CE::F(Box::new(move |f| a(f).max(b(f)))),
                        BinOp::Min => CE::F(Box::new(move |f| a(f).min(b(f)))),
                    }
                }
                t => {
                    let (a, b) = (a.int(), b.int());
                    macro_rules! iop {
                        ($x:ident, $y:ident, $e:expr) => {
                            if t == ScalarTy::I64 {
                                CE::I(Box::new(move |f| {
                                    let ($x, $y) = (a(f), b(f));
                                    $e
                                }))
                            } else {
                                CE::I(Box::new(move |f| {
                                    let ($x, $y) = (a(f), b(f));
                                    t.wrap($e)
                                }))
                            }
                        };
                    }
                    match op {
                        BinOp::Add => iop!(x, y, x.wrapping_add(y)),
                        BinOp::Sub => iop!(x, y, x.wrapping_sub(y)),
                        BinOp::Mul => iop!(x, y, x.wrapping_mul(y)),
                        BinOp::Div => iop!(x, y, x.checked_div(y).unwrap_or(0)),
                        BinOp::Rem => iop!(x, y, x.checked_rem(y).unwrap_or(0)),
                        BinOp::Max => iop!(x, y, x.max(y)),
                        BinOp::Min => iop!(x, y, x.min(y)),
                    }
                }
            }
        }
        Expr::Unary { op, arg } => {
            let st = arg.ty(m);
            let a = cexpr(m, arg);
            match (op, st.is_float()) {
                (UnOp::Exp, _) if st == ScalarTy::F32 => {
                    let a = a.float();
                    CE::F(Box::new(move |f| (a(f) as f32).exp() as f64))
                }
                (UnOp::Exp, _) => {
                    let a = a.float();
                    CE::F(Box::new(move |f| a(f).exp()))
                }
                (UnOp::Round, true) => {
                    let a = a.float();
                    CE::F(Box::new(move |f| (a(f) as f32).round_ties_even() as f64))
                }
                (UnOp::Round, false) => a,
                (UnOp::Clamp(lo, hi), true) => {
                    let a = a.float();
                    if st == ScalarTy::F32 {
                        let (lo, hi) = (*lo as f32, *hi as f32);
                        CE::F(Box::new(move |f| (a(f) as f32).max(lo).min(hi) as f64))
                    } else {
                        let (lo, hi) = (*lo, *hi);
                        CE::F(Box::new(move |f| a(f).max(lo).min(hi)))
                    }
                }
                (UnOp::Clamp(lo, hi), false) => {
                    let a = a.int();
                    let (l, h) = (lo.ceil().max(-9e18) as i64, hi.floor().min(9e18) as i64);
                    CE::I(Box::new(move |f| a(f).max(l).min(h)))
                }
                (UnOp::Cast(t), _) => {
                    let t = *t;
                    match (st.is_float(), t.is_float()) {
                        (true, true) if t == ScalarTy::F32 => {
                            let a = a.float();
                            CE::F(Box::new(move |f| a(f) as f32 as f64))
                        }
                        (true, true) => a,
                        (true, false) => {
                            let a = a.float();
                            let (lo, hi) = int_bounds(t);
                            CE::I(Box::new(move |f| (a(f) as i64).clamp(lo, hi)))
                        }
                        (false, true) if t == ScalarTy::F32 => {
                            let a = a.int();
                            CE::F(Box::new(move |f| a(f) as f32 as f64))
                        }
                        (false, true) => {
                            let a = a.int();
                            CE::F(Box::new(move |f| a(f) as f64))
                        }
                        (false, false) => {
                            let a = a.int();
                            CE::I(Box::new(move |f| t.wrap(a(f))))
                        }
                    }
                }
            }
        }
    }
}

/// A compiled function.
pub(crate) struct CFunc {
    pub name: String,
    body: Vec<SFn>,
}

/// A module compiled to closures, plus its buffer plan.
pub struct Program {
    pub module: Module,
    pub plan: BufferPlan,
    pub(crate) funcs: Vec<Option<CFunc>>,
    /// Anchor site of every probe counter.
    pub probe_sites: Vec<(FuncId, AnchorId)>,
}

struct Cx<'m> {
    m: &'m Module,
    func: FuncId,
    probes: Vec<(FuncId, AnchorId)>,
}

fn run_all(body: &[SFn], f: &mut Frame, sh: &Shared) {
    for s in body {
        s(f, sh);
    }
}

impl Cx<'_> {
    fn block(&mut self, stmts: &[Stmt], in_par: bool) -> Vec<SFn> {
        stmts.iter().map(|s| self.stmt(s, in_par)).collect()
    }

    fn serial_loop(&mut self, lp: &Loop, in_par: bool) -> SFn {
        let v = lp.var.0;
        let step = lp.step.max(1);
        let body = self.block(&lp.body, in_par);
        let (lo, hi) = (cexpr(self.m, &lp.lo).int(), cexpr(self.m, &lp.hi).int());
        Box::new(move |f, sh| {
            let (lo, hi) = (lo(f), hi(f));
            let mut i = lo;
            while i < hi {
                f.iv[v] = i;
                run_all(&body, f, sh);
                i += step;
            }
        })
    }

    fn stmt(&mut self, s: &Stmt, in_par: bool) -> SFn {
        let m = self.m;
        match s {
            Stmt::For(lp) => self.serial_loop(lp, in_par),
            Stmt::ParallelFor { lp, .. } if in_par => self.serial_loop(lp, true),
            Stmt::ParallelFor { lp, .. } => {
                // perfect nest of two constant parallel loops: one flattened range
                let inner = match lp.body.as_slice() {
                    [Stmt::ParallelFor { lp: l2, .. }] => Some(l2),
                    _ => None,
                };
                let consts = |l: &Loop| if l.step == 1 { Some((l.lo.as_int()?, l.hi.as_int()?)) } else { None };
                if let (Some(l2), Some((lo1, hi1))) = (inner, consts(lp)) {
                    if let Some((lo2, hi2)) = consts(l2) {
                        let (v1, v2) = (lp.var.0, l2.var.0);
                        let n2 = (hi2 - lo2).max(0);
                        let body = self.block(&l2.body, true);
                        let trip = (hi1 - lo1).max(0) * n2;
                        return Box::new(move |f, sh| {
                            parallel(f, sh, trip, &|f, sh, i| {
                                f.iv[v1] = lo1 + i / n2;
                                f.iv[v2] = lo2 + i % n2;
                                run_all(&body, f, sh);
                            })
                        });
                    }
                }
                let v = lp.var.0;
                let step = lp.step.max(1);
                let body = self.block(&lp.body, true);
                let (lo, hi) = (cexpr(m, &lp.lo).int(), cexpr(m, &lp.hi).int());
                Box::new(move |f, sh| {
                    let (lo, hi) = (lo(f), hi(f));
                    let trip = if hi > lo { (hi - lo + step - 1) / step } else { 0 };
                    parallel(f, sh, trip, &|f, sh, i| {
                        f.iv[v] = lo + i * step;
                        run_all(&body, f, sh);
                    })
                })
            }
            Stmt::Assign { lhs, rhs } => {
                let r = cexpr(m, rhs);
                match lhs {
                    LValue::Var(v) => {
                        let i = v.0;
                        match r {
                            CE::F(r) => Box::new(move |f, _| f.fv[i] = r(f)),
                            CE::I(r) => Box::new(move |f, _| f.iv[i] = r(f)),
                        }
                    }
                    LValue::Store { buf, idx } => {
                        let off = Off::new(m, *buf, idx);
                        let b = buf.0;
                        match m.bufs[b].dtype {
                            DataType::F32 => store::<f32>(b, off, r),
                            DataType::S32 => store::<i32>(b, off, r),
                            DataType::S8 => store::<i8>(b, off, r),
                            DataType::U8 => store::<u8>(b, off, r),
                        }
                    }
                }
            }
            Stmt::Intrinsic(i) => self.intrinsic(i),
            Stmt::Call(c) => {
                let c = *c;
                Box::new(move |f, sh| call(c, f, sh))
            }
            Stmt::Probe(a) => {
                let id = self.probes.len();
                self.probes.push((self.func, *a));
                Box::new(move |_, sh| {
                    sh.counters.probes[id].fetch_add(1, Ordering::Relaxed);
                })
            }
            Stmt::Block(b) => {
                let body = self.block(b, in_par);
                Box::new(move |f, sh| run_all(&body, f, sh))
            }
        }
    }

    fn slice(&self, s: &Slice) -> (usize, Off) {
        (s.buf.0, Off::new(self.m, s.buf, &s.idx))
    }

    fn intrinsic(&mut self, i: &Intrinsic) -> SFn {
        let m = self.m;
        match i {
            Intrinsic::Brgemm { kind, mb, nb, kb, bs, a, a_batch_dim, b, b_batch_dim, c, accumulate } => {
                let (mb, nb, kb) = (*mb, *nb, *kb);
                let shape = BrgemmShape { mb, nb, kb };
                let (bs, acc) = (*bs, *accumulate);
                let stride = |s: &Slice, d: Option<usize>, blk: usize| d.map_or(blk, |d| m.bufs[s.buf.0].strides()[d]);
                let (sa, sb) = (stride(a, *a_batch_dim, mb * kb), stride(b, *b_batch_dim, nb * kb));
                let (ab, aoff) = self.slice(a);
                let (bb, boff) = self.slice(b);
                let (cb, coff) = self.slice(c);
                let kind = *kind;
                Box::new(move |f, _| {
                    let (a0, b0, c0) = (aoff.at(f, ab), boff.at(f, bb), coff.at(f, cb));
                    let (alen, blen) = ((bs - 1) * sa + mb * kb, (bs - 1) * sb + nb * kb);
                    let (mut oa, mut ob) = (std::mem::take(&mut f.offs_a), std::mem::take(&mut f.offs_b));
                    oa.clear();
                    ob.clear();
                    oa.extend((0..bs).map(|i| i * sa));
                    ob.extend((0..bs).map(|i| i * sb));
                    let (ra, rb, rc) = (f.bufs[ab], f.bufs[bb], f.bufs[cb]);
                    unsafe {
                        match kind {
                            BrgemmKind::F32 => brgemm_f32(shape, ra.slice(a0, alen), &oa, rb.slice(b0, blen), &ob, rc.slice_mut(c0, mb * nb), acc),
                            BrgemmKind::U8S8S32 => brgemm_u8s8s32(shape, ra.slice(a0, alen), &oa, rb.slice(b0, blen), &ob, rc.slice_mut(c0, mb * nb), acc),
                        }
                    }
                    f.offs_a = oa;
                    f.offs_b = ob;
                })
            }
            Intrinsic::ReorderPack { src, dst } | Intrinsic::ReorderUnpack { src: dst, dst: src } => {
                let pack = matches!(i, Intrinsic::ReorderPack { .. });
                let pb = src.buf.0;
                let pbatch = cexpr(m, &src.batch).int();
                let (rows, cols, tr) = (src.rows, src.cols, src.transposed);
                let (bb, boff) = self.slice(&dst.start);
                let bstr = m.bufs[bb].strides();
                let rbs = dst.rb_dim.map_or(0, |d| bstr[d]);
                let cbs = dst.cb_dim.map_or(0, |d| bstr[d]);
                let g = BlockGeom { br: dst.br, bc: dst.bc, row_inner_first: dst.row_inner_first, rb_stride: rbs, cb_stride: cbs };
                let (rb0, cb0) = (cexpr(m, &dst.rb0).int(), cexpr(m, &dst.cb0).int());
                let (nrb, ncb) = (dst.nrb, dst.ncb);
                let span = (nrb - 1) * rbs + (ncb - 1) * cbs + dst.br * dst.bc;
                let dt = m.bufs[bb].dtype;
                Box::new(move |f, _| {
                    let base = pbatch(f) as usize * rows * cols;
                    let b0 = boff.at(f, bb);
                    let range = BlockRange { rb0: rb0(f) as usize, cb0: cb0(f) as usize, nrb, ncb };
                    let (rp, rblk) = (f.bufs[pb], f.bufs[bb]);
                    unsafe {
                        if pack {
                            let sv = if tr { PlainView { base: 0, rs: 1, cs: rows, rows, cols } } else { PlainView::row_major(0, rows, cols) };
                            macro_rules! go {
                                ($t:ty) => {
                                    reorder_pack::<$t>(rp.slice(base, rows * cols), sv, rblk.slice_mut(b0, span), 0, g, range, true)
                                };
                            }
                            match dt {
                                DataType::F32 => go!(f32),
                                DataType::S32 => go!(i32),
                                DataType::S8 => go!(i8),
                                DataType::U8 => go!(u8),
                            }
                        } else {
                            // only the touched rows of the plain destination are borrowed
                            let r0 = (range.rb0 * g.br).min(rows);
                            let r1 = ((range.rb0 + nrb) * g.br).min(rows);
                            let dv = PlainView { base: 0, rs: cols, cs: 1, rows: r1 - r0, cols };
                            let rel = BlockRange { rb0: 0, ..range };
                            macro_rules! go {
                                ($t:ty) => {
                                    reorder_unpack::<$t>(rblk.slice(b0, span), 0, g, rp.slice_mut(base + r0 * cols, (r1 - r0) * cols), dv, rel)
                                };
                            }
                            match dt {
                                DataType::F32 => go!(f32),
                                DataType::S32 => go!(i32),
                                DataType::S8 => go!(i8),
                                DataType::U8 => go!(u8),
                            }
                        }
                    }
                })
            }
        }
    }
}

/// Runs `body(i)` for `i in 0..trip`, one contiguous chunk per worker.
fn parallel(f: &mut Frame, sh: &Shared, trip: i64, body: &(dyn Fn(&mut Frame, &Shared, i64) + Sync)) {
    let w = (sh.workers as i64).min(trip).max(1);
    let pool = match sh.pool {
        Some(p) if w > 1 => p,
        _ => {
            for i in 0..trip {
                body(f, sh, i);
            }
            return;
        }
    };
    let base: &Frame = f;
    pool.install(|| {
        (0..w).into_par_iter().for_each(|k| {
            let mut fr = base.clone();
            for (b, raw) in &sh.locals[k as usize] {
                fr.bufs[b.0] = *raw;
            }
            let (lo, hi) = (trip * k / w, trip * (k + 1) / w);
            for i in lo..hi {
                body(&mut fr, sh, i);
            }
        })
    });
}

pub(crate) fn call(c: FuncId, f: &mut Frame, sh: &Shared) {
    let func = sh.prog.funcs[c.0].as_ref().expect("called function is compiled");
    sh.counters.calls[c.0].fetch_add(1, Ordering::Relaxed);
    if sh.timing {
        let t = Instant::now();
        run_all(&func.body, f, sh);
        let ns = t.elapsed().as_nanos() as u64;
        sh.counters.call_ns.lock().unwrap()[c.0].push(ns);
    } else {
        run_all(&func.body, f, sh);
    }
}

impl Program {
    pub fn new(module: Module, plan: BufferPlan) -> Program {
        let mut cx = Cx { m: &module, func: FuncId(0), probes: Vec::new() };
        let mut funcs: Vec<Option<CFunc>> = (0..module.funcs.len()).map(|_| None).collect();
        for f in module.reachable() {
            cx.func = f;
            let body = cx.block(&module.funcs[f.0].body, false);
            funcs[f.0] = Some(CFunc { name: module.funcs[f.0].name.clone(), body });
        }
        let probe_sites = cx.probes;
        Program { module, plan, funcs, probe_sites }
    }

    pub fn new_counters(&self) -> Counters {
        Counters::new(self.probe_sites.len(), self.module.funcs.len())
    }

    pub fn func_name(&self, f: FuncId) -> &str {
        self.funcs[f.0].as_ref().map_or(&self.module.funcs[f.0].name, |c| &c.name)
    }
}
