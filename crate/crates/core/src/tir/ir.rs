//! Tensor IR: functions of loop nests over multi-dimensional buffers.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::graph::{DataType, OpId, TensorId};
use crate::template::AnchorId;
use crate::value::DenseValue;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct BufId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct VarId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct FuncId(pub usize);

/// Scalar types. `I64` is the index type, `F64` only appears in accumulators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ScalarTy {
    I64,
    F64,
    F32,
    S32,
    S8,
    U8,
}

impl ScalarTy {
    pub fn of(dt: DataType) -> Self {
        match dt {
            DataType::F32 => ScalarTy::F32,
            DataType::S32 => ScalarTy::S32,
            DataType::S8 => ScalarTy::S8,
            DataType::U8 => ScalarTy::U8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, ScalarTy::F32 | ScalarTy::F64)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalarTy::I64 => "i64",
            ScalarTy::F64 => "f64",
            ScalarTy::F32 => "f32",
            ScalarTy::S32 => "s32",
            ScalarTy::S8 => "s8",
            ScalarTy::U8 => "u8",
        }
    }

    /// Wraps an integer result into this type.
    pub fn wrap(self, x: i64) -> i64 {
        match self {
            ScalarTy::S32 => x as i32 as i64,
            ScalarTy::S8 => x as i8 as i64,
            ScalarTy::U8 => x as u8 as i64,
            _ => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BufKind {
    /// Bound to a graph input at each call.
    Input,
    /// Allocated per call and returned.
    Output,
    /// Lives in an arena; placement decided by the buffer planner.
    Temp,
    /// Constant-cache slot, filled once by the fold function.
    Const,
    /// Literal data embedded in the module.
    Literal,
    /// Per-worker scratch of one function.
    Local,
    /// Replaced by a scalar variable; takes no storage.
    Elided,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BufDecl {
    pub name: String,
    pub dtype: DataType,
    pub dims: Vec<usize>,
    pub kind: BufKind,
    pub tensor: Option<TensorId>,
    /// Function owning a function-scoped buffer.
    pub owner: Option<FuncId>,
}

impl BufDecl {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * self.dtype.size_bytes()
    }

    pub fn strides(&self) -> Vec<usize> {
        crate::graph::LayoutDesc::plain_strides(&self.dims)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarDecl {
    pub name: String,
    pub ty: ScalarTy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum UnOp {
    Exp,
    /// Round half to even.
    Round,
    /// f32 to integer truncates and saturates; integer to integer wraps.
    Cast(ScalarTy),
    Clamp(f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Expr {
    Const { value: f64, ty: ScalarTy },
    Var(VarId),
    Load { buf: BufId, idx: Vec<Expr> },
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Unary { op: UnOp, arg: Box<Expr> },
}

impl Expr {
    pub fn int(v: i64) -> Expr {
        Expr::Const { value: v as f64, ty: ScalarTy::I64 }
    }

    pub fn konst(value: f64, ty: ScalarTy) -> Expr {
        Expr::Const { value, ty }
    }

    pub fn var(v: VarId) -> Expr {
        Expr::Var(v)
    }

    pub fn load(buf: BufId, idx: Vec<Expr>) -> Expr {
        Expr::Load { buf, idx }
    }

    pub fn bin(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }
    }

    pub fn un(op: UnOp, arg: Expr) -> Expr {
        Expr::Unary { op, arg: Box::new(arg) }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Expr::Const { value, ty: ScalarTy::I64 } => Some(*value as i64),
            _ => None,
        }
    }

    pub fn ty(&self, m: &Module) -> ScalarTy {
        match self {
            Expr::Const { ty, .. } => *ty,
            Expr::Var(v) => m.vars[v.0].ty,
            Expr::Load { buf, .. } => ScalarTy::of(m.bufs[buf.0].dtype),
            Expr::Binary { lhs, .. } => lhs.ty(m),
            Expr::Unary { op: UnOp::Cast(t), .. } => *t,
            Expr::Unary { arg, .. } => arg.ty(m),
        }
    }

    /// Calls `f` on every sub-expression, outermost first.
    pub fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Load { idx, .. } => idx.iter().for_each(|e| e.visit(f)),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.visit(f);
                rhs.visit(f);
            }
            Expr::Unary { arg, .. } => arg.visit(f),
            _ => {}
        }
    }

    /// Rewrites bottom-up.
    pub fn rewrite(&mut self, f: &mut impl FnMut(&mut Expr)) {
        match self {
            Expr::Load { idx, .. } => idx.iter_mut().for_each(|e| e.rewrite(f)),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.rewrite(f);
                rhs.rewrite(f);
            }
            Expr::Unary { arg, .. } => arg.rewrite(f),
            _ => {}
        }
        f(self);
    }

    pub fn uses_var(&self, v: VarId) -> bool {
        let mut hit = false;
        self.visit(&mut |e| hit |= *e == Expr::Var(v));
        hit
    }
}

fn fold_int(op: BinOp, a: &Expr, b: &Expr) -> Option<Expr> {
    let (x, y) = (a.as_int(), b.as_int());
    if let (Some(x), Some(y)) = (x, y) {
        let v = match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x.div_euclid(y),
            BinOp::Rem => x.rem_euclid(y),
            BinOp::Max => x.max(y),
            BinOp::Min => x.min(y),
        };
        return Some(Expr::int(v));
    }
    match (op, x, y) {
        (BinOp::Add, Some(0), _) => Some(b.clone()),
        (BinOp::Add | BinOp::Sub, _, Some(0)) => Some(a.clone()),
        (BinOp::Mul, Some(0), _) | (BinOp::Mul, _, Some(0)) => Some(Expr::int(0)),
        (BinOp::Mul, Some(1), _) => Some(b.clone()),
        (BinOp::Mul | BinOp::Div, _, Some(1)) => Some(a.clone()),
        (BinOp::Rem, _, Some(1)) => Some(Expr::int(0)),
        _ => None,
    }
}

/// Index arithmetic with constant folding and identity elimination.
pub fn ix(op: BinOp, a: Expr, b: Expr) -> Expr {
    fold_int(op, &a, &b).unwrap_or_else(|| Expr::bin(op, a, b))
}

pub fn iadd(a: Expr, b: Expr) -> Expr {
    ix(BinOp::Add, a, b)
}

pub fn isub(a: Expr, b: Expr) -> Expr {
    ix(BinOp::Sub, a, b)
}

pub fn imul(a: Expr, b: Expr) -> Expr {
    ix(BinOp::Mul, a, b)
}

pub fn idiv(a: Expr, b: Expr) -> Expr {
    ix(BinOp::Div, a, b)
}

pub fn irem(a: Expr, b: Expr) -> Expr {
    ix(BinOp::Rem, a, b)
}

pub fn imin(a: Expr, b: Expr) -> Expr {
    ix(BinOp::Min, a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Loop {
    pub var: VarId,
    pub lo: Expr,
    pub hi: Expr,
    pub step: i64,
    pub body: Vec<Stmt>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum LValue {
    Var(VarId),
    Store { buf: BufId, idx: Vec<Expr> },
}

/// First element of a block-shaped region of a buffer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Slice {
    pub buf: BufId,
    pub idx: Vec<Expr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BrgemmKind {
    F32,
    U8S8S32,
}

/// A 2-D matrix view `[nbat, rows, cols]` of a plain buffer, optionally
/// read transposed (`rows`/`cols` are the logical, post-transpose extents).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlainMat {
    pub buf: BufId,
    pub batch: Expr,
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

/// Blocked side of a reorder: `start` indexes block `(rb0, cb0)`; the
/// row-block and column-block dims of the buffer (when still present) give
/// the strides between blocks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockedMat {
    pub start: Slice,
    pub br: usize,
    pub bc: usize,
    pub row_inner_first: bool,
    pub rb_dim: Option<usize>,
    pub cb_dim: Option<usize>,
    pub rb0: Expr,
    pub cb0: Expr,
    pub nrb: usize,
    pub ncb: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Intrinsic {
    /// `C += sum_i A_i * B_i` over `bs` block pairs; A blocks are `[mb, kb]`,
    /// B blocks `[nb, kb]`, C `[mb, nb]`. Consecutive batch blocks are one
    /// stride of `*_batch_dim` apart.
    Brgemm {
        kind: BrgemmKind,
        mb: usize,
        nb: usize,
        kb: usize,
        bs: usize,
        a: Slice,
        a_batch_dim: Option<usize>,
        b: Slice,
        b_batch_dim: Option<usize>,
        c: Slice,
        accumulate: bool,
    },
    ReorderPack {
        src: PlainMat,
        dst: BlockedMat,
    },
    ReorderUnpack {
        src: BlockedMat,
        dst: PlainMat,
    },
}

impl Intrinsic {
    pub fn name(&self) -> &'static str {
        match self {
            Intrinsic::Brgemm { kind: BrgemmKind::F32, .. } => "brgemm_f32",
            Intrinsic::Brgemm { kind: BrgemmKind::U8S8S32, .. } => "brgemm_u8s8s32",
            Intrinsic::ReorderPack { .. } => "reorder_pack",
            Intrinsic::ReorderUnpack { .. } => "reorder_unpack",
        }
    }

    /// Every index expression, mutably.
    pub fn exprs_mut(&mut self) -> Vec<&mut Expr> {
        match self {
            Intrinsic::Brgemm { a, b, c, .. } => a.idx.iter_mut().chain(b.idx.iter_mut()).chain(c.idx.iter_mut()).collect(),
            Intrinsic::ReorderPack { src, dst } => {
                let mut v = vec![&mut src.batch, &mut dst.rb0, &mut dst.cb0];
                v.extend(dst.start.idx.iter_mut());
                v
            }
            Intrinsic::ReorderUnpack { src, dst } => {
                let mut v = vec![&mut dst.batch, &mut src.rb0, &mut src.cb0];
                v.extend(src.start.idx.iter_mut());
                v
            }
        }
    }

    pub fn exprs(&self) -> Vec<&Expr> {
        match self {
            Intrinsic::Brgemm { a, b, c, .. } => a.idx.iter().chain(b.idx.iter()).chain(c.idx.iter()).collect(),
            Intrinsic::ReorderPack { src, dst } => {
                let mut v = vec![&src.batch, &dst.rb0, &dst.cb0];
                v.extend(dst.start.idx.iter());
                v
            }
            Intrinsic::ReorderUnpack { src, dst } => {
                let mut v = vec![&dst.batch, &src.rb0, &src.cb0];
                v.extend(src.start.idx.iter());
                v
            }
        }
    }

    /// Buffers written.
    pub fn writes(&self) -> BufId {
        match self {
            Intrinsic::Brgemm { c, .. } => c.buf,
            Intrinsic::ReorderPack { dst, .. } => dst.start.buf,
            Intrinsic::ReorderUnpack { dst, .. } => dst.buf,
        }
    }

    /// Buffers read.
    pub fn reads(&self) -> Vec<BufId> {
        match self {
            Intrinsic::Brgemm { a, b, c, accumulate, .. } => {
                let mut v = vec![a.buf, b.buf];
                if *accumulate {
                    v.push(c.buf);
                }
                v
            }
            Intrinsic::ReorderPack { src, .. } => vec![src.buf],
            Intrinsic::ReorderUnpack { src, .. } => vec![src.start.buf],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Stmt {
    ParallelFor {
        lp: Loop,
        mergeable: bool,
    },
    For(Loop),
    Assign {
        lhs: LValue,
        rhs: Expr,
    },
    Intrinsic(Intrinsic),
    Call(FuncId),
    /// Counts executions of an anchor site.
    Probe(AnchorId),
    Block(Vec<Stmt>),
}

impl Stmt {
    pub fn for_(var: VarId, lo: Expr, hi: Expr, step: i64, body: Vec<Stmt>) -> Stmt {
        Stmt::For(Loop { var, lo, hi, step, body })
    }

    pub fn pfor(var: VarId, lo: Expr, hi: Expr, body: Vec<Stmt>, mergeable: bool) -> Stmt {
        Stmt::ParallelFor { lp: Loop { var, lo, hi, step: 1, body }, mergeable }
    }

    pub fn store(buf: BufId, idx: Vec<Expr>, rhs: Expr) -> Stmt {
        Stmt::Assign { lhs: LValue::Store { buf, idx }, rhs }
    }

    pub fn set(v: VarId, rhs: Expr) -> Stmt {
        Stmt::Assign { lhs: LValue::Var(v), rhs }
    }

    pub fn as_loop(&self) -> Option<&Loop> {
        match self {
            Stmt::ParallelFor { lp, .. } | Stmt::For(lp) => Some(lp),
            _ => None,
        }
    }

    /// Every expression directly held by this statement (not its body).
    pub fn exprs_mut(&mut self) -> Vec<&mut Expr> {
        match self {
            Stmt::ParallelFor { lp, .. } | Stmt::For(lp) => vec![&mut lp.lo, &mut lp.hi],
            Stmt::Assign { lhs, rhs } => {
                let mut v = vec![rhs];
                if let LValue::Store { idx, .. } = lhs {
                    v.extend(idx.iter_mut());
                }
                v
            }
            Stmt::Intrinsic(i) => i.exprs_mut(),
            _ => Vec::new(),
        }
    }
}

/// One enclosing loop as seen by the walkers.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopCtx {
    pub var: VarId,
    pub lo: Expr,
    pub hi: Expr,
    pub step: i64,
    pub parallel: bool,
}

/// Visits every statement with its enclosing loops, outermost first.
pub fn walk(stmts: &[Stmt], f: &mut impl FnMut(&Stmt, &[LoopCtx])) {
    fn go(stmts: &[Stmt], stack: &mut Vec<LoopCtx>, f: &mut impl FnMut(&Stmt, &[LoopCtx])) {
        for s in stmts {
            f(s, stack);
            match s {
                Stmt::ParallelFor { lp, .. } | Stmt::For(lp) => {
                    stack.push(LoopCtx { var: lp.var, lo: lp.lo.clone(), hi: lp.hi.clone(), step: lp.step, parallel: matches!(s, Stmt::ParallelFor { .. }) });
                    go(&lp.body, stack, f);
                    stack.pop();
                }
                Stmt::Block(b) => go(b, stack, f),
                _ => {}
            }
        }
    }
    go(stmts, &mut Vec::new(), f)
}

/// Visits every statement mutably, pre-order.
pub fn walk_mut(stmts: &mut [Stmt], f: &mut impl FnMut(&mut Stmt)) {
    for s in stmts {
        f(s);
        match s {
            Stmt::ParallelFor { lp, .. } | Stmt::For(lp) => walk_mut(&mut lp.body, f),
            Stmt::Block(b) => walk_mut(b, f),
            _ => {}
        }
    }
}

/// Rewrites every expression (including loop bounds and indices) bottom-up.
pub fn rewrite_exprs(stmts: &mut [Stmt], f: &mut impl FnMut(&mut Expr)) {
    walk_mut(stmts, &mut |s| {
        for e in s.exprs_mut() {
            e.rewrite(f);
        }
    });
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Function {
    pub name: String,
    pub body: Vec<Stmt>,
    /// Scalar variables assigned in the body.
    pub scalars: Vec<VarId>,
    /// Graph ops this function implements.
    pub ops: Vec<OpId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Module {
    pub bufs: Vec<BufDecl>,
    pub vars: Vec<VarDecl>,
    pub funcs: Vec<Function>,
    pub entry: FuncId,
    pub fold: Option<FuncId>,
    #[serde(skip)]
    pub literals: BTreeMap<BufId, DenseValue>,
    pub inputs: Vec<(TensorId, BufId)>,
    pub outputs: Vec<(TensorId, BufId)>,
}

impl Default for Module {
    fn default() -> Self {
        Module {
            bufs: Vec::new(),
            vars: Vec::new(),
            funcs: Vec::new(),
            entry: FuncId(0),
            fold: None,
            literals: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }
}

impl Module {
    pub fn new_var(&mut self, name: &str, ty: ScalarTy) -> VarId {
        self.vars.push(VarDecl { name: name.into(), ty });
        VarId(self.vars.len() - 1)
    }

    pub fn new_buf(&mut self, decl: BufDecl) -> BufId {
        self.bufs.push(decl);
        BufId(self.bufs.len() - 1)
    }

    pub fn add_func(&mut self, f: Function) -> FuncId {
        self.funcs.push(f);
        FuncId(self.funcs.len() - 1)
    }

    pub fn buf(&self, b: BufId) -> &BufDecl {
        &self.bufs[b.0]
    }

    pub fn func(&self, f: FuncId) -> &Function {
        &self.funcs[f.0]
    }

    /// Functions called directly from `f`, in order.
    pub fn callees(&self, f: FuncId) -> Vec<FuncId> {
        let mut out = Vec::new();
        walk(&self.funcs[f.0].body, &mut |s, _| {
            if let Stmt::Call(c) = s {
                out.push(*c);
            }
        });
        out
    }

    /// The fold function, its callees, the entry function and its callees,
    /// each once.
    pub fn reachable(&self) -> Vec<FuncId> {
        let mut out = Vec::new();
        let push = |f: FuncId, out: &mut Vec<FuncId>| {
            if !out.contains(&f) {
                out.push(f);
            }
        };
        for root in self.fold.into_iter().chain(std::iter::once(self.entry)) {
            for c in self.callees(root) {
                push(c, &mut out);
            }
            push(root, &mut out);
        }
        out
    }

    /// Functions whose bodies access `b`.
    pub fn accessors(&self, b: BufId) -> Vec<FuncId> {
        self.reachable().into_iter().filter(|&f| func_accesses(&self.funcs[f.0], b)).collect()
    }
}

/// Buffers a statement list touches, with whether each is written.
pub fn buffer_accesses(stmts: &[Stmt]) -> BTreeMap<BufId, bool> {
    let mut m: BTreeMap<BufId, bool> = BTreeMap::new();
    let note_expr = |e: &Expr, m: &mut BTreeMap<BufId, bool>| {
        e.visit(&mut |x| {
            if let Expr::Load { buf, .. } = x {
                m.entry(*buf).or_insert(false);
            }
        })
    };
    walk(stmts, &mut |s, _| match s {
        Stmt::Assign { lhs, rhs } => {
            note_expr(rhs, &mut m);
            if let LValue::Store { buf, idx } = lhs {
                idx.iter().for_each(|e| note_expr(e, &mut m));
                m.insert(*buf, true);
            }
        }
        Stmt::Intrinsic(i) => {
            for b in i.reads() {
                m.entry(b).or_insert(false);
            }
            m.insert(i.writes(), true);
        }
        Stmt::ParallelFor { lp, .. } | Stmt::For(lp) => {
            note_expr(&lp.lo, &mut m);
            note_expr(&lp.hi, &mut m);
        }
        _ => {}
    });
    m
}

pub fn func_accesses(f: &Function, b: BufId) -> bool {
    buffer_accesses(&f.body).contains_key(&b)
}

impl fmt::Display for BufKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BufKind::Input => "input",
            BufKind::Output => "output",
            BufKind::Temp => "temp",
            BufKind::Const => "const",
            BufKind::Literal => "literal",
            BufKind::Local => "local",
            BufKind::Elided => "elided",
        };
        f.write_str(s)
    }
}
