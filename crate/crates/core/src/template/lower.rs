//! Lowering of fused ops to tensor IR.
//!
//! Tunable regions become the blocked matmul nest
//! `mpi / npi / msi / (ksi / nsi | nsi / ksi)` around a batch-reduce GEMM
//! call, with pre-ops packed at their anchor and post-ops emitted as
//! element loops over the tile visible at theirs. Standalone ops become
//! row-wise or flat loops.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::graph::shape::{batch_count, norm_axis, rows_cols};
use crate::graph::{BlockInfo, DataType, FusedOp, Graph, LogicalTensor, Op, OpId, OpKind, TensorId};
use crate::passes::{has_prologue, partition_of, standalone_shape, ConstCachePlan, Partition, StandaloneShape};
use crate::tir::*;

use super::anchors::AnchorId;
use super::params::{LoopOrder, MatmulParams};

#[derive(Debug, Error, PartialEq)]
pub enum LowerError {
    #[error("cannot lower {0}: {1}")]
    Unsupported(OpId, String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LowerOptions {
    /// Emit a probe statement at every anchor site of every matmul nest.
    pub probes: bool,
}

/// Buffer dims of a tensor: `[nbat, rows, cols]` when plain,
/// `[nbat, row blocks, col blocks, inner0, inner1]` when blocked.
pub fn tir_dims(lt: &LogicalTensor) -> Vec<usize> {
    let nbat = batch_count(&lt.shape).max(1);
    let (r, c) = rows_cols(&lt.shape);
    match lt.layout.block_info(lt.shape.len()) {
        Some(b) => {
            let (i0, i1) = if b.row_inner_first { (b.row_block, b.col_block) } else { (b.col_block, b.row_block) };
            vec![nbat, r.div_ceil(b.row_block), c.div_ceil(b.col_block), i0, i1]
        }
        None => vec![nbat, r, c],
    }
}

/// A logical row or column coordinate, kept split when it came from a
/// blocked loop so matching block sizes need no division.
#[derive(Clone, Debug)]
enum Coord {
    Flat(Expr),
    Blocked { blk: Expr, inner: Expr, size: usize },
}

impl Coord {
    fn flat(&self) -> Expr {
        match self {
            Coord::Flat(e) => e.clone(),
            Coord::Blocked { blk, inner, size } => iadd(imul(blk.clone(), Expr::int(*size as i64)), inner.clone()),
        }
    }

    fn split(&self, b: usize) -> (Expr, Expr) {
        match self {
            Coord::Blocked { blk, inner, size } if *size == b => (blk.clone(), inner.clone()),
            Coord::Blocked { blk, inner, size } if size % b == 0 => {
                let bi = Expr::int(b as i64);
                (iadd(imul(blk.clone(), Expr::int((size / b) as i64)), idiv(inner.clone(), bi.clone())), irem(inner.clone(), bi))
            }
            _ => {
                let f = self.flat();
                (idiv(f.clone(), Expr::int(b as i64)), irem(f, Expr::int(b as i64)))
            }
        }
    }
}

/// A tensor as stored in a buffer.
#[derive(Clone, Debug)]
struct View {
    buf: BufId,
    shape: Vec<usize>,
    blk: Option<BlockInfo>,
}

impl View {
    fn rc(&self) -> (usize, usize) {
        rows_cols(&self.shape)
    }

    /// Buffer index of element (batch `b` of an output with batch shape
    /// `out_shape`, row, col), broadcasting size-1 axes.
    fn at(&self, out_shape: &[usize], b: &Expr, row: &Coord, col: &Coord) -> Vec<Expr> {
        let bidx = batch_map(out_shape, &self.shape, b);
        let (r, c) = self.rc();
        let (orow, ocol) = rows_cols(out_shape);
        let row = if r == 1 && orow != 1 { Coord::Flat(Expr::int(0)) } else { row.clone() };
        let col = if c == 1 && ocol != 1 { Coord::Flat(Expr::int(0)) } else { col.clone() };
        self.at_rc(bidx, &row, &col)
    }

    fn at_rc(&self, bidx: Expr, row: &Coord, col: &Coord) -> Vec<Expr> {
        match self.blk {
            Some(bi) => {
                let (rb, ri) = row.split(bi.row_block);
                let (cb, ci) = col.split(bi.col_block);
                if bi.row_inner_first {
                    vec![bidx, rb, cb, ri, ci]
                } else {
                    vec![bidx, rb, cb, ci, ri]
                }
            }
            None => vec![bidx, row.flat(), col.flat()],
        }
    }

    /// Index from full logical digits (one per axis of `shape`).
    fn at_digits(&self, digits: &[Expr]) -> Vec<Expr> {
        let rank = self.shape.len();
        let bdims = &self.shape[..rank.saturating_sub(2)];
        let strides = crate::graph::LayoutDesc::plain_strides(bdims);
        let mut bidx = Expr::int(0);
        for (k, d) in digits.iter().take(bdims.len()).enumerate() {
            bidx = iadd(bidx, imul(d.clone(), Expr::int(strides[k] as i64)));
        }
        let (r, c) = match rank {
            0 => (Expr::int(0), Expr::int(0)),
            1 => (Expr::int(0), digits[0].clone()),
            _ => (digits[rank - 2].clone(), digits[rank - 1].clone()),
        };
        self.at_rc(bidx, &Coord::Flat(r), &Coord::Flat(c))
    }
}

fn batch_map(out_shape: &[usize], t_shape: &[usize], b: &Expr) -> Expr {
    let ob = &out_shape[..out_shape.len().saturating_sub(2)];
    let tb = &t_shape[..t_shape.len().saturating_sub(2)];
    if tb.iter().product::<usize>() <= 1 {
        return Expr::int(0);
    }
    if ob == tb {
        return b.clone();
    }
    let ostr = crate::graph::LayoutDesc::plain_strides(ob);
    let tstr = crate::graph::LayoutDesc::plain_strides(tb);
    let off = ob.len() - tb.len();
    let mut e = Expr::int(0);
    for (k, &d) in tb.iter().enumerate() {
        if d == 1 {
            continue;
        }
        let o = k + off;
        let digit = irem(idiv(b.clone(), Expr::int(ostr[o] as i64)), Expr::int(ob[o] as i64));
        e = iadd(e, imul(digit, Expr::int(tstr[k] as i64)));
    }
    e
}

fn zero(dt: DataType) -> Expr {
    Expr::konst(0.0, ScalarTy::of(dt))
}

/// Value of an elementwise op (or Reorder) applied to loaded operands.
fn op_value(op: &Op, mut args: Vec<Expr>, in_dt: DataType) -> Result<Expr, LowerError> {
    let bin = |k: BinOp, args: &mut Vec<Expr>| {
        let b = args.pop().unwrap();
        let a = args.pop().unwrap();
        Expr::bin(k, a, b)
    };
    Ok(match op.kind {
        OpKind::Add => bin(BinOp::Add, &mut args),
        OpKind::Sub => bin(BinOp::Sub, &mut args),
        OpKind::Mul => bin(BinOp::Mul, &mut args),
        OpKind::Div => bin(BinOp::Div, &mut args),
        OpKind::Max => bin(BinOp::Max, &mut args),
        OpKind::Min => bin(BinOp::Min, &mut args),
        OpKind::ReLU => Expr::bin(BinOp::Max, args.remove(0), zero(in_dt)),
        OpKind::Exp => Expr::un(UnOp::Exp, args.remove(0)),
        OpKind::Round => Expr::un(UnOp::Round, args.remove(0)),
        OpKind::Clamp => {
            let lo = op.attr_f64("min").unwrap_or(f64::NEG_INFINITY);
            let hi = op.attr_f64("max").unwrap_or(f64::INFINITY);
            Expr::un(UnOp::Clamp(lo, hi), args.remove(0))
        }
        OpKind::Cast => {
            let to = op.attr_dtype("to").ok_or_else(|| LowerError::Unsupported(op.id, "Cast without `to`".into()))?;
            Expr::un(UnOp::Cast(ScalarTy::of(to)), args.remove(0))
        }
        OpKind::Reorder | OpKind::Broadcast => args.remove(0),
        k => return Err(LowerError::Unsupported(op.id, format!("{} is not elementwise", k.name()))),
    })
}

/// Accumulator type, initial value, update and finalization of a reduction.
struct Reducer {
    ty: ScalarTy,
    init: Expr,
    sum: bool,
    out: ScalarTy,
}

impl Reducer {
    fn new(kind: OpKind, dt: DataType) -> Reducer {
        let out = ScalarTy::of(dt);
        let sum = kind == OpKind::ReduceSum;
        let ty = if sum && dt == DataType::F32 { ScalarTy::F64 } else { out };
        let init = match (sum, dt) {
            (true, _) => Expr::konst(0.0, ty),
            (false, DataType::F32) => Expr::konst(f64::NEG_INFINITY, ty),
            (false, d) => Expr::konst(d.int_range().unwrap().0 as f64, ty),
        };
        Reducer { ty, init, sum, out }
    }

    fn update(&self, acc: VarId, x: Expr) -> Stmt {
        let x = if self.ty != self.out { Expr::un(UnOp::Cast(self.ty), x) } else { x };
        let op = if self.sum { BinOp::Add } else { BinOp::Max };
        Stmt::set(acc, Expr::bin(op, Expr::var(acc), x))
    }

    fn finish(&self, acc: VarId) -> Expr {
        if self.ty != self.out {
            Expr::un(UnOp::Cast(self.out), Expr::var(acc))
        } else {
            Expr::var(acc)
        }
    }
}

struct Lower<'a> {
    g: &'a Graph,
    m: Module,
    tbuf: BTreeMap<TensorId, BufId>,
    probes: bool,
}

/// The packed source of an operand produced by a fused pre-op chain.
struct PreChain {
    src: BufId,
    transposed: bool,
    anchor: AnchorId,
}

impl<'a> Lower<'a> {
    fn begin(&mut self, name: String, ops: Vec<OpId>) -> FuncId {
        self.m.add_func(Function { name, body: Vec::new(), scalars: Vec::new(), ops })
    }

    fn ftemp(&mut self, f: FuncId, name: &str, lt: &LogicalTensor) -> BufId {
        self.m.new_buf(BufDecl { name: name.into(), dtype: lt.dtype, dims: tir_dims(lt), kind: BufKind::Temp, tensor: Some(lt.id), owner: Some(f) })
    }

    fn scalar(&mut self, f: FuncId, name: &str, ty: ScalarTy) -> VarId {
        let v = self.m.new_var(name, ty);
        self.m.funcs[f.0].scalars.push(v);
        v
    }

    fn var(&mut self, name: &str) -> VarId {
        self.m.new_var(name, ScalarTy::I64)
    }

    fn view(&self, t: TensorId, buf: BufId) -> View {
        let lt = self.g.tensor(t);
        View { buf, shape: lt.shape.clone(), blk: lt.layout.block_info(lt.shape.len()) }
    }

    fn module_view(&self, t: TensorId) -> View {
        self.view(t, self.tbuf[&t])
    }

    fn pre_chain(&self, operand: TensorId, pre: &BTreeMap<OpId, AnchorId>) -> Option<PreChain> {
        let producers = self.g.producers();
        let r = *producers.get(&operand)?;
        let anchor = *pre.get(&r)?;
        let mut src = self.g.op(r).inputs[0];
        let mut transposed = false;
        if let Some(&t) = producers.get(&src) {
            if pre.contains_key(&t) {
                transposed = true;
                src = self.g.op(t).inputs[0];
            }
        }
        Some(PreChain { src: self.tbuf[&src], transposed, anchor })
    }

    /// Serial loops zeroing every element of a buffer.
    fn zero_fill_all(&mut self, buf: BufId) -> Stmt {
        let decl = self.m.bufs[buf.0].clone();
        let vars: Vec<VarId> = (0..decl.dims.len()).map(|d| self.var(&format!("z{d}"))).collect();
        let mut s = Stmt::store(buf, vars.iter().map(|v| Expr::var(*v)).collect(), zero(decl.dtype));
        for (d, v) in vars.iter().enumerate().rev() {
            s = Stmt::for_(*v, Expr::int(0), Expr::int(decl.dims[d] as i64), 1, vec![s]);
        }
        s
    }

    fn lower_fused(&mut self, f: &FusedOp) -> Result<FuncId, LowerError> {
        if f.tunable {
            self.lower_tunable(f)
        } else {
            match standalone_shape(self.g, f) {
                StandaloneShape::RowWise => self.lower_rowwise(f),
                StandaloneShape::Flat => self.lower_flat(f),
            }
        }
    }

    fn lower_tunable(&mut self, f: &FusedOp) -> Result<FuncId, LowerError> {
        let g = self.g;
        let p: MatmulParams = f.params.clone().ok_or_else(|| LowerError::Unsupported(f.main, "tunable without params".into()))?;
        let mm = g.op(f.main);
        let (a_t, b_t, c_t) = (mm.inputs[0], mm.inputs[1], mm.output());
        let fid = self.begin(format!("matmul_{}", f.main), f.ops());
        let pre: BTreeMap<OpId, AnchorId> = f.pre_ops.iter().copied().collect();
        let a_pre = self.pre_chain(a_t, &pre);
        let b_pre = self.pre_chain(b_t, &pre);
        let abuf = if a_pre.is_some() { self.ftemp(fid, "A'", g.tensor(a_t)) } else { self.tbuf[&a_t] };
        let bbuf = if b_pre.is_some() { self.ftemp(fid, "B'", g.tensor(b_t)) } else { self.tbuf[&b_t] };
        let fused_post = !f.post_ops.is_empty();
        let cbuf = if fused_post { self.ftemp(fid, "C'acc", g.tensor(c_t)) } else { self.tbuf[&c_t] };

        let batched = p.is_batched();
        let bv = self.var("b");
        let mpi = self.var("mpi");
        let npi = self.var("npi");
        let msi = self.var("msi");
        let ksi = self.var("ksi");
        let nsi = self.var("nsi");
        let b = if batched { Expr::var(bv) } else { Expr::int(0) };
        let (mpi_e, npi_e) = if batched { (Expr::int(0), Expr::int(0)) } else { (Expr::var(mpi), Expr::var(npi)) };
        let (msn, nsn, ksn, bs) = (p.msn as i64, p.nsn as i64, p.ksn as i64, p.bs as i64);
        let mpsi = iadd(imul(mpi_e.clone(), Expr::int(msn)), Expr::var(msi));
        let npsi = iadd(imul(npi_e.clone(), Expr::int(nsn)), Expr::var(nsi));
        let nblocks = p.npn as i64 * nsn;

        // pre-op packs, per anchor
        let mut sites: BTreeMap<AnchorId, Vec<Stmt>> = BTreeMap::new();
        for (chain, is_a) in [(&a_pre, true), (&b_pre, false)] {
            let Some(c) = chain else { continue };
            let (rb0, nrb, cb0, ncb) = if is_a {
                match c.anchor {
                    AnchorId::Pre1 | AnchorId::Pre2 => (imul(mpi_e.clone(), Expr::int(msn)), p.msn, Expr::int(0), p.ksn),
                    AnchorId::Pre3 => (mpsi.clone(), 1, Expr::int(0), p.ksn),
                    _ => (mpsi.clone(), 1, Expr::var(ksi), p.bs),
                }
            } else {
                match c.anchor {
                    AnchorId::Pre1 => (Expr::int(0), p.ksn, Expr::int(0), nblocks as usize),
                    AnchorId::Pre2 | AnchorId::Pre3 => (Expr::int(0), p.ksn, imul(npi_e.clone(), Expr::int(nsn)), p.nsn),
                    AnchorId::Pre4 => (Expr::var(ksi), p.bs, imul(npi_e.clone(), Expr::int(nsn)), p.nsn),
                    _ => (Expr::var(ksi), p.bs, npsi.clone(), 1),
                }
            };
            let (rows, cols, br, bc, rif, buf) = if is_a { (p.m, p.k, p.mb, p.kb, true, abuf) } else { (p.k, p.n, p.kb, p.nb, false, bbuf) };
            let pack = Stmt::Intrinsic(Intrinsic::ReorderPack {
                src: PlainMat { buf: c.src, batch: b.clone(), rows, cols, transposed: c.transposed },
                dst: BlockedMat {
                    start: Slice { buf, idx: vec![b.clone(), rb0.clone(), cb0.clone(), Expr::int(0), Expr::int(0)] },
                    br,
                    bc,
                    row_inner_first: rif,
                    rb_dim: Some(1),
                    cb_dim: Some(2),
                    rb0,
                    cb0,
                    nrb,
                    ncb,
                },
            });
            sites.entry(c.anchor).or_default().push(pack);
        }
        let probes = self.probes;
        let site = |a: AnchorId, sites: &mut BTreeMap<AnchorId, Vec<Stmt>>| {
            let mut v = sites.remove(&a).unwrap_or_default();
            if probes {
                v.push(Stmt::Probe(a));
            }
            v
        };

        // microkernel
        let kind = if p.dtype == DataType::F32 { BrgemmKind::F32 } else { BrgemmKind::U8S8S32 };
        let brgemm = Stmt::Intrinsic(Intrinsic::Brgemm {
            kind,
            mb: p.mb,
            nb: p.nb,
            kb: p.kb,
            bs: p.bs,
            a: Slice { buf: abuf, idx: vec![b.clone(), mpsi.clone(), Expr::var(ksi), Expr::int(0), Expr::int(0)] },
            a_batch_dim: Some(2),
            b: Slice { buf: bbuf, idx: vec![b.clone(), Expr::var(ksi), npsi.clone(), Expr::int(0), Expr::int(0)] },
            b_batch_dim: Some(1),
            c: Slice { buf: cbuf, idx: vec![b.clone(), mpsi.clone(), npsi.clone(), Expr::int(0), Expr::int(0)] },
            accumulate: true,
        });
        let mut inner = site(AnchorId::Pre5, &mut sites);
        inner.push(brgemm);
        let k_body;
        let msi_body_core = match p.loop_order {
            LoopOrder::MKN => {
                k_body = {
                    let mut v = site(AnchorId::Pre4, &mut sites);
                    v.push(Stmt::for_(nsi, Expr::int(0), Expr::int(nsn), 1, inner));
                    v
                };
                vec![Stmt::for_(ksi, Expr::int(0), Expr::int(ksn), bs, k_body)]
            }
            LoopOrder::MNK => vec![Stmt::for_(nsi, Expr::int(0), Expr::int(nsn), 1, vec![Stmt::for_(ksi, Expr::int(0), Expr::int(ksn), bs, inner)])],
        };

        // accumulator init
        let (zn, zi, zj) = (self.var("nsi"), self.var("i"), self.var("j"));
        let cdt = g.tensor(c_t).dtype;
        let init = Stmt::for_(
            zn,
            Expr::int(0),
            Expr::int(nsn),
            1,
            vec![Stmt::for_(
                zi,
                Expr::int(0),
                Expr::int(p.mb as i64),
                1,
                vec![Stmt::for_(
                    zj,
                    Expr::int(0),
                    Expr::int(p.nb as i64),
                    1,
                    vec![Stmt::store(
                        cbuf,
                        vec![b.clone(), mpsi.clone(), iadd(imul(npi_e.clone(), Expr::int(nsn)), Expr::var(zn)), Expr::var(zi), Expr::var(zj)],
                        zero(cdt),
                    )],
                )],
            )],
        );

        // post-ops
        let tile = Tile { p: p.clone(), b: b.clone(), mpi: mpi_e.clone(), npi: npi_e.clone(), mpsi: mpsi.clone(), out_shape: g.tensor(c_t).shape.clone() };
        let mut post: BTreeMap<AnchorId, Vec<Stmt>> = BTreeMap::new();
        let mut prologue = Vec::new();
        if fused_post {
            let c2 = self.ftemp(fid, "C''", g.tensor(c_t));
            let out_t = f.output(g);
            let mut vals: BTreeMap<TensorId, View> = BTreeMap::new();
            vals.insert(c_t, self.view(c_t, c2));
            for (op, _) in &f.post_ops {
                let t = g.op(*op).output();
                let buf = if t == out_t { self.tbuf[&t] } else { self.ftemp(fid, &format!("{t}"), g.tensor(t)) };
                vals.insert(t, self.view(t, buf));
            }
            let copy = (self.view(c_t, cbuf), self.view(c_t, c2));
            let mut pending_copy = Some(copy);
            let mut i = 0;
            while i < f.post_ops.len() {
                let anchor = f.post_ops[i].1;
                let op = g.op(f.post_ops[i].0);
                if op.kind.is_reduction() {
                    if let Some(cp) = pending_copy.take() {
                        let s = self.ew_nest(fid, &tile, anchor, &[], Some(cp), &vals)?;
                        post.entry(anchor).or_default().push(s);
                    }
                    let s = self.red_nest(fid, &tile, anchor, op, &vals)?;
                    post.entry(anchor).or_default().push(s);
                    i += 1;
                } else {
                    let mut run = Vec::new();
                    while i < f.post_ops.len() && f.post_ops[i].1 == anchor && !g.op(f.post_ops[i].0).kind.is_reduction() {
                        run.push(f.post_ops[i].0);
                        i += 1;
                    }
                    let s = self.ew_nest(fid, &tile, anchor, &run, pending_copy.take(), &vals)?;
                    post.entry(anchor).or_default().push(s);
                }
            }
            // padding of a blocked region output
            let lt = g.tensor(out_t);
            if let Some(bi) = lt.layout.block_info(lt.shape.len()) {
                let (r, c) = rows_cols(&lt.shape);
                let padded = r % bi.row_block != 0 || c % bi.col_block != 0;
                if padded && (bi.row_block, bi.col_block) == (p.mb, p.nb) {
                    let last = f.post_ops.last().unwrap().1;
                    let s = self.pad_nest(&tile, last, &vals[&out_t]);
                    post.entry(last).or_default().push(s);
                } else if padded {
                    prologue.push(self.zero_fill_all(self.tbuf[&out_t]));
                }
            }
            debug_assert_eq!(has_prologue(g, f), !prologue.is_empty());
        }
        let mut post_site = |a: AnchorId| {
            let mut v = post.remove(&a).unwrap_or_default();
            if probes {
                v.push(Stmt::Probe(a));
            }
            v
        };

        let mut msi_body = site(AnchorId::Pre3, &mut sites);
        msi_body.push(init);
        msi_body.extend(msi_body_core);
        msi_body.extend(post_site(AnchorId::Post1));
        let msi_loop = Stmt::for_(msi, Expr::int(0), Expr::int(msn), 1, msi_body);

        let body = if batched {
            let mut v = site(AnchorId::Pre1, &mut sites);
            v.extend(site(AnchorId::Pre2, &mut sites));
            v.push(msi_loop);
            v.extend(post_site(AnchorId::Post2));
            v.extend(post_site(AnchorId::Post3));
            vec![Stmt::pfor(bv, Expr::int(0), Expr::int(p.batch as i64), v, f.mergeable_with_next)]
        } else {
            let mut npi_body = site(AnchorId::Pre2, &mut sites);
            npi_body.push(msi_loop);
            npi_body.extend(post_site(AnchorId::Post2));
            let mut mpi_body = site(AnchorId::Pre1, &mut sites);
            mpi_body.push(Stmt::pfor(npi, Expr::int(0), Expr::int(p.npn as i64), npi_body, false));
            mpi_body.extend(post_site(AnchorId::Post3));
            vec![Stmt::pfor(mpi, Expr::int(0), Expr::int(p.mpn as i64), mpi_body, f.mergeable_with_next)]
        };
        debug_assert!(sites.is_empty());
        let mut full = prologue;
        full.extend(body);
        self.m.funcs[fid.0].body = full;
        Ok(fid)
    }

    /// Loops over the row blocks and column blocks visible at `anchor`; the
    /// returned wrapper nests a body inside them.
    fn tile_blocks(&mut self, t: &Tile, anchor: AnchorId) -> (Expr, Expr, Vec<(VarId, i64)>) {
        let p = &t.p;
        let (msn, nsn) = (p.msn as i64, p.nsn as i64);
        let mut loops = Vec::new();
        let row = match anchor {
            AnchorId::Post1 => t.mpsi.clone(),
            _ => {
                let v = self.var("msi");
                loops.push((v, msn));
                iadd(imul(t.mpi.clone(), Expr::int(msn)), Expr::var(v))
            }
        };
        let col = match anchor {
            AnchorId::Post3 => {
                let v = self.var("nsi");
                loops.push((v, p.npn as i64 * nsn));
                Expr::var(v)
            }
            _ => {
                let v = self.var("nsi");
                loops.push((v, nsn));
                iadd(imul(t.npi.clone(), Expr::int(nsn)), Expr::var(v))
            }
        };
        (row, col, loops)
    }

    /// Loop bound of the valid part of a block: `min(block, total - blk * block)`.
    fn valid(total: usize, block: usize, blk: &Expr) -> Expr {
        if total.is_multiple_of(block) {
            Expr::int(block as i64)
        } else {
            imin(Expr::int(block as i64), isub(Expr::int(total as i64), imul(blk.clone(), Expr::int(block as i64))))
        }
    }

    fn wrap(loops: &[(VarId, i64)], body: Vec<Stmt>) -> Stmt {
        let mut s = body;
        for (v, n) in loops.iter().rev() {
            s = vec![Stmt::for_(*v, Expr::int(0), Expr::int(*n), 1, s)];
        }
        if s.len() == 1 {
            s.pop().unwrap()
        } else {
            Stmt::Block(s)
        }
    }

    /// Element stores for `run`, preceded by the accumulator copy if given.
    #[allow(clippy::too_many_arguments)]
    fn ew_body(
        &self,
        out_shape: &[usize],
        b: &Expr,
        row: &Coord,
        col: &Coord,
        run: &[OpId],
        copy: Option<(View, View)>,
        vals: &BTreeMap<TensorId, View>,
    ) -> Result<Vec<Stmt>, LowerError> {
        let g = self.g;
        let mut stmts = Vec::new();
        if let Some((from, to)) = copy {
            stmts.push(Stmt::store(to.buf, to.at(out_shape, b, row, col), Expr::load(from.buf, from.at(out_shape, b, row, col))));
        }
        for &o in run {
            let op = g.op(o);
            let args: Vec<Expr> = op
                .inputs
                .iter()
                .map(|t| {
                    let v = vals.get(t).cloned().unwrap_or_else(|| self.module_view(*t));
                    Expr::load(v.buf, v.at(out_shape, b, row, col))
                })
                .collect();
            let val = op_value(op, args, g.tensor(op.inputs[0]).dtype)?;
            let out = &vals[&op.output()];
            stmts.push(Stmt::store(out.buf, out.at(out_shape, b, row, col), val));
        }
        Ok(stmts)
    }

    fn ew_nest(
        &mut self,
        _f: FuncId,
        t: &Tile,
        anchor: AnchorId,
        run: &[OpId],
        copy: Option<(View, View)>,
        vals: &BTreeMap<TensorId, View>,
    ) -> Result<Stmt, LowerError> {
        let (rowblk, colblk, loops) = self.tile_blocks(t, anchor);
        let (i, j) = (self.var("i"), self.var("j"));
        let row = Coord::Blocked { blk: rowblk.clone(), inner: Expr::var(i), size: t.p.mb };
        let col = Coord::Blocked { blk: colblk.clone(), inner: Expr::var(j), size: t.p.nb };
        let body = self.ew_body(&t.out_shape, &t.b, &row, &col, run, copy, vals)?;
        let ij = Stmt::for_(
            i,
            Expr::int(0),
            Self::valid(t.p.m, t.p.mb, &rowblk),
            1,
            vec![Stmt::for_(j, Expr::int(0), Self::valid(t.p.n, t.p.nb, &colblk), 1, body)],
        );
        Ok(Self::wrap(&loops, vec![ij]))
    }

    fn red_nest(&mut self, f: FuncId, t: &Tile, anchor: AnchorId, op: &Op, vals: &BTreeMap<TensorId, View>) -> Result<Stmt, LowerError> {
        let g = self.g;
        let (rowblk, colblk, loops) = self.tile_blocks(t, anchor);
        let (row_loops, col_loops): (Vec<_>, Vec<_>) = loops.into_iter().partition(|(v, _)| rowblk.uses_var(*v));
        let (i, j) = (self.var("i"), self.var("j"));
        let row = Coord::Blocked { blk: rowblk.clone(), inner: Expr::var(i), size: t.p.mb };
        let col = Coord::Blocked { blk: colblk.clone(), inner: Expr::var(j), size: t.p.nb };
        let x = op.inputs[0];
        let xv = vals.get(&x).cloned().unwrap_or_else(|| self.module_view(x));
        let red = Reducer::new(op.kind, g.tensor(x).dtype);
        let acc = self.scalar(f, "acc", red.ty);
        let upd = red.update(acc, Expr::load(xv.buf, xv.at(&t.out_shape, &t.b, &row, &col)));
        let cols = Self::wrap(&col_loops, vec![Stmt::for_(j, Expr::int(0), Self::valid(t.p.n, t.p.nb, &colblk), 1, vec![upd])]);
        let out = &vals[&op.output()];
        let store = Stmt::store(out.buf, out.at(&t.out_shape, &t.b, &row, &Coord::Flat(Expr::int(0))), red.finish(acc));
        let ib = Stmt::for_(i, Expr::int(0), Self::valid(t.p.m, t.p.mb, &rowblk), 1, vec![Stmt::set(acc, red.init.clone()), cols, store]);
        Ok(Self::wrap(&row_loops, vec![ib]))
    }

    /// Zeroes the padding of every output tile visible at `anchor`.
    fn pad_nest(&mut self, t: &Tile, anchor: AnchorId, out: &View) -> Stmt {
        let (rowblk, colblk, loops) = self.tile_blocks(t, anchor);
        let (mb, nb) = (t.p.mb as i64, t.p.nb as i64);
        let rv = Self::valid(t.p.m, t.p.mb, &rowblk);
        let cv = Self::valid(t.p.n, t.p.nb, &colblk);
        let dt = self.m.bufs[out.buf.0].dtype;
        let mut body = Vec::new();
        let piece = |lo_i: Expr, hi_i: Expr, lo_j: Expr, hi_j: Expr, this: &mut Self| {
            let (i, j) = (this.var("i"), this.var("j"));
            let row = Coord::Blocked { blk: rowblk.clone(), inner: Expr::var(i), size: t.p.mb };
            let col = Coord::Blocked { blk: colblk.clone(), inner: Expr::var(j), size: t.p.nb };
            let st = Stmt::store(out.buf, out.at(&t.out_shape, &t.b, &row, &col), zero(dt));
            Stmt::for_(i, lo_i, hi_i, 1, vec![Stmt::for_(j, lo_j, hi_j, 1, vec![st])])
        };
        if !t.p.m.is_multiple_of(t.p.mb) {
            body.push(piece(rv.clone(), Expr::int(mb), Expr::int(0), Expr::int(nb), self));
        }
        if !t.p.n.is_multiple_of(t.p.nb) {
            body.push(piece(Expr::int(0), rv, cv, Expr::int(nb), self));
        }
        Self::wrap(&loops, body)
    }

    fn lower_rowwise(&mut self, f: &FusedOp) -> Result<FuncId, LowerError> {
        let g = self.g;
        let op = g.op(f.main);
        let fid = self.begin(format!("{}_{}", op.kind.name().to_lowercase(), op.id), vec![op.id]);
        let out_t = op.output();
        let out = self.module_view(out_t);
        let (rows, cols) = out.rc();
        let part = partition_of(g, f);
        let pv = self.var(if matches!(part, Partition::Batch(_)) { "b" } else { "rb" });
        let (trip, b, r_lo, r_hi, rows_per) = match part {
            Partition::Batch(n) => (n, Expr::var(pv), Expr::int(0), Expr::int(rows as i64), rows),
            Partition::Rows { trip, rows_per } => {
                let hi = if rows % rows_per == 0 {
                    Expr::int(rows_per as i64)
                } else {
                    imin(Expr::int(rows_per as i64), isub(Expr::int(rows as i64), imul(Expr::var(pv), Expr::int(rows_per as i64))))
                };
                (trip, Expr::int(0), Expr::int(0), hi, rows_per)
            }
            Partition::Opaque => return Err(LowerError::Unsupported(op.id, "row-wise op without a row partition".into())),
        };
        let rows_partitioned = matches!(part, Partition::Rows { .. });
        let ri = self.var("r");
        let row = |v: VarId| {
            if rows_partitioned {
                Coord::Blocked { blk: Expr::var(pv), inner: Expr::var(v), size: rows_per }
            } else {
                Coord::Flat(Expr::var(v))
            }
        };
        let mut body = Vec::new();
        let src_t = op.inputs[0];
        let src = self.module_view(src_t);
        let intrinsic_reorder = op.kind == OpKind::Reorder && (src.blk.is_none() != out.blk.is_none());
        if intrinsic_reorder {
            let (blocked, plain, blocked_is_dst) = if out.blk.is_some() { (&out, &src, true) } else { (&src, &out, false) };
            let bi = blocked.blk.unwrap();
            let nrb_all = rows.div_ceil(bi.row_block);
            let (rb0, nrb) = if rows_partitioned {
                debug_assert_eq!(rows_per, bi.row_block);
                (Expr::var(pv), 1)
            } else {
                (Expr::int(0), nrb_all)
            };
            let bm = BlockedMat {
                start: Slice { buf: blocked.buf, idx: vec![b.clone(), rb0.clone(), Expr::int(0), Expr::int(0), Expr::int(0)] },
                br: bi.row_block,
                bc: bi.col_block,
                row_inner_first: bi.row_inner_first,
                rb_dim: Some(1),
                cb_dim: Some(2),
                rb0,
                cb0: Expr::int(0),
                nrb,
                ncb: cols.div_ceil(bi.col_block),
            };
            let pm = PlainMat { buf: plain.buf, batch: b.clone(), rows, cols, transposed: false };
            body.push(Stmt::Intrinsic(if blocked_is_dst {
                Intrinsic::ReorderPack { src: pm, dst: bm }
            } else {
                Intrinsic::ReorderUnpack { src: bm, dst: pm }
            }));
        } else if op.kind.is_reduction() {
            let x = self.module_view(src_t);
            let red = Reducer::new(op.kind, g.tensor(src_t).dtype);
            let acc = self.scalar(fid, "acc", red.ty);
            let c = self.var("c");
            let xr = row(ri);
            let upd = red.update(acc, Expr::load(x.buf, x.at(&x.shape.clone(), &b, &xr, &Coord::Flat(Expr::var(c)))));
            let store = Stmt::store(out.buf, out.at(&out.shape, &b, &xr, &Coord::Flat(Expr::int(0))), red.finish(acc));
            body.push(Stmt::for_(
                ri,
                r_lo.clone(),
                r_hi.clone(),
                1,
                vec![Stmt::set(acc, red.init.clone()), Stmt::for_(c, Expr::int(0), Expr::int(rows_cols(&x.shape).1 as i64), 1, vec![upd]), store],
            ));
        } else {
            let c = self.var("c");
            let vals: BTreeMap<TensorId, View> = [(out_t, out.clone())].into();
            let stmts = self.ew_body(&out.shape, &b, &row(ri), &Coord::Flat(Expr::var(c)), &[op.id], None, &vals)?;
            body.push(Stmt::for_(ri, r_lo.clone(), r_hi.clone(), 1, vec![Stmt::for_(c, Expr::int(0), Expr::int(cols as i64), 1, stmts)]));
            // padding of a blocked output
            if let Some(bi) = out.blk {
                let (rpad, cpad) = (rows.div_ceil(bi.row_block) * bi.row_block, cols.div_ceil(bi.col_block) * bi.col_block);
                let dt = g.tensor(out_t).dtype;
                if cpad > cols {
                    let (r2, c2) = (self.var("r"), self.var("c"));
                    let st = Stmt::store(out.buf, out.at(&out.shape, &b, &row(r2), &Coord::Flat(Expr::var(c2))), zero(dt));
                    body.push(Stmt::for_(r2, r_lo.clone(), r_hi.clone(), 1, vec![Stmt::for_(c2, Expr::int(cols as i64), Expr::int(cpad as i64), 1, vec![st])]));
                }
                if rpad > rows && !has_prologue(g, f) {
                    let (r2, c2) = (self.var("r"), self.var("c"));
                    let (lo, hi) = if rows_partitioned {
                        let base = imul(Expr::var(pv), Expr::int(rows_per as i64));
                        (
                            Expr::bin(BinOp::Max, Expr::int(0), isub(Expr::int(rows as i64), base.clone())),
                            imin(Expr::int(rows_per as i64), isub(Expr::int(rpad as i64), base)),
                        )
                    } else {
                        (Expr::int(rows as i64), Expr::int(rpad as i64))
                    };
                    let st = Stmt::store(out.buf, out.at(&out.shape, &b, &row(r2), &Coord::Flat(Expr::var(c2))), zero(dt));
                    body.push(Stmt::for_(r2, lo, hi, 1, vec![Stmt::for_(c2, Expr::int(0), Expr::int(cpad as i64), 1, vec![st])]));
                }
            }
        }
        let mut full = Vec::new();
        if has_prologue(g, f) {
            full.push(self.zero_fill_all(out.buf));
        }
        full.push(Stmt::pfor(pv, Expr::int(0), Expr::int(trip as i64), body, f.mergeable_with_next));
        self.m.funcs[fid.0].body = full;
        Ok(fid)
    }

    fn lower_flat(&mut self, f: &FusedOp) -> Result<FuncId, LowerError> {
        let g = self.g;
        let op = g.op(f.main);
        let fid = self.begin(format!("{}_{}", op.kind.name().to_lowercase(), op.id), vec![op.id]);
        let out_t = op.output();
        let out = self.module_view(out_t);
        if out.blk.is_some() {
            return Err(LowerError::Unsupported(op.id, "flat loop into a blocked layout".into()));
        }
        let shape = out.shape.clone();
        let n: usize = shape.iter().product();
        let idx = self.var("idx");
        let strides = crate::graph::LayoutDesc::plain_strides(&shape);
        let digits: Vec<Expr> = (0..shape.len())
            .map(|k| {
                let d = idiv(Expr::var(idx), Expr::int(strides[k] as i64));
                if k == 0 {
                    d
                } else {
                    irem(d, Expr::int(shape[k] as i64))
                }
            })
            .collect();
        let bcast = |t_shape: &[usize]| -> Vec<Expr> {
            let off = shape.len() - t_shape.len();
            t_shape.iter().enumerate().map(|(k, &d)| if d == 1 { Expr::int(0) } else { digits[k + off].clone() }).collect()
        };
        let oidx = out.at_digits(&digits);
        let mut body = Vec::new();
        match op.kind {
            OpKind::Transpose => {
                let x = self.module_view(op.inputs[0]);
                let r = x.shape.len();
                let perm: Vec<usize> = match op.attr_ints("perm") {
                    Some(p) => p.iter().map(|&a| norm_axis(a, r).unwrap()).collect(),
                    None => {
                        let mut p: Vec<usize> = (0..r).collect();
                        if r >= 2 {
                            p.swap(r - 1, r - 2);
                        }
                        p
                    }
                };
                let mut xd = vec![Expr::int(0); r];
                for (k, &pk) in perm.iter().enumerate() {
                    xd[pk] = digits[k].clone();
                }
                body.push(Stmt::store(out.buf, oidx, Expr::load(x.buf, x.at_digits(&xd))));
            }
            OpKind::ReduceSum | OpKind::ReduceMax => {
                let x = self.module_view(op.inputs[0]);
                let r = x.shape.len();
                let axis = norm_axis(op.attr_int("axis").unwrap_or(-1), r).ok_or_else(|| LowerError::Unsupported(op.id, "bad axis".into()))?;
                let keep = op.attr_bool("keepdims").unwrap_or(true);
                let k = self.var("k");
                let mut xd: Vec<Expr> = if keep {
                    digits.clone()
                } else {
                    let mut d = digits.clone();
                    d.insert(axis, Expr::int(0));
                    d
                };
                xd[axis] = Expr::var(k);
                let red = Reducer::new(op.kind, x_dtype(g, op));
                let acc = self.scalar(fid, "acc", red.ty);
                body.push(Stmt::set(acc, red.init.clone()));
                body.push(Stmt::for_(k, Expr::int(0), Expr::int(x.shape[axis] as i64), 1, vec![red.update(acc, Expr::load(x.buf, x.at_digits(&xd)))]));
                body.push(Stmt::store(out.buf, oidx, red.finish(acc)));
            }
            _ => {
                let args: Vec<Expr> = op
                    .inputs
                    .iter()
                    .map(|t| {
                        let v = self.module_view(*t);
                        Expr::load(v.buf, v.at_digits(&bcast(&v.shape)))
                    })
                    .collect();
                let val = op_value(op, args, x_dtype(g, op))?;
                body.push(Stmt::store(out.buf, oidx, val));
            }
        }
        self.m.funcs[fid.0].body = vec![Stmt::pfor(idx, Expr::int(0), Expr::int(n as i64), body, false)];
        Ok(fid)
    }
}

fn x_dtype(g: &Graph, op: &Op) -> DataType {
    g.tensor(op.inputs[0]).dtype
}

/// What a post-op nest needs to know about the enclosing template.
struct Tile {
    p: MatmulParams,
    b: Expr,
    mpi: Expr,
    npi: Expr,
    mpsi: Expr,
    out_shape: Vec<usize>,
}

/// Lowers a fused graph into a module: one function per fused op, an entry
/// function calling them in order and a fold function computing the
/// constant-cache slots.
pub fn lower_module(
    g: &Graph,
    fused: &[FusedOp],
    plan: &ConstCachePlan,
    params: &BTreeMap<OpId, MatmulParams>,
    opts: &LowerOptions,
) -> Result<Module, LowerError> {
    let mut lw = Lower { g, m: Module::default(), tbuf: BTreeMap::new(), probes: opts.probes };
    let slots: BTreeSet<TensorId> = plan.slots.iter().map(|s| s.0).collect();
    let decl = |lw: &mut Lower, t: TensorId, kind: BufKind| {
        if lw.tbuf.contains_key(&t) {
            return;
        }
        let lt = g.tensor(t);
        let b = lw.m.new_buf(BufDecl { name: format!("{t}"), dtype: lt.dtype, dims: tir_dims(lt), kind, tensor: Some(t), owner: None });
        if kind == BufKind::Literal {
            lw.m.literals.insert(b, g.const_data[&t].clone());
        }
        lw.tbuf.insert(t, b);
    };
    for &t in &g.inputs {
        decl(&mut lw, t, BufKind::Input);
    }
    for &t in &g.outputs {
        if !g.is_graph_input(t) && !g.is_literal(t) {
            decl(&mut lw, t, BufKind::Output);
        }
    }
    for &t in g.const_data.keys() {
        if g.tensors.contains_key(&t) {
            decl(&mut lw, t, BufKind::Literal);
        }
    }
    for &t in &slots {
        decl(&mut lw, t, BufKind::Const);
    }
    for &o in &plan.fold_ops {
        decl(&mut lw, g.op(o).output(), BufKind::Temp);
    }
    for f in fused {
        decl(&mut lw, f.output(g), BufKind::Temp);
        // unfused producers feeding this region
        for t in f.external_inputs(g) {
            decl(&mut lw, t, BufKind::Temp);
        }
    }
    lw.m.inputs = g.inputs.iter().map(|t| (*t, lw.tbuf[t])).collect();
    lw.m.outputs = g.outputs.iter().map(|t| (*t, lw.tbuf[t])).collect();

    // fold function
    if !plan.fold_ops.is_empty() {
        let mut calls = Vec::new();
        for &o in &plan.fold_ops {
            let f = if g.op(o).kind == OpKind::MatMul {
                FusedOp { main: o, tunable: true, pre_ops: vec![], post_ops: vec![], params: params.get(&o).cloned(), mergeable_with_next: false }
            } else {
                FusedOp::standalone(o)
            };
            calls.push(Stmt::Call(lw.lower_fused(&f)?));
        }
        let fold = lw.m.add_func(Function { name: "fold".into(), body: calls, scalars: vec![], ops: plan.fold_ops.clone() });
        lw.m.fold = Some(fold);
    }
    let mut calls = Vec::new();
    for f in fused {
        calls.push(Stmt::Call(lw.lower_fused(f)?));
    }
    let ops = fused.iter().flat_map(|f| f.ops()).collect();
    lw.m.entry = lw.m.add_func(Function { name: "main".into(), body: calls, scalars: vec![], ops });
    Ok(lw.m)
}
