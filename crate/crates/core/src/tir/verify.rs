//! Static checks on a module: scoping, types, bounds, parallel write sets.

use thiserror::Error;

use super::affine::{env_of, interval, upper_bound, Env};
use super::ir::*;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("{func}: unbound variable {var}")]
    UnboundVar { func: String, var: String },
    #[error("{func}: loop variable {var} rebound")]
    Rebound { func: String, var: String },
    #[error("{func}: type mismatch: {detail}")]
    Type { func: String, detail: String },
    #[error("{func}: {buf} accessed with {got} indices, has {want} dims")]
    Rank { func: String, buf: String, got: usize, want: usize },
    #[error("{func}: index out of bounds: {detail}")]
    OutOfBounds { func: String, detail: String },
    #[error("{func}: overlapping parallel writes to {buf} across {var}")]
    ParallelWrite { func: String, buf: String, var: String },
    #[error("{func}: buffer {buf} belongs to another function")]
    Foreign { func: String, buf: String },
    #[error("{func}: unknown {what}")]
    Unknown { func: String, what: String },
}

struct Checker<'a> {
    m: &'a Module,
    f: FuncId,
    errors: Vec<VerifyError>,
}

impl<'a> Checker<'a> {
    fn fname(&self) -> String {
        self.m.funcs[self.f.0].name.clone()
    }

    fn push(&mut self, e: VerifyError) {
        if !self.errors.contains(&e) {
            self.errors.push(e);
        }
    }

    fn type_err(&mut self, detail: String) {
        let func = self.fname();
        self.push(VerifyError::Type { func, detail });
    }

    fn check_buf(&mut self, b: BufId) -> bool {
        let Some(decl) = self.m.bufs.get(b.0) else {
            let func = self.fname();
            self.push(VerifyError::Unknown { func, what: format!("buffer %{}", b.0) });
            return false;
        };
        if let Some(o) = decl.owner {
            if o != self.f {
                let func = self.fname();
                self.push(VerifyError::Foreign { func, buf: decl.name.clone() });
            }
        }
        true
    }

    /// Checks an index tuple; `cover` is the extent touched from each index.
    fn check_index(&mut self, b: BufId, idx: &[Expr], cover: &[usize], stack: &[LoopCtx], env: &Env) {
        if !self.check_buf(b) {
            return;
        }
        let decl = &self.m.bufs[b.0];
        if idx.len() != decl.dims.len() {
            let func = self.fname();
            self.push(VerifyError::Rank { func, buf: decl.name.clone(), got: idx.len(), want: decl.dims.len() });
            return;
        }
        for (d, e) in idx.iter().enumerate() {
            self.check_expr(e, stack, Some(ScalarTy::I64));
            let c = cover.get(d).copied().unwrap_or(1) as i64;
            if let Some((lo, hi)) = interval(e, env) {
                let hi = upper_bound(e, stack, env).map_or(hi, |u| u.min(hi));
                if lo < 0 || hi + c > decl.dims[d] as i64 {
                    let func = self.fname();
                    let detail = format!("{}[dim {d}] spans {lo}..{} but extent is {}", decl.name, hi + c, decl.dims[d]);
                    self.push(VerifyError::OutOfBounds { func, detail });
                }
            }
        }
    }

    fn check_expr(&mut self, e: &Expr, stack: &[LoopCtx], want: Option<ScalarTy>) {
        let env = env_of(stack);
        self.expr(e, stack, &env);
        if let Some(w) = want {
            let t = e.ty(self.m);
            if t != w {
                self.type_err(format!("expected {} got {}", w.name(), t.name()));
            }
        }
    }

    fn expr(&mut self, e: &Expr, stack: &[LoopCtx], env: &Env) {
        match e {
            Expr::Const { .. } => {}
            Expr::Var(v) => {
                let bound = stack.iter().any(|l| l.var == *v) || self.m.funcs[self.f.0].scalars.contains(v);
                if !bound {
                    let func = self.fname();
                    let var = self.m.vars.get(v.0).map_or(format!("v{}", v.0), |d| d.name.clone());
                    self.push(VerifyError::UnboundVar { func, var });
                }
            }
            Expr::Load { buf, idx } => {
                for i in idx {
                    self.expr(i, stack, env);
                }
                self.check_index(*buf, idx, &[], stack, env);
            }
            Expr::Binary { op, lhs, rhs } => {
                self.expr(lhs, stack, env);
                self.expr(rhs, stack, env);
                let (a, b) = (lhs.ty(self.m), rhs.ty(self.m));
                if a != b {
                    self.type_err(format!("{op:?} operands {} and {}", a.name(), b.name()));
                }
            }
            Expr::Unary { op, arg } => {
                self.expr(arg, stack, env);
                if matches!(op, UnOp::Exp | UnOp::Round) && !arg.ty(self.m).is_float() {
                    self.type_err(format!("{op:?} on {}", arg.ty(self.m).name()));
                }
            }
        }
    }

    fn check_parallel_write(&mut self, b: BufId, idx: &[&Expr], stack: &[LoopCtx], env: &Env) {
        if self.m.bufs[b.0].kind == BufKind::Local {
            return;
        }
        for l in stack.iter().filter(|l| l.parallel) {
            let trip = env.get(&l.var).map(|r| r.1 - r.0 + 1);
            if trip == Some(1) {
                continue;
            }
            if !idx.iter().any(|e| e.uses_var(l.var)) {
                let func = self.fname();
                let (buf, var) = (self.m.bufs[b.0].name.clone(), self.m.vars[l.var.0].name.clone());
                self.push(VerifyError::ParallelWrite { func, buf, var });
            }
        }
    }

    fn blocked(&mut self, bm: &BlockedMat, stack: &[LoopCtx], env: &Env) {
        if !self.check_buf(bm.start.buf) {
            return;
        }
        let rank = self.m.bufs[bm.start.buf.0].dims.len();
        let mut cover = vec![1; rank];
        if let Some(d) = bm.rb_dim.filter(|&d| d < rank) {
            cover[d] = bm.nrb;
        }
        if let Some(d) = bm.cb_dim.filter(|&d| d < rank) {
            cover[d] = bm.ncb;
        }
        if rank >= 2 {
            let dims = &self.m.bufs[bm.start.buf.0].dims;
            let inner = if bm.row_inner_first { (bm.br, bm.bc) } else { (bm.bc, bm.br) };
            if (dims[rank - 2], dims[rank - 1]) != inner {
                self.type_err(format!("{} blocks {:?} do not match {:?}", self.m.bufs[bm.start.buf.0].name, inner, dims));
            }
            cover[rank - 2] = dims[rank - 2];
            cover[rank - 1] = dims[rank - 1];
        }
        self.check_index(bm.start.buf, &bm.start.idx, &cover, stack, env);
        self.check_expr(&bm.rb0, stack, Some(ScalarTy::I64));
        self.check_expr(&bm.cb0, stack, Some(ScalarTy::I64));
    }

    fn plain(&mut self, p: &PlainMat, stack: &[LoopCtx], env: &Env) {
        if !self.check_buf(p.buf) {
            return;
        }
        let dims = self.m.bufs[p.buf.0].dims.clone();
        let want = if p.transposed { (p.cols, p.rows) } else { (p.rows, p.cols) };
        if dims.len() != 3 || (dims[1], dims[2]) != want {
            self.type_err(format!("{} is not a {}x{} plain matrix view", self.m.bufs[p.buf.0].name, want.0, want.1));
            return;
        }
        let cover = [1, dims[1], dims[2]];
        self.check_index(p.buf, &[p.batch.clone(), Expr::int(0), Expr::int(0)], &cover, stack, env);
    }

    fn intrinsic(&mut self, i: &Intrinsic, stack: &[LoopCtx]) {
        let env = env_of(stack);
        match i {
            Intrinsic::Brgemm { kind, mb, nb, kb, bs, a, a_batch_dim, b, b_batch_dim, c, .. } => {
                let want = match kind {
                    BrgemmKind::F32 => [ScalarTy::F32; 3],
                    BrgemmKind::U8S8S32 => [ScalarTy::U8, ScalarTy::S8, ScalarTy::S32],
                };
                for ((s, bd, blk), w) in [(a, a_batch_dim, (*mb, *kb)), (b, b_batch_dim, (*nb, *kb)), (c, &None, (*mb, *nb))].into_iter().zip(want) {
                    if !self.check_buf(s.buf) {
                        continue;
                    }
                    let decl = &self.m.bufs[s.buf.0];
                    if ScalarTy::of(decl.dtype) != w {
                        self.type_err(format!("{} operand {} is {}", i.name(), decl.name, decl.dtype));
                    }
                    let r = decl.dims.len();
                    if r < 2 || (decl.dims[r - 2], decl.dims[r - 1]) != blk {
                        self.type_err(format!("{} operand {} dims {:?} do not end in {:?}", i.name(), decl.name, decl.dims, blk));
                        continue;
                    }
                    let mut cover = vec![1; r];
                    cover[r - 2] = blk.0;
                    cover[r - 1] = blk.1;
                    if let Some(d) = bd.filter(|&d| d < r - 2) {
                        cover[d] = *bs;
                    }
                    self.check_index(s.buf, &s.idx, &cover, stack, &env);
                }
                self.check_parallel_write(c.buf, &c.idx.iter().collect::<Vec<_>>(), stack, &env);
            }
            Intrinsic::ReorderPack { src, dst } => {
                self.plain(src, stack, &env);
                self.blocked(dst, stack, &env);
                let mut ix: Vec<&Expr> = dst.start.idx.iter().collect();
                ix.extend([&dst.rb0, &dst.cb0]);
                self.check_parallel_write(dst.start.buf, &ix, stack, &env);
            }
            Intrinsic::ReorderUnpack { src, dst } => {
                self.blocked(src, stack, &env);
                self.plain(dst, stack, &env);
                self.check_parallel_write(dst.buf, &[&dst.batch, &src.rb0, &src.cb0], stack, &env);
            }
        }
    }

    fn stmts(&mut self, stmts: &[Stmt], stack: &mut Vec<LoopCtx>) {
        for s in stmts {
            match s {
                Stmt::ParallelFor { lp, .. } | Stmt::For(lp) => {
                    self.check_expr(&lp.lo, stack, Some(ScalarTy::I64));
                    self.check_expr(&lp.hi, stack, Some(ScalarTy::I64));
                    if stack.iter().any(|l| l.var == lp.var) || self.m.funcs[self.f.0].scalars.contains(&lp.var) {
                        let func = self.fname();
                        self.push(VerifyError::Rebound { func, var: self.m.vars[lp.var.0].name.clone() });
                    }
                    if self.m.vars[lp.var.0].ty != ScalarTy::I64 {
                        self.type_err(format!("loop variable {} is not i64", self.m.vars[lp.var.0].name));
                    }
                    stack.push(LoopCtx { var: lp.var, lo: lp.lo.clone(), hi: lp.hi.clone(), step: lp.step, parallel: matches!(s, Stmt::ParallelFor { .. }) });
                    self.stmts(&lp.body, stack);
                    stack.pop();
                }
                Stmt::Assign { lhs, rhs } => {
                    self.check_expr(rhs, stack, None);
                    let rt = rhs.ty(self.m);
                    match lhs {
                        LValue::Var(v) => {
                            if !self.m.funcs[self.f.0].scalars.contains(v) {
                                let func = self.fname();
                                self.push(VerifyError::UnboundVar { func, var: self.m.vars[v.0].name.clone() });
                            } else if self.m.vars[v.0].ty != rt {
                                self.type_err(format!("{} := {}", self.m.vars[v.0].ty.name(), rt.name()));
                            }
                        }
                        LValue::Store { buf, idx } => {
                            let env = env_of(stack);
                            self.check_index(*buf, idx, &[], stack, &env);
                            if let Some(d) = self.m.bufs.get(buf.0) {
                                if ScalarTy::of(d.dtype) != rt {
                                    self.type_err(format!("store of {} into {} buffer {}", rt.name(), d.dtype, d.name));
                                }
                                if matches!(d.kind, BufKind::Input | BufKind::Literal) {
                                    self.type_err(format!("store into read-only buffer {}", d.name));
                                }
                                self.check_parallel_write(*buf, &idx.iter().collect::<Vec<_>>(), stack, &env);
                            }
                        }
                    }
                }
                Stmt::Intrinsic(i) => self.intrinsic(i, stack),
                Stmt::Call(c) => {
                    if c.0 >= self.m.funcs.len() {
                        let func = self.fname();
                        self.push(VerifyError::Unknown { func, what: format!("function #{}", c.0) });
                    }
                }
                Stmt::Probe(_) => {}
                Stmt::Block(b) => self.stmts(b, stack),
            }
        }
    }
}

/// Checks every reachable function; an empty error list means the module is sound.
pub fn verify_module(m: &Module) -> Result<(), Vec<VerifyError>> {
    let mut errors = Vec::new();
    for f in m.reachable() {
        let mut c = Checker { m, f, errors: Vec::new() };
        c.stmts(&m.funcs[f.0].body, &mut Vec::new());
        errors.extend(c.errors);
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}
