//! Tensor shrinking: a temporary only touched inside some loop nest needs
//! storage for one iteration of the loops enclosing all its accesses.

use std::collections::BTreeMap;

use serde::Serialize;

use super::affine::{affine, env_of, interval, Affine, Env};
use super::ir::*;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShrinkRecord {
    pub buf: String,
    pub func: String,
    pub before: Vec<usize>,
    pub after: Vec<usize>,
    pub kind: BufKind,
    /// Replaced by a scalar variable.
    pub scalar: bool,
}

struct Access {
    loops: Vec<VarId>,
    parallel: Vec<VarId>,
    env: Env,
    idx: Vec<Expr>,
    cover: Vec<usize>,
    intrinsic: bool,
}

fn slice_cover(rank: usize, last2: (usize, usize), extra: &[(Option<usize>, usize)]) -> Vec<usize> {
    let mut c = vec![1; rank];
    if rank >= 2 {
        c[rank - 2] = last2.0;
        c[rank - 1] = last2.1;
    }
    for &(d, n) in extra {
        if let Some(d) = d.filter(|&d| d + 2 < rank.max(2)) {
            c[d] = n;
        }
    }
    c
}

/// Accesses of `b` in `body`; `None` when some access cannot be shrunk.
fn collect(m: &Module, body: &[Stmt], b: BufId) -> Option<Vec<Access>> {
    let mut out = Vec::new();
    let mut ok = true;
    let dims = m.bufs[b.0].dims.clone();
    let rank = dims.len();
    walk(body, &mut |s, stack| {
        let mk = |idx: &Vec<Expr>, cover: Vec<usize>, intrinsic: bool| Access {
            loops: stack.iter().map(|l| l.var).collect(),
            parallel: stack.iter().filter(|l| l.parallel).map(|l| l.var).collect(),
            env: env_of(stack),
            idx: idx.clone(),
            cover,
            intrinsic,
        };
        let loads = |e: &Expr, out: &mut Vec<Access>| {
            e.visit(&mut |x| {
                if let Expr::Load { buf, idx } = x {
                    if *buf == b {
                        out.push(mk(idx, vec![1; rank], false));
                    }
                }
            })
        };
        match s {
            Stmt::Assign { lhs, rhs } => {
                loads(rhs, &mut out);
                if let LValue::Store { buf, idx } = lhs {
                    idx.iter().for_each(|e| loads(e, &mut out));
                    if *buf == b {
                        out.push(mk(idx, vec![1; rank], false));
                    }
                }
            }
            Stmt::ParallelFor { lp, .. } | Stmt::For(lp) => {
                loads(&lp.lo, &mut out);
                loads(&lp.hi, &mut out);
            }
            Stmt::Intrinsic(i) => match i {
                Intrinsic::Brgemm { mb, nb, kb, bs, a, a_batch_dim, b: bb, b_batch_dim, c, .. } => {
                    for (sl, last2, bd) in [(a, (*mb, *kb), *a_batch_dim), (bb, (*nb, *kb), *b_batch_dim), (c, (*mb, *nb), None)] {
                        if sl.buf == b {
                            out.push(mk(&sl.idx, slice_cover(rank, last2, &[(bd, *bs)]), true));
                        }
                    }
                }
                Intrinsic::ReorderPack { src, dst: bm } | Intrinsic::ReorderUnpack { src: bm, dst: src } => {
                    if src.buf == b {
                        ok = false;
                    }
                    if bm.start.buf == b {
                        let last2 = if rank >= 2 { (dims[rank - 2], dims[rank - 1]) } else { (1, 1) };
                        out.push(mk(&bm.start.idx, slice_cover(rank, last2, &[(bm.rb_dim, bm.nrb), (bm.cb_dim, bm.ncb)]), true));
                    }
                }
            },
            _ => {}
        }
    });
    if ok && !out.is_empty() {
        Some(out)
    } else {
        None
    }
}

#[derive(Clone, Debug)]
enum DimPlan {
    Keep,
    Rebase(usize),
}

fn plan_dim(accs: &[Access], d: usize, common: &[VarId], extent: usize) -> DimPlan {
    let forms: Option<Vec<Affine>> = accs.iter().map(|a| affine(&a.idx[d])).collect();
    let Some(forms) = forms else { return DimPlan::Keep };
    let split: Vec<(Affine, Affine)> = forms.iter().map(|f| f.split(common)).collect();
    if split.iter().any(|(o, _)| *o != split[0].0) {
        return DimPlan::Keep;
    }
    let mut ext = 0i64;
    for ((_, inner), a) in split.iter().zip(accs) {
        let Some((lo, hi)) = interval(&inner.to_expr(), &a.env) else { return DimPlan::Keep };
        if lo < 0 {
            return DimPlan::Keep;
        }
        ext = ext.max(hi + a.cover[d] as i64);
    }
    // distinct outer iterations must own disjoint ranges
    if split[0].0.terms.values().any(|k| k.abs() < ext) || ext > extent as i64 {
        return DimPlan::Keep;
    }
    DimPlan::Rebase(ext as usize)
}

fn common_prefix(accs: &[Access]) -> Vec<VarId> {
    let mut p = accs[0].loops.clone();
    for a in &accs[1..] {
        let n = p.iter().zip(&a.loops).take_while(|(x, y)| x == y).count();
        p.truncate(n);
    }
    p
}

struct Rewrite {
    buf: BufId,
    common: Vec<VarId>,
    plans: Vec<DimPlan>,
    /// Old dim -> new dim after dropping extent-1 dims.
    remap: Vec<Option<usize>>,
    scalar: Option<VarId>,
}

impl Rewrite {
    fn idx(&self, idx: &[Expr]) -> Vec<Expr> {
        let mut out = Vec::new();
        for (d, e) in idx.iter().enumerate() {
            let e = match self.plans[d] {
                DimPlan::Keep => e.clone(),
                DimPlan::Rebase(_) => affine(e).expect("affine").split(&self.common).1.to_expr(),
            };
            if self.remap[d].is_some() {
                out.push(e);
            }
        }
        out
    }

    fn dim(&self, d: Option<usize>) -> Option<usize> {
        d.and_then(|d| self.remap.get(d).copied().flatten())
    }

    fn expr(&self, e: &mut Expr) {
        e.rewrite(&mut |x| {
            if let Expr::Load { buf, idx } = x {
                if *buf == self.buf {
                    *x = match self.scalar {
                        Some(v) => Expr::Var(v),
                        None => Expr::Load { buf: *buf, idx: self.idx(idx) },
                    };
                }
            }
        });
    }

    fn apply(&self, body: &mut [Stmt]) {
        walk_mut(body, &mut |s| match s {
            Stmt::Assign { lhs, rhs } => {
                self.expr(rhs);
                if let LValue::Store { buf, idx } = lhs {
                    idx.iter_mut().for_each(|e| self.expr(e));
                    if *buf == self.buf {
                        *lhs = match self.scalar {
                            Some(v) => LValue::Var(v),
                            None => LValue::Store { buf: *buf, idx: self.idx(idx) },
                        };
                    }
                }
            }
            Stmt::ParallelFor { lp, .. } | Stmt::For(lp) => {
                self.expr(&mut lp.lo);
                self.expr(&mut lp.hi);
            }
            Stmt::Intrinsic(i) => match i {
                Intrinsic::Brgemm { a, a_batch_dim, b, b_batch_dim, c, .. } => {
                    if a.buf == self.buf {
                        a.idx = self.idx(&a.idx);
                        *a_batch_dim = self.dim(*a_batch_dim);
                    }
                    if b.buf == self.buf {
                        b.idx = self.idx(&b.idx);
                        *b_batch_dim = self.dim(*b_batch_dim);
                    }
                    if c.buf == self.buf {
                        c.idx = self.idx(&c.idx);
                    }
                }
                Intrinsic::ReorderPack { dst: bm, .. } | Intrinsic::ReorderUnpack { src: bm, .. } => {
                    if bm.start.buf == self.buf {
                        bm.start.idx = self.idx(&bm.start.idx);
                        bm.rb_dim = self.dim(bm.rb_dim);
                        bm.cb_dim = self.dim(bm.cb_dim);
                    }
                }
            },
            _ => {}
        });
    }
}

fn shrink_buffer(m: &mut Module, f: FuncId, b: BufId) -> Option<ShrinkRecord> {
    let accs = collect(m, &m.funcs[f.0].body, b)?;
    let common = common_prefix(&accs);
    let before = m.bufs[b.0].dims.clone();
    let rank = before.len();
    let intrinsic = accs.iter().any(|a| a.intrinsic);
    let plans: Vec<DimPlan> = (0..rank).map(|d| plan_dim(&accs, d, &common, before[d])).collect();
    let mut dims: Vec<usize> = plans.iter().zip(&before).map(|(p, &e)| if let DimPlan::Rebase(n) = p { *n } else { e }).collect();
    let mut remap = Vec::with_capacity(rank);
    let mut next = 0;
    for (d, &e) in dims.iter().enumerate() {
        let protected = intrinsic && d + 2 >= rank;
        if e == 1 && !protected && matches!(plans[d], DimPlan::Rebase(_)) {
            remap.push(None);
        } else {
            remap.push(Some(next));
            next += 1;
        }
    }
    dims = dims.iter().zip(&remap).filter(|(_, r)| r.is_some()).map(|(&e, _)| e).collect();
    let in_parallel = accs.iter().all(|a| a.parallel.iter().any(|p| common.contains(p)));
    let scalar = if dims.is_empty() && !intrinsic {
        let name = m.bufs[b.0].name.clone();
        let v = m.new_var(&name, ScalarTy::of(m.bufs[b.0].dtype));
        m.funcs[f.0].scalars.push(v);
        Some(v)
    } else {
        None
    };
    let rw = Rewrite { buf: b, common, plans, remap, scalar };
    let mut body = std::mem::take(&mut m.funcs[f.0].body);
    rw.apply(&mut body);
    m.funcs[f.0].body = body;
    let decl = &mut m.bufs[b.0];
    decl.owner = Some(f);
    decl.dims = dims.clone();
    decl.kind = if scalar.is_some() {
        BufKind::Elided
    } else if in_parallel {
        BufKind::Local
    } else {
        BufKind::Temp
    };
    Some(ShrinkRecord { buf: decl.name.clone(), func: m.funcs[f.0].name.clone(), before, after: dims, kind: decl.kind, scalar: scalar.is_some() })
}

/// Shrinks every temporary accessed by exactly one function.
pub fn shrink_temporaries(m: &Module) -> (Module, Vec<ShrinkRecord>) {
    let mut out = m.clone();
    let mut records = Vec::new();
    let mut users: BTreeMap<BufId, Vec<FuncId>> = BTreeMap::new();
    for f in m.reachable() {
        if f == m.entry || Some(f) == m.fold {
            continue;
        }
        for b in buffer_accesses(&m.funcs[f.0].body).keys() {
            users.entry(*b).or_default().push(f);
        }
    }
    for (b, fs) in users {
        let decl = &m.bufs[b.0];
        if decl.kind != BufKind::Temp || fs.len() != 1 || decl.owner.is_some_and(|o| o != fs[0]) {
            continue;
        }
        if let Some(r) = shrink_buffer(&mut out, fs[0], b) {
            records.push(r);
        }
    }
    (out, records)
}
