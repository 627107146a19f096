//! Coarse-grain fusion on the IR: consecutive calls whose functions are a
//! single flagged parallel loop over the same range share that loop.

use serde::Serialize;

use super::ir::*;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MergeReport {
    /// Names of the functions produced by merging.
    pub merged: Vec<String>,
    /// Flagged pairs that could not be merged, with the reason.
    pub downgraded: Vec<String>,
}

fn sole_loop(f: &Function) -> Option<(&Loop, bool)> {
    match f.body.as_slice() {
        [Stmt::ParallelFor { lp, mergeable }] => Some((lp, *mergeable)),
        _ => None,
    }
}

fn merge_pair(m: &mut Module, a: FuncId, b: FuncId) -> FuncId {
    let (fa, fb) = (m.funcs[a.0].clone(), m.funcs[b.0].clone());
    let (la, _) = sole_loop(&fa).unwrap();
    let (lb, flag_b) = sole_loop(&fb).unwrap();
    let (va, vb) = (la.var, lb.var);
    let mut tail = lb.body.clone();
    rewrite_exprs(&mut tail, &mut |e| {
        if *e == Expr::Var(vb) {
            *e = Expr::Var(va);
        }
    });
    let mut body = la.body.clone();
    body.extend(tail);
    let mut scalars = fa.scalars.clone();
    scalars.extend(fb.scalars.iter().copied());
    let mut ops = fa.ops.clone();
    ops.extend(fb.ops.iter().copied());
    let id = m.add_func(Function {
        name: format!("{}+{}", fa.name, fb.name),
        body: vec![Stmt::ParallelFor { lp: Loop { var: va, lo: la.lo.clone(), hi: la.hi.clone(), step: la.step, body }, mergeable: flag_b }],
        scalars,
        ops,
    });
    for decl in &mut m.bufs {
        if decl.owner == Some(a) || decl.owner == Some(b) {
            decl.owner = Some(id);
        }
    }
    id
}

/// Merges flagged, range-identical neighbours among the entry function's calls.
pub fn merge_parallel_loops(m: &Module) -> (Module, MergeReport) {
    let mut out = m.clone();
    let mut report = MergeReport::default();
    let calls: Vec<FuncId> = m.callees(m.entry);
    let mut new_calls: Vec<FuncId> = Vec::new();
    let mut changed = false;
    for c in calls {
        if let Some(&prev) = new_calls.last() {
            let pf = &out.funcs[prev.0];
            if let Some((lp, true)) = sole_loop(pf) {
                let why = match sole_loop(&out.funcs[c.0]) {
                    None => Some("next function is not a single parallel loop"),
                    Some((ln, _)) if (&ln.lo, &ln.hi, ln.step) != (&lp.lo, &lp.hi, lp.step) => Some("parallel ranges differ"),
                    _ => None,
                };
                match why {
                    None => {
                        let id = merge_pair(&mut out, prev, c);
                        report.merged.push(out.funcs[id.0].name.clone());
                        *new_calls.last_mut().unwrap() = id;
                        changed = true;
                        continue;
                    }
                    Some(w) => report.downgraded.push(format!("{} -> {}: {w}", pf.name, out.funcs[c.0].name)),
                }
            }
        }
        new_calls.push(c);
    }
    if changed {
        out.funcs[m.entry.0].body = new_calls.into_iter().map(Stmt::Call).collect();
    }
    (out, report)
}
