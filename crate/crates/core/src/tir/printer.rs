//! Deterministic text form: one statement per line, indentation is nesting.

use std::fmt::Write;

use super::ir::*;

fn dims(d: &[usize]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

pub fn print_expr(m: &Module, e: &Expr) -> String {
    match e {
        Expr::Const { value, ty } => match ty {
            ScalarTy::I64 => format!("{}", *value as i64),
            ScalarTy::F32 => format!("{:?}", *value as f32),
            ScalarTy::F64 => format!("{value:?}:f64"),
            t => format!("{}:{}", *value as i64, t.name()),
        },
        Expr::Var(v) => m.vars[v.0].name.clone(),
        Expr::Load { buf, idx } => print_access(m, *buf, idx),
        Expr::Binary { op, lhs, rhs } => {
            let (a, b) = (print_expr(m, lhs), print_expr(m, rhs));
            match op {
                BinOp::Add => format!("({a} + {b})"),
                BinOp::Sub => format!("({a} - {b})"),
                BinOp::Mul => format!("({a} * {b})"),
                BinOp::Div => format!("({a} / {b})"),
                BinOp::Rem => format!("({a} % {b})"),
                BinOp::Max => format!("max({a}, {b})"),
                BinOp::Min => format!("min({a}, {b})"),
            }
        }
        Expr::Unary { op, arg } => {
            let a = print_expr(m, arg);
            match op {
                UnOp::Exp => format!("exp({a})"),
                UnOp::Round => format!("round({a})"),
                UnOp::Cast(t) => format!("cast<{}>({a})", t.name()),
                UnOp::Clamp(lo, hi) => format!("clamp({a}, {lo:?}, {hi:?})"),
            }
        }
    }
}

fn print_access(m: &Module, buf: BufId, idx: &[Expr]) -> String {
    let parts: Vec<String> = idx.iter().map(|e| print_expr(m, e)).collect();
    format!("{}[{}]", m.bufs[buf.0].name, parts.join(", "))
}

fn print_slice(m: &Module, s: &Slice, batch_dim: Option<usize>) -> String {
    let mut out = print_access(m, s.buf, &s.idx);
    if let Some(d) = batch_dim {
        let _ = write!(out, "@{d}");
    }
    out
}

fn print_plain(m: &Module, p: &PlainMat) -> String {
    format!("{}[{}]{} {}x{}", m.bufs[p.buf.0].name, print_expr(m, &p.batch), if p.transposed { "^T" } else { "" }, p.rows, p.cols)
}

fn print_blocked(m: &Module, b: &BlockedMat) -> String {
    let dim = |d: Option<usize>| d.map_or("-".to_string(), |x| x.to_string());
    format!(
        "{} blocks={}x{}{} from=({}, {}) count={}x{} dims=({}, {})",
        print_slice(m, &b.start, None),
        b.br,
        b.bc,
        if b.row_inner_first { "" } else { "^T" },
        print_expr(m, &b.rb0),
        print_expr(m, &b.cb0),
        b.nrb,
        b.ncb,
        dim(b.rb_dim),
        dim(b.cb_dim)
    )
}

pub fn print_intrinsic(m: &Module, i: &Intrinsic) -> String {
    match i {
        Intrinsic::Brgemm { mb, nb, kb, bs, a, a_batch_dim, b, b_batch_dim, c, accumulate, .. } => format!(
            "{}({}, {}, {}, mb={mb}, nb={nb}, kb={kb}, bs={bs}{})",
            i.name(),
            print_slice(m, a, *a_batch_dim),
            print_slice(m, b, *b_batch_dim),
            print_slice(m, c, None),
            if *accumulate { ", accumulate" } else { "" }
        ),
        Intrinsic::ReorderPack { src, dst } => format!("reorder_pack({} -> {})", print_plain(m, src), print_blocked(m, dst)),
        Intrinsic::ReorderUnpack { src, dst } => format!("reorder_unpack({} -> {})", print_blocked(m, src), print_plain(m, dst)),
    }
}

fn print_loop(m: &Module, out: &mut String, depth: usize, kw: &str, lp: &Loop, suffix: &str) {
    let step = if lp.step != 1 { format!(" step {}", lp.step) } else { String::new() };
    let _ = writeln!(out, "{}{kw} {} in {}..{}{step}{suffix}", "  ".repeat(depth), m.vars[lp.var.0].name, print_expr(m, &lp.lo), print_expr(m, &lp.hi));
    print_stmts(m, out, depth + 1, &lp.body);
}

pub fn print_stmts(m: &Module, out: &mut String, depth: usize, stmts: &[Stmt]) {
    let pad = "  ".repeat(depth);
    for s in stmts {
        match s {
            Stmt::ParallelFor { lp, mergeable } => print_loop(m, out, depth, "parallel for", lp, if *mergeable { " mergeable" } else { "" }),
            Stmt::For(lp) => print_loop(m, out, depth, "for", lp, ""),
            Stmt::Assign { lhs, rhs } => {
                let l = match lhs {
                    LValue::Var(v) => m.vars[v.0].name.clone(),
                    LValue::Store { buf, idx } => print_access(m, *buf, idx),
                };
                let _ = writeln!(out, "{pad}{l} = {}", print_expr(m, rhs));
            }
            Stmt::Intrinsic(i) => {
                let _ = writeln!(out, "{pad}{}", print_intrinsic(m, i));
            }
            Stmt::Call(f) => {
                let _ = writeln!(out, "{pad}call {}", m.funcs[f.0].name);
            }
            Stmt::Probe(a) => {
                let _ = writeln!(out, "{pad}probe {a}");
            }
            Stmt::Block(b) => print_stmts(m, out, depth, b),
        }
    }
}

pub fn print_function(m: &Module, f: FuncId) -> String {
    let func = &m.funcs[f.0];
    let mut out = format!("func {}\n", func.name);
    for b in m.bufs.iter().filter(|b| b.owner == Some(f) && b.kind != BufKind::Elided) {
        let _ = writeln!(out, "  {} {}: {}[{}]", b.kind, b.name, b.dtype, dims(&b.dims));
    }
    for v in &func.scalars {
        let _ = writeln!(out, "  scalar {}: {}", m.vars[v.0].name, m.vars[v.0].ty.name());
    }
    print_stmts(m, &mut out, 1, &func.body);
    out
}

/// Module-level buffers, then every reachable function.
pub fn print_module(m: &Module) -> String {
    let mut out = String::from("buffers\n");
    for b in m.bufs.iter().filter(|b| b.owner.is_none()) {
        let t = b.tensor.map_or(String::new(), |t| format!(" ({t})"));
        let _ = writeln!(out, "  {} {}: {}[{}]{t}", b.kind, b.name, b.dtype, dims(&b.dims));
    }
    for f in m.reachable() {
        out.push_str(&print_function(m, f));
    }
    out
}
