//! Affine forms and interval bounds of index expressions.

use std::collections::BTreeMap;

use super::ir::*;

/// `c + sum(coeff * var)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Affine {
    pub c: i64,
    pub terms: BTreeMap<VarId, i64>,
}

impl Affine {
    fn add(mut self, o: &Affine, sign: i64) -> Affine {
        self.c += sign * o.c;
        for (v, k) in &o.terms {
            *self.terms.entry(*v).or_insert(0) += sign * k;
        }
        self.terms.retain(|_, k| *k != 0);
        self
    }

    fn scale(mut self, s: i64) -> Affine {
        self.c *= s;
        self.terms.values_mut().for_each(|k| *k *= s);
        self.terms.retain(|_, k| *k != 0);
        self
    }

    pub fn to_expr(&self) -> Expr {
        let mut e = Expr::int(0);
        for (v, k) in &self.terms {
            e = iadd(e, imul(Expr::var(*v), Expr::int(*k)));
        }
        iadd(e, Expr::int(self.c))
    }

    /// Splits into the terms over `outer` vars and the rest (with the constant).
    pub fn split(&self, outer: &[VarId]) -> (Affine, Affine) {
        let mut o = Affine::default();
        let mut i = Affine { c: self.c, ..Default::default() };
        for (v, k) in &self.terms {
            if outer.contains(v) {
                o.terms.insert(*v, *k);
            } else {
                i.terms.insert(*v, *k);
            }
        }
        (o, i)
    }
}

/// Affine form of an index expression, if it has one.
pub fn affine(e: &Expr) -> Option<Affine> {
    match e {
        Expr::Const { value, ty: ScalarTy::I64 } => Some(Affine { c: *value as i64, ..Default::default() }),
        Expr::Var(v) => Some(Affine { c: 0, terms: [(*v, 1)].into() }),
        Expr::Binary { op, lhs, rhs } => {
            let (a, b) = (affine(lhs)?, affine(rhs)?);
            match op {
                BinOp::Add => Some(a.add(&b, 1)),
                BinOp::Sub => Some(a.add(&b, -1)),
                BinOp::Mul if a.terms.is_empty() => Some(b.scale(a.c)),
                BinOp::Mul if b.terms.is_empty() => Some(a.scale(b.c)),
                _ => None,
            }
        }
        _ => None,
    }
}

/// Inclusive value ranges of loop variables.
pub type Env = BTreeMap<VarId, (i64, i64)>;

/// Inclusive bounds of an integer expression under `env`.
pub fn interval(e: &Expr, env: &Env) -> Option<(i64, i64)> {
    match e {
        Expr::Const { value, ty } if !ty.is_float() => Some((*value as i64, *value as i64)),
        Expr::Var(v) => env.get(v).copied(),
        Expr::Binary { op, lhs, rhs } => {
            let (a, b) = (interval(lhs, env)?, interval(rhs, env)?);
            match op {
                BinOp::Add => Some((a.0 + b.0, a.1 + b.1)),
                BinOp::Sub => Some((a.0 - b.1, a.1 - b.0)),
                BinOp::Mul => {
                    let c = [a.0 * b.0, a.0 * b.1, a.1 * b.0, a.1 * b.1];
                    Some((*c.iter().min()?, *c.iter().max()?))
                }
                BinOp::Div if b.0 == b.1 && b.0 > 0 => Some((a.0.div_euclid(b.0), a.1.div_euclid(b.0))),
                BinOp::Rem if b.0 == b.1 && b.0 > 0 => {
                    if a.0 >= 0 && a.1 < b.0 {
                        Some(a)
                    } else {
                        Some((0, b.0 - 1))
                    }
                }
                BinOp::Min => Some((a.0.min(b.0), a.1.min(b.1))),
                BinOp::Max => Some((a.0.max(b.0), a.1.max(b.1))),
                _ => None,
            }
        }
        _ => None,
    }
}

fn min_arms<'a>(e: &'a Expr, out: &mut Vec<&'a Expr>) {
    match e {
        Expr::Binary { op: BinOp::Min, lhs, rhs } => {
            min_arms(lhs, out);
            min_arms(rhs, out);
        }
        _ => out.push(e),
    }
}

fn affine_upper(a: &Affine, stack: &[LoopCtx], env: &Env) -> Option<i64> {
    let Some(pos) = stack.iter().rposition(|l| a.terms.get(&l.var).is_some_and(|k| *k > 0)) else {
        return interval(&a.to_expr(), env).map(|r| r.1);
    };
    let l = &stack[pos];
    let k = a.terms[&l.var];
    let mut rest = a.clone();
    rest.terms.remove(&l.var);
    let mut arms = Vec::new();
    min_arms(&l.hi, &mut arms);
    let mut best = interval(&a.to_expr(), env).map(|r| r.1);
    for arm in arms {
        let Some(h) = affine(arm) else { continue };
        let sub = rest.clone().add(&h.scale(k), 1).add(&Affine { c: k, ..Default::default() }, -1);
        if let Some(u) = affine_upper(&sub, &stack[..pos], env) {
            best = Some(best.map_or(u, |b| b.min(u)));
        }
    }
    best
}

/// `e` as `floor(num / d)` with affine `num`.
fn floor_div(e: &Expr) -> Option<(Affine, i64)> {
    if let Some(a) = affine(e) {
        return Some((a, 1));
    }
    match e {
        Expr::Binary { op: BinOp::Div, lhs, rhs } => match (floor_div(lhs)?, affine(rhs)?) {
            ((n, 1), r) if r.terms.is_empty() && r.c > 0 => Some((n, r.c)),
            _ => None,
        },
        Expr::Binary { op: BinOp::Add, lhs, rhs } => match (floor_div(lhs)?, floor_div(rhs)?) {
            ((a, 1), (b, d)) | ((b, d), (a, 1)) => Some((a.scale(d).add(&b, 1), d)),
            _ => None,
        },
        _ => None,
    }
}

/// Upper bound of an integer expression, tighter than `interval` when loop
/// limits are clipped with `min`.
pub fn upper_bound(e: &Expr, stack: &[LoopCtx], env: &Env) -> Option<i64> {
    if let Some((num, d)) = floor_div(e) {
        return Some(affine_upper(&num, stack, env)?.div_euclid(d));
    }
    match e {
        Expr::Binary { op: BinOp::Add, lhs, rhs } => Some(upper_bound(lhs, stack, env)? + upper_bound(rhs, stack, env)?),
        Expr::Binary { op: BinOp::Div, lhs, rhs } => match (interval(lhs, env)?, interval(rhs, env)?) {
            ((lo, _), (d, d2)) if d == d2 && d > 0 && lo >= 0 => Some(upper_bound(lhs, stack, env)?.div_euclid(d)),
            _ => interval(e, env).map(|r| r.1),
        },
        _ => interval(e, env).map(|r| r.1),
    }
}

/// Env for a loop stack; loops with unbounded limits are left out.
pub fn env_of(stack: &[LoopCtx]) -> Env {
    let mut env = Env::new();
    for l in stack {
        if let (Some(lo), Some(hi)) = (interval(&l.lo, &env), interval(&l.hi, &env)) {
            let mut top = (hi.1 - 1).max(lo.0);
            if l.step > 1 && lo.0 == lo.1 {
                top = lo.0 + (top - lo.0) / l.step * l.step;
            }
            env.insert(l.var, (lo.0, top));
        }
    }
    env
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_round_trip() {
        let (a, b) = (VarId(0), VarId(1));
        let e = iadd(imul(iadd(imul(Expr::var(a), Expr::int(4)), Expr::var(b)), Expr::int(32)), Expr::int(5));
        let f = affine(&e).unwrap();
        assert_eq!(f.c, 5);
        assert_eq!(f.terms[&a], 128);
        assert_eq!(f.terms[&b], 32);
        let (o, i) = f.split(&[a]);
        assert_eq!(o.terms.len(), 1);
        assert_eq!(i.c, 5);
        assert_eq!(affine(&f.to_expr()).unwrap(), f);
    }

    #[test]
    fn clipped_bound() {
        let (a, i) = (VarId(0), VarId(1));
        let stack = vec![
            LoopCtx { var: a, lo: Expr::int(0), hi: Expr::int(3), step: 1, parallel: true },
            LoopCtx { var: i, lo: Expr::int(0), hi: imin(Expr::int(16), isub(Expr::int(40), imul(Expr::var(a), Expr::int(16)))), step: 1, parallel: false },
        ];
        let env = env_of(&stack);
        assert_eq!(env[&i], (0, 15));
        let idx = iadd(imul(Expr::var(a), Expr::int(16)), Expr::var(i));
        assert_eq!(interval(&idx, &env), Some((0, 47)));
        assert!(affine(&irem(Expr::var(a), Expr::int(2))).is_none());
    }
}
