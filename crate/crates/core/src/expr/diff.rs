use super::{Expr, ExprError, Func, VarSet};

pub(super) fn derivative(e: &Expr, var: usize, vars: &VarSet) -> Result<Expr, ExprError> {
    if !e.depends_on(var) {
        return Ok(Expr::zero());
    }
    Ok(match e {
        Expr::Num(_) => Expr::zero(),
        Expr::Var(i) => Expr::Num(if *i == var { 1.0 } else { 0.0 }),
        Expr::Neg(a) => neg(derivative(a, var, vars)?),
        Expr::Add(a, b) => add(derivative(a, var, vars)?, derivative(b, var, vars)?),
        Expr::Sub(a, b) => sub(derivative(a, var, vars)?, derivative(b, var, vars)?),
        Expr::Mul(a, b) => {
            let da = derivative(a, var, vars)?;
            let db = derivative(b, var, vars)?;
            add(mul(da, fold(b)), mul(fold(a), db))
        }
        Expr::Div(a, b) => {
            let da = derivative(a, var, vars)?;
            let db = derivative(b, var, vars)?;
            let (a, b) = (fold(a), fold(b));
            div(sub(mul(da, b.clone()), mul(a, db)), pow(b, 2))
        }
        Expr::Pow(a, n) => {
            let da = derivative(a, var, vars)?;
            mul(mul(Expr::Num(f64::from(*n)), pow(fold(a), n - 1)), da)
        }
        Expr::Call(Func::Exp, args) => {
            let da = derivative(&args[0], var, vars)?;
            mul(Expr::Call(Func::Exp, vec![fold(&args[0])]), da)
        }
        Expr::Call(..) => {
            return Err(ExprError::NonDifferentiable(e.display(vars).to_string()));
        }
    })
}

/// Bottom-up constant folding using the same rules as the derivative builder.
pub(super) fn fold(e: &Expr) -> Expr {
    match e {
        Expr::Num(v) => Expr::Num(*v),
        Expr::Var(i) => Expr::Var(*i),
        Expr::Neg(a) => neg(fold(a)),
        Expr::Add(a, b) => add(fold(a), fold(b)),
        Expr::Sub(a, b) => sub(fold(a), fold(b)),
        Expr::Mul(a, b) => mul(fold(a), fold(b)),
        Expr::Div(a, b) => div(fold(a), fold(b)),
        Expr::Pow(a, n) => pow(fold(a), *n),
        Expr::Call(f, args) => {
            let args: Vec<Expr> = args.iter().map(fold).collect();
            if args.iter().all(|a| a.as_number().is_some()) {
                if let Ok(v) = Expr::Call(*f, args.clone()).eval(&[]) {
                    return Expr::Num(v);
                }
            }
            Expr::Call(*f, args)
        }
    }
}

fn is(e: &Expr, v: f64) -> bool {
    e.as_number() == Some(v)
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a.as_number(), b.as_number()) {
        (Some(x), Some(y)) => Expr::Num(x + y),
        (Some(x), None) if x == 0.0 => b,
        (None, Some(y)) if y == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a.as_number(), b.as_number()) {
        (Some(x), Some(y)) => Expr::Num(x - y),
        (Some(x), None) if x == 0.0 => neg(b),
        (None, Some(y)) if y == 0.0 => a,
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    if is(&a, 0.0) || is(&b, 0.0) {
        return Expr::zero();
    }
    if is(&a, 1.0) {
        return b;
    }
    if is(&b, 1.0) {
        return a;
    }
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x * y),
        // keep numeric coefficients on the left and merged
        (Expr::Num(x), Expr::Mul(l, r)) | (Expr::Mul(l, r), Expr::Num(x))
            if l.as_number().is_some() =>
        {
            mul(Expr::Num(x * l.as_number().unwrap_or(1.0)), *r)
        }
        (a, Expr::Num(y)) => mul(Expr::Num(y), a),
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a.as_number(), b.as_number()) {
        (Some(x), _) if x == 0.0 => Expr::zero(),
        (_, Some(y)) if y == 1.0 => a,
        (Some(x), Some(y)) if y != 0.0 => Expr::Num(x / y),
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, n: i32) -> Expr {
    match n {
        0 => Expr::Num(1.0),
        1 => a,
        _ => match a.as_number() {
            Some(x) if x != 0.0 || n > 0 => Expr::Num(x.powi(n)),
            _ => Expr::Pow(Box::new(a), n),
        },
    }
}
