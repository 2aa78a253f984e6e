use super::{Expr, Func};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Num(f64),
    Var(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow(i32),
    Abs,
    Exp,
    Min(usize),
    Max(usize),
}

const INLINE_STACK: usize = 64;

/// Expression flattened into postfix bytecode for fast repeated evaluation.
///
/// Unlike [`Expr::eval`], evaluation never fails: division by zero follows
/// IEEE semantics. Callers that need to detect it check the result for
/// finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct Compiled {
    ops: Vec<Op>,
    depth: usize,
    constant: Option<f64>,
}

impl Compiled {
    pub fn new(e: &Expr) -> Compiled {
        let mut ops = Vec::new();
        emit(e, &mut ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Num(_) | Op::Var(_) => depth += 1,
                Op::Neg | Op::Pow(_) | Op::Abs | Op::Exp => {}
                Op::Add | Op::Sub | Op::Mul | Op::Div => depth -= 1,
                Op::Min(n) | Op::Max(n) => depth -= n - 1,
            }
            max_depth = max_depth.max(depth);
        }
        let constant = match ops.as_slice() {
            [Op::Num(v)] => Some(*v),
            _ => None,
        };
        Compiled {
            ops,
            depth: max_depth,
            constant,
        }
    }

    /// The value when the expression is a bare literal.
    pub fn constant(&self) -> Option<f64> {
        self.constant
    }

    pub fn is_zero(&self) -> bool {
        self.constant == Some(0.0)
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        if let Some(v) = self.constant {
            return v;
        }
        if self.depth <= INLINE_STACK {
            let mut stack = [0.0f64; INLINE_STACK];
            run(&self.ops, values, &mut stack)
        } else {
            let mut stack = vec![0.0f64; self.depth];
            run(&self.ops, values, &mut stack)
        }
    }
}

fn emit(e: &Expr, ops: &mut Vec<Op>) {
    match e {
        Expr::Num(v) => ops.push(Op::Num(*v)),
        Expr::Var(i) => ops.push(Op::Var(*i)),
        Expr::Neg(a) => {
            emit(a, ops);
            ops.push(Op::Neg);
        }
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            emit(a, ops);
            emit(b, ops);
            ops.push(match e {
                Expr::Add(..) => Op::Add,
                Expr::Sub(..) => Op::Sub,
                Expr::Mul(..) => Op::Mul,
                _ => Op::Div,
            });
        }
        Expr::Pow(a, n) => {
            emit(a, ops);
            ops.push(Op::Pow(*n));
        }
        Expr::Call(f, args) => {
            for a in args {
                emit(a, ops);
            }
            ops.push(match f {
                Func::Abs => Op::Abs,
                Func::Exp => Op::Exp,
                Func::Min => Op::Min(args.len()),
                Func::Max => Op::Max(args.len()),
            });
        }
    }
}

fn run(ops: &[Op], values: &[f64], stack: &mut [f64]) -> f64 {
    let mut top = 0usize;
    for op in ops {
        match *op {
            Op::Num(v) => {
                stack[top] = v;
                top += 1;
            }
            Op::Var(i) => {
                stack[top] = values[i];
                top += 1;
            }
            Op::Neg => stack[top - 1] = -stack[top - 1],
            Op::Abs => stack[top - 1] = stack[top - 1].abs(),
            Op::Exp => stack[top - 1] = stack[top - 1].exp(),
            Op::Pow(n) => stack[top - 1] = stack[top - 1].powi(n),
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                top -= 1;
                let (a, b) = (stack[top - 1], stack[top]);
                stack[top - 1] = match op {
                    Op::Add => a + b,
                    Op::Sub => a - b,
                    Op::Mul => a * b,
                    _ => a / b,
                };
            }
            Op::Min(n) | Op::Max(n) => {
                let start = top - n;
                let args = &stack[start..top];
                let v = if matches!(op, Op::Min(_)) {
                    args.iter().copied().fold(f64::INFINITY, f64::min)
                } else {
                    args.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                };
                stack[start] = v;
                top = start + 1;
            }
        }
    }
    stack[0]
}
