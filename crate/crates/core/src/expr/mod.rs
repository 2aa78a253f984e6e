//! Scalar coefficient expressions.
//!
//! Problems are declared with plain-text formulas such as `u - (8/3)*t` or
//! `-2*y1^2 + y2^2`. This module parses them against a declared variable set,
//! prints them back, evaluates them, and differentiates them symbolically so
//! that every derivative the adjoint needs (b_x, b_u, σ_x, σ_u, f_x, f_u and
//! the checkpoint gradients of the terminal cost) is machine-derived.
//!
//! # Grammar
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' integer)?
//! integer := '-'? digits | '(' '-'? digits ')'
//! atom    := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus, so `-x^2` is `-(x^2)`. Exponents are
//! integer literals. The functions are `abs`, `exp` (one argument) and
//! `min`, `max` (two or more arguments).

mod compile;
mod diff;
mod parse;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

pub use compile::Compiled;
pub use parse::parse_expr;

/// Errors raised while parsing, evaluating or differentiating expressions.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("undeclared variable `{name}` at byte {pos}")]
    UndeclaredVariable { name: String, pos: usize },
    #[error("no value bound for variable `{0}`")]
    Unbound(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("cannot differentiate non-smooth subexpression `{0}`")]
    NonDifferentiable(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
}

/// Built-in functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Abs,
    Exp,
    Min,
    Max,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        match name {
            "abs" => Some(Func::Abs),
            "exp" => Some(Func::Exp),
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            _ => None,
        }
    }

    /// Whether the function has a kink somewhere in its domain.
    pub fn is_smooth(self) -> bool {
        matches!(self, Func::Exp)
    }
}

/// Ordered set of variable names an expression may reference.
///
/// Variables are referenced by position; aliases (for example `x` for `x1`
/// in a one-dimensional state) resolve to the same position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VarSet {
    names: Vec<String>,
    aliases: HashMap<String, usize>,
}

impl VarSet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Self {
        VarSet {
            names: names.iter().map(|s| s.as_ref().to_string()).collect(),
            aliases: HashMap::new(),
        }
    }

    /// Adds an alternative spelling for an existing variable.
    pub fn with_alias(mut self, alias: &str, target: &str) -> Self {
        if let Some(i) = self.names.iter().position(|n| n == target) {
            self.aliases.insert(alias.to_string(), i);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .or_else(|| self.aliases.get(name).copied())
    }
}

/// Name → value map used by [`Expr::eval_binding`].
pub type Binding = HashMap<String, f64>;

/// Expression tree. Variables are indices into the [`VarSet`] used to parse it.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn zero() -> Expr {
        Expr::Num(0.0)
    }

    /// Tree-walking evaluation with explicit error reporting.
    pub fn eval(&self, values: &[f64]) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => values[*i],
            Expr::Neg(a) => -a.eval(values)?,
            Expr::Add(a, b) => a.eval(values)? + b.eval(values)?,
            Expr::Sub(a, b) => a.eval(values)? - b.eval(values)?,
            Expr::Mul(a, b) => a.eval(values)? * b.eval(values)?,
            Expr::Div(a, b) => {
                let d = b.eval(values)?;
                if d == 0.0 {
                    return Err(ExprError::DivisionByZero);
                }
                a.eval(values)? / d
            }
            Expr::Pow(a, n) => {
                let base = a.eval(values)?;
                if base == 0.0 && *n < 0 {
                    return Err(ExprError::DivisionByZero);
                }
                base.powi(*n)
            }
            Expr::Call(f, args) => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(a.eval(values)?);
                }
                match f {
                    Func::Abs => vals[0].abs(),
                    Func::Exp => vals[0].exp(),
                    Func::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
                    Func::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            }
        })
    }

    /// Evaluates against a name → value map. Every free variable must be bound.
    pub fn eval_binding(&self, vars: &VarSet, binding: &Binding) -> Result<f64, ExprError> {
        let mut values = vec![f64::NAN; vars.len()];
        for i in self.free_vars() {
            let name = vars.name(i);
            values[i] = *binding
                .get(name)
                .ok_or_else(|| ExprError::Unbound(name.to_string()))?;
        }
        self.eval(&values)
    }

    pub fn free_vars(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<usize>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(i) => {
                out.insert(*i);
            }
            Expr::Neg(a) | Expr::Pow(a, _) => a.collect_vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    pub fn depends_on(&self, var: usize) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(i) => *i == var,
            Expr::Neg(a) | Expr::Pow(a, _) => a.depends_on(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on(var) || b.depends_on(var)
            }
            Expr::Call(_, args) => args.iter().any(|a| a.depends_on(var)),
        }
    }

    /// True when no `abs`, `min` or `max` appears anywhere in the tree.
    pub fn is_smooth(&self) -> bool {
        match self {
            Expr::Num(_) | Expr::Var(_) => true,
            Expr::Neg(a) | Expr::Pow(a, _) => a.is_smooth(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.is_smooth() && b.is_smooth()
            }
            Expr::Call(f, args) => f.is_smooth() && args.iter().all(Expr::is_smooth),
        }
    }

    pub fn is_constant(&self) -> bool {
        self.free_vars().is_empty()
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            _ => None,
        }
    }

    /// Switching functions of the non-smooth nodes: the argument of every
    /// `abs` and the pairwise differences inside every `min`/`max`. The
    /// expression is smooth away from the zero sets of these functions.
    pub fn switching_functions(&self) -> Vec<Expr> {
        let mut out = Vec::new();
        self.collect_switches(&mut out);
        out
    }

    fn collect_switches(&self, out: &mut Vec<Expr>) {
        match self {
            Expr::Num(_) | Expr::Var(_) => {}
            Expr::Neg(a) | Expr::Pow(a, _) => a.collect_switches(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_switches(out);
                b.collect_switches(out);
            }
            Expr::Call(f, args) => {
                for a in args {
                    a.collect_switches(out);
                }
                match f {
                    Func::Abs => out.push(args[0].clone()),
                    Func::Min | Func::Max => {
                        for i in 0..args.len() {
                            for j in i + 1..args.len() {
                                out.push(Expr::Sub(
                                    Box::new(args[i].clone()),
                                    Box::new(args[j].clone()),
                                ));
                            }
                        }
                    }
                    Func::Exp => {}
                }
            }
        }
    }

    /// Replaces every variable `i` by `map(i)`.
    pub fn substitute(&self, map: &dyn Fn(usize) -> Expr) -> Expr {
        match self {
            Expr::Num(v) => Expr::Num(*v),
            Expr::Var(i) => map(*i),
            Expr::Neg(a) => Expr::Neg(Box::new(a.substitute(map))),
            Expr::Add(a, b) => Expr::Add(Box::new(a.substitute(map)), Box::new(b.substitute(map))),
            Expr::Sub(a, b) => Expr::Sub(Box::new(a.substitute(map)), Box::new(b.substitute(map))),
            Expr::Mul(a, b) => Expr::Mul(Box::new(a.substitute(map)), Box::new(b.substitute(map))),
            Expr::Div(a, b) => Expr::Div(Box::new(a.substitute(map)), Box::new(b.substitute(map))),
            Expr::Pow(a, n) => Expr::Pow(Box::new(a.substitute(map)), *n),
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(|a| a.substitute(map)).collect()),
        }
    }

    /// Symbolic derivative with respect to variable `var`, constant-folded.
    pub fn diff(&self, var: usize, vars: &VarSet) -> Result<Expr, ExprError> {
        diff::derivative(self, var, vars)
    }

    /// Derivative with respect to a variable given by name.
    pub fn diff_named(&self, name: &str, vars: &VarSet) -> Result<Expr, ExprError> {
        let var = vars
            .index_of(name)
            .ok_or_else(|| ExprError::UnknownVariable(name.to_string()))?;
        self.diff(var, vars)
    }

    pub fn compile(&self) -> Compiled {
        Compiled::new(self)
    }

    /// Renders the expression with the canonical variable names of `vars`.
    pub fn display<'a>(&'a self, vars: &'a VarSet) -> Display<'a> {
        Display { expr: self, vars }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

/// Display adaptor returned by [`Expr::display`].
pub struct Display<'a> {
    expr: &'a Expr,
    vars: &'a VarSet,
}

impl fmt::Display for Display<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(self.expr, self.vars, f)
    }
}

fn write_child(e: &Expr, min_prec: u8, vars: &VarSet, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if e.precedence() < min_prec {
        f.write_str("(")?;
        write_expr(e, vars, f)?;
        f.write_str(")")
    } else {
        write_expr(e, vars, f)
    }
}

fn write_expr(e: &Expr, vars: &VarSet, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match e {
        Expr::Num(v) => {
            if v.is_finite() {
                write!(f, "{v}")
            } else if v.is_nan() {
                f.write_str("(0/0)")
            } else if *v > 0.0 {
                f.write_str("(1/0)")
            } else {
                f.write_str("(-1/0)")
            }
        }
        Expr::Var(i) => f.write_str(vars.name(*i)),
        Expr::Neg(a) => {
            f.write_str("-")?;
            write_child(a, 3, vars, f)
        }
        Expr::Add(a, b) => {
            write_child(a, 1, vars, f)?;
            f.write_str(" + ")?;
            write_child(b, 2, vars, f)
        }
        Expr::Sub(a, b) => {
            write_child(a, 1, vars, f)?;
            f.write_str(" - ")?;
            write_child(b, 2, vars, f)
        }
        Expr::Mul(a, b) => {
            write_child(a, 2, vars, f)?;
            f.write_str("*")?;
            write_child(b, 3, vars, f)
        }
        Expr::Div(a, b) => {
            write_child(a, 2, vars, f)?;
            f.write_str("/")?;
            write_child(b, 3, vars, f)
        }
        Expr::Pow(a, n) => {
            write_child(a, 5, vars, f)?;
            if *n < 0 {
                write!(f, "^({n})")
            } else {
                write!(f, "^{n}")
            }
        }
        Expr::Call(func, args) => {
            f.write_str(func.name())?;
            f.write_str("(")?;
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write_expr(a, vars, f)?;
            }
            f.write_str(")")
        }
    }
}

#[cfg(test)]
mod tests;
