use std::fmt;

use crate::expr::{Compiled, Expr, VarSet};

/// A cost `Ψ(y₁,…,yₙ)` on the checkpoint states.
///
/// Arguments are flattened: entry `i·m + c` is component `c` of the state at
/// checkpoint `i` (both 0-based).
pub trait TerminalCost: Send + Sync + fmt::Debug {
    /// Number of scalar arguments, `n·m`.
    fn arity(&self) -> usize;

    fn value(&self, y: &[f64]) -> f64;

    /// Whether [`TerminalCost::gradient`] is available.
    fn is_differentiable(&self) -> bool;

    /// Full gradient. Only called when [`TerminalCost::is_differentiable`].
    fn gradient(&self, y: &[f64], out: &mut [f64]);

    /// Whether the gradient block of checkpoint `i` depends only on the
    /// states at checkpoints `0..=i`, so its conditional expectation given
    /// the information at `tᵢ` is the pathwise value.
    fn adapted_gradient(&self, _checkpoint: usize) -> bool {
        false
    }

    /// True when the cost is identically zero.
    fn is_zero(&self) -> bool {
        false
    }

    fn describe(&self) -> String;
}

/// Terminal cost given by an expression in the checkpoint variables.
#[derive(Debug, Clone)]
pub struct SymbolicTerminal {
    expr: Expr,
    text: String,
    value: Compiled,
    grad: Option<Vec<Compiled>>,
    adapted: Vec<bool>,
    arity: usize,
}

impl SymbolicTerminal {
    pub fn new(expr: Expr, vars: &VarSet, state_dim: usize) -> Self {
        let arity = vars.len();
        let n = arity / state_dim.max(1);
        let derivs: Option<Vec<Expr>> = (0..arity).map(|v| expr.diff(v, vars).ok()).collect();
        let adapted = (0..n)
            .map(|i| match &derivs {
                Some(ds) => ds[i * state_dim..(i + 1) * state_dim]
                    .iter()
                    .all(|d| d.free_vars().iter().all(|&v| v < (i + 1) * state_dim)),
                None => false,
            })
            .collect();
        SymbolicTerminal {
            text: expr.display(vars).to_string(),
            value: expr.compile(),
            grad: derivs.map(|ds| ds.iter().map(Expr::compile).collect()),
            expr,
            adapted,
            arity,
        }
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }
}

impl TerminalCost for SymbolicTerminal {
    fn arity(&self) -> usize {
        self.arity
    }

    fn value(&self, y: &[f64]) -> f64 {
        self.value.eval(y)
    }

    fn is_differentiable(&self) -> bool {
        self.grad.is_some()
    }

    fn gradient(&self, y: &[f64], out: &mut [f64]) {
        let grad = self.grad.as_ref().expect("terminal cost is not differentiable");
        for (o, g) in out.iter_mut().zip(grad) {
            *o = g.eval(y);
        }
    }

    fn adapted_gradient(&self, checkpoint: usize) -> bool {
        self.adapted.get(checkpoint).copied().unwrap_or(false)
    }

    fn is_zero(&self) -> bool {
        self.value.is_zero()
    }

    fn describe(&self) -> String {
        self.text.clone()
    }
}
