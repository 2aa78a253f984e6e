use serde::Serialize;

use super::ForwardError;
use crate::expr::{parse_expr, Compiled, VarSet};
use crate::problem::{ControlBox, TimeGrid, ValidatedProblem};

/// Deterministic (open-loop) control, constant on each step `[s_k, s_{k+1})`.
///
/// Controls built with the box-aware constructors are clamped into `U`;
/// perturbation directions (`v − ū`, …) use [`ControlProcess::from_values`]
/// and are not.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlProcess {
    steps: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ControlProcess {
    /// Raw values laid out as `[step][component]`, no clamping.
    pub fn from_values(steps: usize, dim: usize, values: Vec<f64>) -> Result<Self, ForwardError> {
        if values.len() != steps * dim {
            return Err(ForwardError::Misaligned(format!(
                "control has {} values, expected {steps}×{dim}",
                values.len()
            )));
        }
        Ok(ControlProcess { steps, dim, values })
    }

    /// Values clamped into the box.
    pub fn clamped(grid: &TimeGrid, ubox: &ControlBox, values: Vec<f64>) -> Result<Self, ForwardError> {
        let mut c = Self::from_values(grid.steps(), ubox.dim(), values)?;
        c.project(ubox);
        Ok(c)
    }

    pub fn constant(grid: &TimeGrid, ubox: &ControlBox, value: &[f64]) -> Self {
        Self::from_fn(grid, ubox, |_| value.to_vec())
    }

    pub fn zeros(steps: usize, dim: usize) -> Self {
        ControlProcess {
            steps,
            dim,
            values: vec![0.0; steps * dim],
        }
    }

    /// Samples `f` at the left end of every step and clamps into the box.
    pub fn from_fn(grid: &TimeGrid, ubox: &ControlBox, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let dim = ubox.dim();
        let mut values = Vec::with_capacity(grid.steps() * dim);
        for k in 0..grid.steps() {
            let v = f(grid.time(k));
            assert_eq!(v.len(), dim, "control function returned wrong dimension");
            values.extend(v.iter().enumerate().map(|(j, &x)| ubox.clamp(j, x)));
        }
        ControlProcess {
            steps: grid.steps(),
            dim,
            values,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, step: usize) -> &[f64] {
        &self.values[step * self.dim..(step + 1) * self.dim]
    }

    pub fn value_mut(&mut self, step: usize) -> &mut [f64] {
        &mut self.values[step * self.dim..(step + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn in_box(&self, ubox: &ControlBox) -> bool {
        (0..self.steps).all(|k| ubox.contains(self.value(k)))
    }

    pub fn project(&mut self, ubox: &ControlBox) {
        for k in 0..self.steps {
            for j in 0..self.dim {
                let v = &mut self.values[k * self.dim + j];
                *v = ubox.clamp(j, *v);
            }
        }
    }

    /// `self + rho·dir`, unclamped.
    pub fn axpy(&self, rho: f64, dir: &ControlProcess) -> ControlProcess {
        assert_eq!(self.values.len(), dir.values.len());
        ControlProcess {
            steps: self.steps,
            dim: self.dim,
            values: self.values.iter().zip(&dir.values).map(|(a, b)| a + rho * b).collect(),
        }
    }

    /// `self − other`.
    pub fn minus(&self, other: &ControlProcess) -> ControlProcess {
        self.axpy(-1.0, other)
    }

    /// `a·self`.
    pub fn scaled(&self, a: f64) -> ControlProcess {
        ControlProcess {
            steps: self.steps,
            dim: self.dim,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    /// `∫₀ᵀ |self(t)|² dt` on the grid.
    pub fn squared_norm(&self, dt: f64) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * dt
    }
}

/// Markov feedback control `u = κ(t, x)` given by one expression per control
/// component in the variables `t, x1..xm` (alias `x` when `m = 1`). Values
/// are clamped into the box pathwise.
#[derive(Debug, Clone)]
pub struct FeedbackControl {
    texts: Vec<String>,
    compiled: Vec<Compiled>,
    vars: VarSet,
}

impl FeedbackControl {
    pub fn parse(problem: &ValidatedProblem, texts: &[String]) -> Result<Self, ForwardError> {
        let m = problem.state_dim();
        if texts.len() != problem.control_dim() {
            return Err(ForwardError::Misaligned(format!(
                "feedback has {} components, control dimension is {}",
                texts.len(),
                problem.control_dim()
            )));
        }
        let mut names = vec!["t".to_string()];
        names.extend((1..=m).map(|k| format!("x{k}")));
        let mut vars = VarSet::new(&names);
        if m == 1 {
            vars = vars.with_alias("x", "x1");
        }
        let compiled = texts
            .iter()
            .map(|t| parse_expr(t, &vars).map(|e| e.compile()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ForwardError::Feedback(e.to_string()))?;
        Ok(FeedbackControl {
            texts: texts.to_vec(),
            compiled,
            vars,
        })
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    /// Evaluates the clamped control at `(t, x)`; `scratch` has length `1+m`.
    pub fn eval(&self, t: f64, x: &[f64], ubox: &ControlBox, scratch: &mut [f64], out: &mut [f64]) {
        scratch[0] = t;
        scratch[1..].copy_from_slice(x);
        for (j, c) in self.compiled.iter().enumerate() {
            out[j] = ubox.clamp(j, c.eval(scratch));
        }
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }
}
