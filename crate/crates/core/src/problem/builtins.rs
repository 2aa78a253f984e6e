//! Registry of built-in problems with their known solutions.

use nalgebra::{DMatrix, DVector};

use super::{Constraint, ConstraintSpec, ControlBox, ProblemError, ProblemSpec, TimeGrid};

const DEFAULT_STEPS: usize = 200;

/// Coefficients of the terminal cost of `linear_terminal`.
pub const LINEAR_TERMINAL_WEIGHTS: [f64; 3] = [1.5, -2.5, 2.0];
const LINEAR_TERMINAL_TIMES: [f64; 3] = [0.25, 0.5, 1.0];

/// Closed-form optimal pair and adjoint of a built-in (scalar problems).
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticSolution {
    /// `dX = u dW`, `Ψ = −2y₁² + y₂²`: `ū = 1` before `1/2` and `0` after,
    /// `(p, q) = (2 + 2W, 2)` then `(−2 − 2W(1/2), 0)`.
    Example1,
    /// Production planning in the shifted state: `ū = (8/3)t` then `2`;
    /// `p = −(2β⁰+β¹+β²)` then `−(β⁰+β²)`, `q = 0`, with signed multipliers.
    Example2,
    /// Constant coefficients, `Ψ = Σ aᵢyᵢ`: `p(t) = −Σ_{tⱼ>t} aⱼ`, `q = 0`.
    /// The optimal control is bang-bang, `−sign(Σ_{tⱼ>t} aⱼ)` per interval.
    LinearTerminal { weights: Vec<f64> },
}

impl AnalyticSolution {
    /// Optimal (deterministic) control value on the step starting at `t`.
    pub fn control(&self, grid: &TimeGrid, t: f64) -> f64 {
        match self {
            AnalyticSolution::Example1 => {
                if t < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            AnalyticSolution::Example2 => {
                if t < 0.5 {
                    8.0 / 3.0 * t
                } else {
                    2.0
                }
            }
            AnalyticSolution::LinearTerminal { weights } => {
                let ahead: f64 = grid
                    .checkpoint_times()
                    .iter()
                    .zip(weights)
                    .filter(|(tj, _)| **tj > t)
                    .map(|(_, a)| a)
                    .sum();
                if ahead > 0.0 {
                    -1.0
                } else if ahead < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Optimal state at `node` given the cumulative Brownian path `w` of one
    /// path (when a closed form is stored).
    pub fn state(&self, grid: &TimeGrid, node: usize, w: &[f64]) -> Option<f64> {
        match self {
            AnalyticSolution::Example1 => {
                let half = grid.checkpoints()[0];
                Some(1.0 + w[node.min(half)])
            }
            _ => None,
        }
    }

    /// Adjoint `p` at `node` as `(left, right)` limits; they differ only at
    /// checkpoints. `beta` holds signed multipliers `(β⁰, β¹, …)` and is used
    /// by `Example2` (default: `β⁰ = 1`, others 0).
    pub fn adjoint_p(&self, grid: &TimeGrid, node: usize, w: &[f64], beta: Option<&[f64]>) -> (f64, f64) {
        let cps = grid.checkpoints();
        match self {
            AnalyticSolution::Example1 => {
                let half = cps[0];
                let before = 2.0 + 2.0 * w[node.min(half)];
                let after = -2.0 - 2.0 * w[half.min(node)];
                if node < half {
                    (before, before)
                } else if node == half {
                    (before, after)
                } else {
                    (after, after)
                }
            }
            AnalyticSolution::Example2 => {
                let b = beta.unwrap_or(&[1.0, 0.0, 0.0]);
                let before = -(2.0 * b[0] + b[1] + b[2]);
                let after = -(b[0] + b[2]);
                let half = cps[0];
                if node < half {
                    (before, before)
                } else if node == half {
                    (before, after)
                } else {
                    (after, after)
                }
            }
            AnalyticSolution::LinearTerminal { weights } => {
                let sum_from = |strict: bool| -> f64 {
                    -cps.iter()
                        .zip(weights)
                        .filter(|(c, _)| if strict { **c > node } else { **c >= node })
                        .map(|(_, a)| a)
                        .sum::<f64>()
                };
                (sum_from(false), sum_from(true))
            }
        }
    }

    /// Adjoint `q` on the step starting at node `step`.
    pub fn adjoint_q(&self, grid: &TimeGrid, step: usize) -> f64 {
        match self {
            AnalyticSolution::Example1 if step < grid.checkpoints()[0] => 2.0,
            _ => 0.0,
        }
    }
}

/// A built-in problem: spec, optional constraints, optional closed form.
#[derive(Debug, Clone)]
pub struct Builtin {
    pub spec: ProblemSpec,
    pub constraints: Option<ConstraintSpec>,
    pub analytic: Option<AnalyticSolution>,
}

impl Builtin {
    /// Re-grids the problem keeping horizon and checkpoint times.
    pub fn with_steps(mut self, steps: usize) -> Result<Self, ProblemError> {
        self.spec.grid = self.spec.grid.with_steps(steps)?;
        Ok(self)
    }
}

pub fn builtin_names() -> &'static [&'static str] {
    &["example1", "example2_transformed", "linear_terminal", "lq_smooth"]
}

fn scalar_spec(
    name: &str,
    x0: f64,
    drift: &str,
    diffusion: &str,
    running: &str,
    terminal: &str,
    checkpoints: &[f64],
    bounds: (f64, f64),
) -> ProblemSpec {
    ProblemSpec {
        name: name.to_string(),
        state_dim: 1,
        brownian_dim: 1,
        control_dim: 1,
        x0: vec![x0],
        drift: vec![drift.to_string()],
        diffusion: vec![vec![diffusion.to_string()]],
        running_cost: running.to_string(),
        terminal_cost: terminal.to_string(),
        grid: TimeGrid::new(1.0, DEFAULT_STEPS, checkpoints).expect("built-in grid"),
        control_box: ControlBox::uniform(1, bounds.0, bounds.1).expect("built-in box"),
    }
}

/// Looks up a built-in problem by name (grid of 200 steps on `[0, 1]`).
pub fn builtin_problem(name: &str) -> Result<Builtin, ProblemError> {
    Ok(match name {
        "example1" => Builtin {
            spec: scalar_spec("example1", 1.0, "0", "u", "0", "-2*y1^2 + y2^2", &[0.5, 1.0], (0.0, 1.0)),
            constraints: None,
            analytic: Some(AnalyticSolution::Example1),
        },
        "example2_transformed" => Builtin {
            spec: scalar_spec(
                "example2_transformed",
                0.0,
                "u - (8/3)*t",
                "-t",
                "0",
                "y1 + y2",
                &[0.5, 1.0],
                (0.0, 2.0),
            ),
            constraints: Some(ConstraintSpec::new(vec![
                Constraint {
                    function: "y1".into(),
                    lower: 0.0,
                    upper: f64::INFINITY,
                },
                Constraint {
                    function: "y2".into(),
                    lower: 0.0,
                    upper: f64::INFINITY,
                },
            ])),
            analytic: Some(AnalyticSolution::Example2),
        },
        "linear_terminal" => {
            let terms: Vec<String> = LINEAR_TERMINAL_WEIGHTS
                .iter()
                .enumerate()
                .map(|(i, a)| format!("({a})*y{}", i + 1))
                .collect();
            Builtin {
                spec: scalar_spec(
                    "linear_terminal",
                    0.0,
                    "0.3 + u",
                    "0.5 + 0.2*u",
                    "0",
                    &terms.join(" + "),
                    &LINEAR_TERMINAL_TIMES,
                    (-1.0, 1.0),
                ),
                constraints: None,
                analytic: Some(AnalyticSolution::LinearTerminal {
                    weights: LINEAR_TERMINAL_WEIGHTS.to_vec(),
                }),
            }
        }
        "lq_smooth" => Builtin {
            spec: scalar_spec(
                "lq_smooth",
                0.0,
                "-0.5*x + u",
                "0.2 + 0.1*x",
                "0.5*u^2 + 0.25*x^2",
                "0.5*(y1 - 1)^2 + (y2 - 0.5)^2",
                &[0.5, 1.0],
                (-2.0, 2.0),
            ),
            constraints: None,
            analytic: None,
        },
        other => return Err(ProblemError::UnknownBuiltin(other.to_string())),
    })
}

/// Exact optimum of the Euler-discretized `lq_smooth` problem over
/// deterministic controls.
#[derive(Debug, Clone)]
pub struct LqReference {
    pub control: Vec<f64>,
    pub value: f64,
    /// True when no box constraint is active at the optimum.
    pub interior: bool,
}

/// Discrete cost of `lq_smooth` for an open-loop control, computed from the
/// exact first and second moment recursions of the Euler scheme.
pub fn lq_smooth_moment_cost(grid: &TimeGrid, u: &[f64]) -> f64 {
    let dt = grid.dt();
    let a = 1.0 - 0.5 * dt;
    let (mut mean, mut second) = (0.0f64, 0.0f64);
    let mut cost = 0.0;
    let half = grid.checkpoints()[0];
    let mut at_half = (0.0, 0.0);
    for (k, &uk) in u.iter().enumerate() {
        if k == half {
            at_half = (mean, second);
        }
        cost += dt * (0.5 * uk * uk + 0.25 * second);
        let next_second = a * a * second
            + 2.0 * a * uk * dt * mean
            + uk * uk * dt * dt
            + (0.04 + 0.04 * mean + 0.01 * second) * dt;
        mean = a * mean + uk * dt;
        second = next_second;
    }
    if half == u.len() {
        at_half = (mean, second);
    }
    cost + 0.5 * (at_half.1 - 2.0 * at_half.0 + 1.0) + (second - mean + 0.25)
}

/// Minimizes the exact quadratic [`lq_smooth_moment_cost`] over the box
/// `[−2, 2]^N` with an active-set Newton iteration.
pub fn lq_smooth_reference(grid: &TimeGrid) -> LqReference {
    let n = grid.steps();
    let zero = vec![0.0; n];
    let j0 = lq_smooth_moment_cost(grid, &zero);
    let unit = |i: usize, s: f64| {
        let mut v = zero.clone();
        v[i] = s;
        v
    };
    let plus: Vec<f64> = (0..n).map(|i| lq_smooth_moment_cost(grid, &unit(i, 1.0))).collect();
    let minus: Vec<f64> = (0..n).map(|i| lq_smooth_moment_cost(grid, &unit(i, -1.0))).collect();
    // J(u) = j0 + gᵀu + ½uᵀHu; recover g and H by polarization.
    let mut h = DMatrix::<f64>::zeros(n, n);
    let g = DVector::from_iterator(n, (0..n).map(|i| 0.5 * (plus[i] - minus[i])));
    for i in 0..n {
        h[(i, i)] = plus[i] + minus[i] - 2.0 * j0;
        for j in 0..i {
            let mut v = zero.clone();
            v[i] = 1.0;
            v[j] = 1.0;
            let hij = lq_smooth_moment_cost(grid, &v) - plus[i] - plus[j] + j0;
            h[(i, j)] = hij;
            h[(j, i)] = hij;
        }
    }
    let (lo, hi) = (-2.0, 2.0);
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    let mut u = vec![0.0; n];
    for _ in 0..=n {
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
        let mut rhs = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
        for (r, &i) in free.iter().enumerate() {
            for j in 0..n {
                if let Some(v) = fixed[j] {
                    rhs[r] -= h[(i, j)] * v;
                }
            }
        }
        let sub = DMatrix::from_fn(free.len(), free.len(), |r, c| h[(free[r], free[c])]);
        let sol = sub
            .cholesky()
            .map(|c| c.solve(&rhs))
            .expect("lq_smooth Hessian is positive definite");
        for (r, &i) in free.iter().enumerate() {
            u[i] = sol[r];
        }
        for i in 0..n {
            if let Some(v) = fixed[i] {
                u[i] = v;
            }
        }
        let mut changed = false;
        for &i in &free {
            if u[i] < lo || u[i] > hi {
                fixed[i] = Some(u[i].clamp(lo, hi));
                changed = true;
            }
        }
        // Release bounds whose gradient points back into the box.
        let grad = &g + &h * DVector::from_column_slice(&u);
        for i in 0..n {
            if let Some(v) = fixed[i] {
                if (v == lo && grad[i] < 0.0) || (v == hi && grad[i] > 0.0) {
                    fixed[i] = None;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let value = lq_smooth_moment_cost(grid, &u);
    LqReference {
        interior: fixed.iter().all(Option::is_none),
        control: u,
        value,
    }
}
