use serde::{Deserialize, Serialize};

use super::MpError;
use crate::adjoint::{hamiltonian_gradient, AdjointWeights};
use crate::forward::{estimate_cost, simulate_state, BrownianBatch, ControlProcess};
use crate::problem::{ControlBox, ValidatedProblem};

/// Step size rule of the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `ρ_k = 2/(k+2)`.
    Diminishing,
    /// Backtracking from `ρ = 1` until the sampled cost decreases enough.
    Armijo,
}

/// Search direction of the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Move towards the best `v`-grid point: `u ← u + ρ(v* − u)`.
    ConditionalGradient,
    /// Move towards the projection of a Barzilai–Borwein gradient step.
    ProjectedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub max_iterations: usize,
    pub step_rule: StepRule,
    pub method: Method,
    /// `v`-grid points per control component.
    pub resolution: usize,
    /// Stop when the first-order gap `max_v Σ_k Δt·E[H_u]·(v_k − u_k)` is
    /// below this value (plus `stat_multiplier` standard errors).
    pub tolerance: f64,
    pub stat_multiplier: f64,
    /// Monte Carlo paths (common random numbers across iterations).
    pub paths: usize,
    /// Finish with a local search over `v`-grid valued controls.
    pub polish: bool,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            max_iterations: 200,
            step_rule: StepRule::Armijo,
            method: Method::ConditionalGradient,
            resolution: 11,
            tolerance: 1e-6,
            stat_multiplier: 0.0,
            paths: 10_000,
            polish: false,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<(), MpError> {
        if self.resolution < 2 {
            return Err(MpError::Spec(format!("resolution must be ≥ 2, got {}", self.resolution)));
        }
        if !(self.tolerance > 0.0) {
            return Err(MpError::Spec(format!("tolerance must be > 0, got {}", self.tolerance)));
        }
        if !(self.stat_multiplier >= 0.0) {
            return Err(MpError::Spec("stat_multiplier must be ≥ 0".into()));
        }
        if self.paths == 0 {
            return Err(MpError::Spec("paths must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-step ascent direction of the Hamiltonian, `E[H_u] = −(1/Δt)∂J/∂u_k`,
/// with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub mean: ControlProcess,
    pub stderr: ControlProcess,
}

/// A sampled objective over open-loop controls.
pub trait Objective {
    fn value(&self, u: &ControlProcess) -> Result<f64, MpError>;
    fn gradient(&self, u: &ControlProcess) -> Result<ObjectiveGradient, MpError>;
}

/// The cost functional on a fixed Brownian batch.
pub struct CostObjective<'a> {
    pub problem: &'a ValidatedProblem,
    pub wb: &'a BrownianBatch,
    pub weights: Option<AdjointWeights>,
}

impl Objective for CostObjective<'_> {
    fn value(&self, u: &ControlProcess) -> Result<f64, MpError> {
        Ok(estimate_cost(self.problem, &simulate_state(self.problem, u, self.wb)?).mean)
    }

    fn gradient(&self, u: &ControlProcess) -> Result<ObjectiveGradient, MpError> {
        let sb = simulate_state(self.problem, u, self.wb)?;
        let g = hamiltonian_gradient(self.problem, &sb, self.wb, self.weights.as_ref())?;
        Ok(ObjectiveGradient {
            mean: g.mean,
            stderr: g.stderr,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub cost: f64,
    pub gap: f64,
    /// Step accepted after this iteration (0 when stopping).
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeResult {
    pub control: ControlProcess,
    pub value: f64,
    pub gap: f64,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
    /// Armijo backtracking found no decrease.
    pub stalled: bool,
    pub polished: bool,
    /// Steps where `E[H_u]` is statistically zero at the result: any
    /// control value there is stationary.
    pub flat_steps: Vec<usize>,
}

/// Best `v`-grid point per step and component for the linear functional
/// `g·(v − u)` (ties → smallest grid index), with the resulting gap and its
/// standard error.
fn best_vertex(grad: &ObjectiveGradient, u: &ControlProcess, ubox: &ControlBox, res: usize, dt: f64) -> (ControlProcess, f64, f64) {
    let axes: Vec<Vec<f64>> = (0..ubox.dim()).map(|j| ubox.axis(j, res)).collect();
    let mut v = u.clone();
    let (mut gap, mut var) = (0.0, 0.0);
    for k in 0..u.steps() {
        for j in 0..u.dim() {
            let g = grad.mean.value(k)[j];
            let cur = u.value(k)[j];
            let mut best = (f64::NEG_INFINITY, cur);
            for &a in &axes[j] {
                let val = g * (a - cur);
                if val > best.0 {
                    best = (val, a);
                }
            }
            v.value_mut(k)[j] = best.1;
            gap += best.0 * dt;
            var += (grad.stderr.value(k)[j] * (best.1 - cur) * dt).powi(2);
        }
    }
    (v, gap, var.sqrt())
}

/// Minimizes an objective over controls in the box by conditional or
/// projected gradient steps.
pub fn minimize(
    objective: &dyn Objective,
    problem: &ValidatedProblem,
    init: &ControlProcess,
    spec: &OptimizerSpec,
) -> Result<OptimizeResult, MpError> {
    spec.validate()?;
    let ubox = problem.control_box();
    let dt = problem.grid().dt();
    if !init.in_box(ubox) {
        return Err(MpError::Spec("initial control is outside the control box".into()));
    }
    let mut u = init.clone();
    let mut cost = objective.value(&u)?;
    let mut trace = Vec::new();
    let (mut converged, mut stalled) = (false, false);
    let mut gap = f64::INFINITY;
    let mut last_grad: Option<ObjectiveGradient> = None;
    let mut prev: Option<(ControlProcess, ControlProcess)> = None;
    let mut iterations = 0;
    for it in 0..spec.max_iterations {
        iterations = it + 1;
        let grad = objective.gradient(&u)?;
        let (vstar, g, g_se) = best_vertex(&grad, &u, ubox, spec.resolution, dt);
        gap = g;
        if gap <= spec.tolerance + spec.stat_multiplier * g_se {
            converged = true;
            trace.push(TraceEntry {
                iteration: it,
                cost,
                gap,
                step: 0.0,
            });
            last_grad = Some(grad);
            break;
        }
        let direction = match spec.method {
            Method::ConditionalGradient => vstar.minus(&u),
            Method::ProjectedGradient => {
                // Gradient of J is −Δt·E[H_u].
                let alpha = match &prev {
                    Some((pu, pg)) => {
                        let s = u.minus(pu);
                        let y = pg.minus(&grad.mean).scaled(dt);
                        let sy: f64 = s.values().iter().zip(y.values()).map(|(a, b)| a * b).sum();
                        let ss: f64 = s.values().iter().map(|a| a * a).sum();
                        if sy > 0.0 {
                            ss / sy
                        } else {
                            initial_alpha(&grad, ubox, dt)
                        }
                    }
                    None => initial_alpha(&grad, ubox, dt),
                };
                let mut target = u.axpy(alpha * dt, &grad.mean);
                target.project(ubox);
                target.minus(&u)
            }
        };
        let slope: f64 = direction
            .values()
            .iter()
            .zip(grad.mean.values())
            .map(|(d, g)| d * g * dt)
            .sum();
        let (rho, new_cost) = match spec.step_rule {
            StepRule::Diminishing => {
                let rho = 2.0 / (it as f64 + 2.0);
                let mut cand = u.axpy(rho, &direction);
                cand.project(ubox);
                (rho, objective.value(&cand)?)
            }
            StepRule::Armijo => {
                let mut rho = 1.0;
                loop {
                    let mut cand = u.axpy(rho, &direction);
                    cand.project(ubox);
                    let c = objective.value(&cand)?;
                    if c <= cost - 1e-4 * rho * slope {
                        break (rho, c);
                    }
                    rho *= 0.5;
                    if rho < 1e-12 {
                        break (0.0, cost);
                    }
                }
            }
        };
        trace.push(TraceEntry {
            iteration: it,
            cost,
            gap,
            step: rho,
        });
        if rho == 0.0 {
            stalled = true;
            last_grad = Some(grad);
            break;
        }
        prev = Some((u.clone(), grad.mean.clone()));
        u = u.axpy(rho, &direction);
        u.project(ubox);
        cost = new_cost;
    }

    let mut polished = false;
    if spec.polish {
        let (pu, pc) = grid_polish(objective, ubox, &u, spec.resolution)?;
        if pc < cost || !u.values().iter().zip(pu.values()).all(|(a, b)| a == b) {
            polished = true;
        }
        u = pu;
        cost = pc;
        last_grad = None;
    }
    let grad = match last_grad {
        Some(g) => g,
        None => objective.gradient(&u)?,
    };
    let (_, final_gap, _) = best_vertex(&grad, &u, ubox, spec.resolution, dt);
    if polished || !converged {
        gap = final_gap;
    }
    let flat_steps = (0..u.steps())
        .filter(|&k| {
            (0..u.dim()).all(|j| {
                let (m, s) = (grad.mean.value(k)[j], grad.stderr.value(k)[j]);
                m.abs() <= 3.0 * s + 1e-9
            })
        })
        .collect();
    Ok(OptimizeResult {
        control: u,
        value: cost,
        gap,
        trace,
        iterations,
        converged,
        stalled,
        polished,
        flat_steps,
    })
}

fn initial_alpha(grad: &ObjectiveGradient, ubox: &ControlBox, dt: f64) -> f64 {
    let gmax = grad.mean.values().iter().fold(0.0f64, |a, g| a.max(g.abs()));
    if gmax == 0.0 {
        1.0
    } else {
        0.5 * ubox.diameter() / (gmax * dt)
    }
}

/// Rounds to the nearest `v`-grid values, then repeatedly moves to the best
/// control among all grid neighbours (every step/component shifted by at
/// most one grid index) until no strict improvement remains. For larger
/// problems the neighbourhood is explored one coordinate at a time.
fn grid_polish(
    objective: &dyn Objective,
    ubox: &ControlBox,
    u: &ControlProcess,
    res: usize,
) -> Result<(ControlProcess, f64), MpError> {
    let axes: Vec<Vec<f64>> = (0..ubox.dim()).map(|j| ubox.axis(j, res)).collect();
    let (steps, dim) = (u.steps(), u.dim());
    let coords = steps * dim;
    let mut idx: Vec<usize> = (0..coords)
        .map(|c| {
            let (k, j) = (c / dim, c % dim);
            let v = u.value(k)[j];
            (0..axes[j].len())
                .min_by(|&a, &b| (axes[j][a] - v).abs().total_cmp(&(axes[j][b] - v).abs()))
                .unwrap_or(0)
        })
        .collect();
    let build = |idx: &[usize]| {
        let vals: Vec<f64> = idx.iter().enumerate().map(|(c, &i)| axes[c % dim][i]).collect();
        ControlProcess::from_values(steps, dim, vals).expect("shape")
    };
    let mut best_u = build(&idx);
    let mut best = objective.value(&best_u)?;
    let joint = coords <= 8;
    loop {
        let mut improved = None;
        let consider = |cand: Vec<usize>, improved: &mut Option<(Vec<usize>, f64)>| -> Result<(), MpError> {
            let c = objective.value(&build(&cand))?;
            let threshold = improved.as_ref().map_or(best, |(_, v)| *v);
            if c < threshold {
                *improved = Some((cand, c));
            }
            Ok(())
        };
        if joint {
            let total = 3usize.pow(coords as u32);
            for code in 0..total {
                let mut cand = idx.clone();
                let mut rest = code;
                let mut valid = true;
                for (c, slot) in cand.iter_mut().enumerate() {
                    let off = (rest % 3) as isize - 1;
                    rest /= 3;
                    let ni = *slot as isize + off;
                    if ni < 0 || ni >= axes[c % dim].len() as isize {
                        valid = false;
                        break;
                    }
                    *slot = ni as usize;
                }
                if valid && cand != idx {
                    consider(cand, &mut improved)?;
                }
            }
        } else {
            for c in 0..coords {
                for i in 0..axes[c % dim].len() {
                    if i != idx[c] {
                        let mut cand = idx.clone();
                        cand[c] = i;
                        consider(cand, &mut improved)?;
                    }
                }
            }
        }
        match improved {
            Some((cand, c)) => {
                idx = cand;
                best = c;
                best_u = build(&idx);
            }
            None => break,
        }
    }
    Ok((best_u, best))
}

/// Optimizes the cost of `problem` on a fixed batch.
pub fn optimize_control_with(
    problem: &ValidatedProblem,
    init: &ControlProcess,
    spec: &OptimizerSpec,
    wb: &BrownianBatch,
) -> Result<OptimizeResult, MpError> {
    let objective = CostObjective {
        problem,
        wb,
        weights: None,
    };
    minimize(&objective, problem, init, spec)
}

/// Optimizes the cost of `problem` on `spec.paths` paths drawn from `seed`.
pub fn optimize_control(
    problem: &ValidatedProblem,
    init: &ControlProcess,
    spec: &OptimizerSpec,
    seed: u64,
) -> Result<OptimizeResult, MpError> {
    let wb = BrownianBatch::sample(problem.grid(), problem.brownian_dim(), spec.paths, seed);
    optimize_control_with(problem, init, spec, &wb)
}
