//! Exhaustive search over grid-valued open-loop controls on the binomial
//! tree model, used as ground truth for the optimizer on tiny problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MpError;
use crate::adjoint::hamiltonian_gradient;
use crate::forward::{simulate_state, BrownianBatch, ControlProcess};
use crate::problem::{ControlBox, ProblemSpec, TimeGrid, ValidatedProblem};

/// Largest step count the oracle accepts.
pub const MAX_ORACLE_STEPS: usize = 3;
/// Largest number of candidate control values per step.
pub const MAX_ORACLE_LEVELS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub control: ControlProcess,
    pub value: f64,
    /// Number of control sequences evaluated.
    pub evaluated: usize,
    /// Sequences whose cost equals the optimum to within `1e-12`.
    pub near_ties: usize,
}

/// Exact expected cost of an open-loop control under the tree model, where
/// every Brownian component moves by `±√Δt` with equal probability.
///
/// Evaluated by direct recursion over the tree, independently of the Monte
/// Carlo simulator.
pub fn tree_cost(problem: &ValidatedProblem, u: &ControlProcess) -> Result<f64, MpError> {
    let grid = problem.grid();
    if u.steps() != grid.steps() || u.dim() != problem.control_dim() {
        return Err(MpError::Spec("control does not match the problem grid".into()));
    }
    let d = problem.brownian_dim();
    if grid.steps() * d > 20 {
        return Err(MpError::Oracle(format!("tree with {} draws is too large", grid.steps() * d)));
    }
    let mut walker = TreeWalker {
        problem,
        u,
        point: vec![0.0; problem.point_len()],
        checkpoint_states: vec![0.0; grid.checkpoint_count() * problem.state_dim()],
    };
    Ok(walker.expect(0, problem.x0().to_vec()))
}

struct TreeWalker<'a> {
    problem: &'a ValidatedProblem,
    u: &'a ControlProcess,
    point: Vec<f64>,
    checkpoint_states: Vec<f64>,
}

impl TreeWalker<'_> {
    /// Expected cost-to-go from `x` at `node`, including checkpoint values
    /// recorded so far.
    fn expect(&mut self, node: usize, x: Vec<f64>) -> f64 {
        let pr = self.problem;
        let grid = pr.grid();
        let m = pr.state_dim();
        if let Some(i) = grid.checkpoint_at(node) {
            self.checkpoint_states[i * m..(i + 1) * m].copy_from_slice(&x);
        }
        if node == grid.steps() {
            return pr.terminal().value(&self.checkpoint_states);
        }
        let d = pr.brownian_dim();
        let dt = grid.dt();
        let u = self.u.value(node);
        pr.fill_point(&mut self.point, grid.time(node), &x, u);
        let running = pr.running_at(&self.point) * dt;
        let mut drift = vec![0.0; m];
        let mut diffusion = vec![0.0; m * d];
        pr.drift_at(&self.point, &mut drift);
        pr.diffusion_at(&self.point, &mut diffusion);
        let h = dt.sqrt();
        let branches = 1usize << d;
        let saved = self.checkpoint_states.clone();
        let mut total = 0.0;
        for b in 0..branches {
            let next: Vec<f64> = (0..m)
                .map(|i| {
                    let noise: f64 = (0..d)
                        .map(|j| {
                            let dw = if (b >> j) & 1 == 1 { h } else { -h };
                            diffusion[i * d + j] * dw
                        })
                        .sum();
                    x[i] + drift[i] * dt + noise
                })
                .collect();
            total += self.expect(node + 1, next);
            self.checkpoint_states.copy_from_slice(&saved);
        }
        running + total / branches as f64
    }
}

/// Minimizes [`tree_cost`] over every control sequence taking values in
/// `levels` at each step. Sequences are enumerated lexicographically (first
/// step most significant) and only strict improvements replace the
/// incumbent, so ties resolve to the smallest index.
pub fn brute_force_oracle(problem: &ValidatedProblem, levels: &[Vec<f64>]) -> Result<OracleResult, MpError> {
    let steps = problem.grid().steps();
    let mu = problem.control_dim();
    if steps > MAX_ORACLE_STEPS {
        return Err(MpError::Oracle(format!("{steps} steps exceed the limit of {MAX_ORACLE_STEPS}")));
    }
    if levels.is_empty() || levels.len() > MAX_ORACLE_LEVELS {
        return Err(MpError::Oracle(format!(
            "need between 1 and {MAX_ORACLE_LEVELS} control levels, got {}",
            levels.len()
        )));
    }
    if let Some(bad) = levels.iter().find(|l| l.len() != mu || !problem.control_box().contains(l)) {
        return Err(MpError::Oracle(format!("level {bad:?} is not a point of the control box")));
    }
    let n = levels.len();
    let total = n.pow(steps as u32);
    let mut values = Vec::with_capacity(total);
    let mut best: Option<(usize, f64)> = None;
    for code in 0..total {
        let u = decode(code, n, steps, levels)?;
        let c = tree_cost(problem, &u)?;
        if !c.is_finite() {
            return Err(MpError::Oracle(format!("non-finite cost for sequence {code}")));
        }
        values.push(c);
        if best.is_none_or(|(_, b)| c < b) {
            best = Some((code, c));
        }
    }
    let (code, value) = best.expect("at least one sequence");
    Ok(OracleResult {
        control: decode(code, n, steps, levels)?,
        value,
        evaluated: total,
        near_ties: values.iter().filter(|&&c| (c - value).abs() <= 1e-12).count(),
    })
}

/// Tolerance for the first-order inequality at a control that is optimal
/// only among grid-valued sequences: `½·h·L·diam(U)`, with `h` the grid
/// spacing and `L` the largest sampled `|∂E[H_u]/∂u_k|` (central
/// differences of the exact tree gradient at every level of every step).
///
/// Optimality against the two grid neighbours gives `|E[H_u]| ≤ ½hL` on
/// interior steps, and `E[H_u](v − ū) ≤ ½hL·|v − ū|` follows.
pub fn grid_optimality_slack(
    problem: &ValidatedProblem,
    control: &ControlProcess,
    levels: &[Vec<f64>],
) -> Result<f64, MpError> {
    let grid = problem.grid();
    let ubox = problem.control_box();
    let wb = BrownianBatch::binomial_tree(grid, problem.brownian_dim());
    let gradient = |u: &ControlProcess| -> Result<ControlProcess, MpError> {
        let sb = simulate_state(problem, u, &wb)?;
        Ok(hamiltonian_gradient(problem, &sb, &wb, None)?.mean)
    };
    let diam = ubox.diameter();
    let spacing = if levels.len() > 1 { diam / (levels.len() - 1) as f64 } else { 0.0 };
    let eps = 1e-5 * diam.max(1e-12);
    let mut lipschitz = 0.0f64;
    for k in 0..control.steps() {
        for level in levels {
            for l in 0..control.dim() {
                let (mut up, mut down) = (control.clone(), control.clone());
                up.value_mut(k).copy_from_slice(level);
                down.value_mut(k).copy_from_slice(level);
                up.value_mut(k)[l] += eps;
                down.value_mut(k)[l] -= eps;
                let (gu, gd) = (gradient(&up)?, gradient(&down)?);
                lipschitz = lipschitz.max(((gu.value(k)[l] - gd.value(k)[l]) / (2.0 * eps)).abs());
            }
        }
    }
    Ok(0.5 * spacing * lipschitz * diam)
}

fn decode(code: usize, n: usize, steps: usize, levels: &[Vec<f64>]) -> Result<ControlProcess, MpError> {
    let mut vals = Vec::with_capacity(steps * levels[0].len());
    for k in 0..steps {
        let digit = (code / n.pow((steps - 1 - k) as u32)) % n;
        vals.extend_from_slice(&levels[digit]);
    }
    Ok(ControlProcess::from_values(steps, levels[0].len(), vals)?)
}

fn coef(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    // Three decimals so the printed expression is the exact coefficient.
    (rng.random_range(lo..hi) * 1000.0).round() / 1000.0
}

/// A random scalar problem small enough for [`brute_force_oracle`]: two or
/// three steps, control-dependent drift and diffusion, a convex running cost
/// and a convex quadratic terminal cost. Returns the problem together with
/// its control levels (the uniform grid of the control box).
pub fn tiny_instance(seed: u64) -> (ProblemSpec, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = rng.random_range(2..=MAX_ORACLE_STEPS);
    let horizon = 0.25 * steps as f64;
    let mut checkpoints: Vec<f64> = (1..steps)
        .filter(|_| rng.random_bool(0.5))
        .map(|k| 0.25 * k as f64)
        .collect();
    checkpoints.push(horizon);
    let n_levels = rng.random_range(3..=MAX_ORACLE_LEVELS);
    let lower = coef(&mut rng, -1.5, -0.2);
    let upper = coef(&mut rng, 0.2, 1.5);

    let drift = format!(
        "{} + ({})*x + ({})*u",
        coef(&mut rng, -0.5, 0.5),
        coef(&mut rng, -0.5, 0.5),
        coef(&mut rng, 0.2, 1.5)
    );
    let diffusion = format!(
        "{} + ({})*u + ({})*x",
        coef(&mut rng, 0.1, 0.5),
        coef(&mut rng, -0.3, 0.3),
        coef(&mut rng, -0.2, 0.2)
    );
    let running = format!("{}*u^2 + {}*x^2", coef(&mut rng, 0.0, 1.0), coef(&mut rng, 0.0, 0.5));
    let terminal: Vec<String> = (1..=checkpoints.len())
        .map(|i| format!("{}*(y{i} - ({}))^2", coef(&mut rng, 0.1, 1.5), coef(&mut rng, -1.0, 1.0)))
        .collect();

    let control_box = ControlBox::uniform(1, lower, upper).expect("lower < upper");
    let levels = control_box.axis(0, n_levels).into_iter().map(|v| vec![v]).collect();
    let spec = ProblemSpec {
        name: format!("tiny_{seed}"),
        state_dim: 1,
        brownian_dim: 1,
        control_dim: 1,
        x0: vec![coef(&mut rng, -0.5, 0.5)],
        drift: vec![drift],
        diffusion: vec![vec![diffusion]],
        running_cost: running,
        terminal_cost: terminal.join(" + "),
        grid: TimeGrid::new(horizon, steps, &checkpoints).expect("checkpoints on nodes"),
        control_box,
    };
    (spec, levels)
}
