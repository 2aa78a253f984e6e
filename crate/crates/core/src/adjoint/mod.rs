//! Backward adjoint equations with jumps at the checkpoints.
//!
//! The regression solver estimates the conditional expectations of the
//! backward recursion by least squares on polynomials in the current state
//! and the already-realized checkpoint states. A pathwise sweep gives the
//! exact discrete gradient of the cost for open-loop controls, which is what
//! the optimizer uses.

use std::io::{self, Write};
use std::sync::Arc;

use serde::Serialize;

use crate::forward::{BrownianBatch, ControlProcess, StateBatch, VariationalBatch};
use crate::forward::Jacobians;
use crate::parallel;
use crate::problem::{AnalyticSolution, TerminalCost, ValidatedProblem};
use crate::regression::{Projector, RegressionError, RegressionSpec};
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdjointError {
    #[error("regression at step {step}: {source}")]
    Regression {
        step: usize,
        #[source]
        source: RegressionError,
    },
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("terminal cost is not differentiable; mollify it first")]
    NonSmoothTerminal,
    #[error("no closed-form adjoint for this problem: {0}")]
    NoClosedForm(String),
}

/// Running-cost weight and the functional whose gradient drives the jumps.
///
/// The unconstrained adjoint uses weight 1 and the problem's terminal cost;
/// the constrained one uses `β⁰` and `β⁰Ψ + Σ βᵢφᵢ`.
#[derive(Debug, Clone)]
pub struct AdjointWeights {
    pub running: f64,
    pub terminal: Arc<dyn TerminalCost>,
}

impl AdjointWeights {
    pub fn unit(problem: &ValidatedProblem) -> Self {
        AdjointWeights {
            running: 1.0,
            terminal: problem.terminal().clone(),
        }
    }
}

/// Adjoint processes on the grid.
///
/// `p` holds the value at each node; at a checkpoint node this is the left
/// value `p(tᵢ) = jumpᵢ + p(tᵢ⁺)`, and the right limit is kept separately.
/// `p_next` is the continuation `E[p_{k+1} | F_k]` used by the discrete
/// Hamiltonian on step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointBatch {
    paths: usize,
    nodes: usize,
    state_dim: usize,
    brownian_dim: usize,
    checkpoints: Vec<usize>,
    running_weight: f64,
    // Node-major storage: [node][path][component].
    p: Vec<f64>,
    p_next: Vec<f64>,
    q: Vec<f64>,
    p_sample: Vec<f64>,
    q_sample: Vec<f64>,
    right: Vec<f64>,
    jumps: Vec<f64>,
}

impl AdjointBatch {
    fn zeros(problem: &ValidatedProblem, paths: usize, running_weight: f64) -> Self {
        let grid = problem.grid();
        let (m, d) = (problem.state_dim(), problem.brownian_dim());
        let n = grid.checkpoint_count();
        AdjointBatch {
            paths,
            nodes: grid.nodes(),
            state_dim: m,
            brownian_dim: d,
            checkpoints: grid.checkpoints().to_vec(),
            running_weight,
            p: vec![0.0; grid.nodes() * paths * m],
            p_next: vec![0.0; grid.steps() * paths * m],
            q: vec![0.0; grid.steps() * paths * m * d],
            p_sample: vec![0.0; grid.nodes() * paths * m],
            q_sample: vec![0.0; grid.steps() * paths * m * d],
            right: vec![0.0; n * paths * m],
            jumps: vec![0.0; n * paths * m],
        }
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn brownian_dim(&self) -> usize {
        self.brownian_dim
    }

    /// Weight of the running cost in the Hamiltonian (`β⁰`, or 1).
    pub fn running_weight(&self) -> f64 {
        self.running_weight
    }

    /// `p` at a node (left value at checkpoints).
    pub fn p(&self, path: usize, node: usize) -> &[f64] {
        let m = self.state_dim;
        let s = (node * self.paths + path) * m;
        &self.p[s..s + m]
    }

    /// Right limit `p(t⁺)` at a node; differs from [`AdjointBatch::p`] only
    /// at checkpoints.
    pub fn p_right(&self, path: usize, node: usize) -> &[f64] {
        match self.checkpoints.iter().position(|&c| c == node) {
            Some(i) => {
                let m = self.state_dim;
                let s = (i * self.paths + path) * m;
                &self.right[s..s + m]
            }
            None => self.p(path, node),
        }
    }

    /// Continuation `E[p_{k+1} | F_k]` on step `k`.
    pub fn p_next(&self, path: usize, step: usize) -> &[f64] {
        let m = self.state_dim;
        let s = (step * self.paths + path) * m;
        &self.p_next[s..s + m]
    }

    /// `q` on step `k`, laid out `[i·d + j]`.
    pub fn q(&self, path: usize, step: usize) -> &[f64] {
        let w = self.state_dim * self.brownian_dim;
        let s = (step * self.paths + path) * w;
        &self.q[s..s + w]
    }

    /// Unprojected adjoint sample at a node (left value at checkpoints):
    /// the backward recursion driven by the pathwise terminal gradients
    /// instead of the fitted continuation. Its conditional expectation given
    /// `F_k` is `p`, and its spread carries the full sampling noise of
    /// adjoint averages.
    pub fn p_sample(&self, path: usize, node: usize) -> &[f64] {
        let m = self.state_dim;
        let s = (node * self.paths + path) * m;
        &self.p_sample[s..s + m]
    }

    /// Regression target `(p_{k+1} − E[p_{k+1}|F_k])ΔW/Δt` of `q` on step
    /// `k`; same layout as [`AdjointBatch::q`].
    pub fn q_sample(&self, path: usize, step: usize) -> &[f64] {
        let w = self.state_dim * self.brownian_dim;
        let s = (step * self.paths + path) * w;
        &self.q_sample[s..s + w]
    }

    /// Jump `p(tᵢ) − p(tᵢ⁺)` at checkpoint `i`.
    pub fn jump(&self, path: usize, checkpoint: usize) -> &[f64] {
        let m = self.state_dim;
        let s = (checkpoint * self.paths + path) * m;
        &self.jumps[s..s + m]
    }
}

fn check_batches(problem: &ValidatedProblem, sb: &StateBatch, wb: &BrownianBatch) -> Result<(), AdjointError> {
    let grid = problem.grid();
    if sb.paths() != wb.paths() || sb.nodes() != grid.nodes() || wb.steps() != grid.steps() {
        return Err(AdjointError::Misaligned(format!(
            "state batch {}×{}, Brownian batch {}×{}, grid has {} nodes",
            sb.paths(),
            sb.nodes(),
            wb.paths(),
            wb.steps(),
            grid.nodes()
        )));
    }
    if wb.dim() != problem.brownian_dim() || sb.state_dim() != problem.state_dim() {
        return Err(AdjointError::Misaligned("dimension mismatch with the problem".into()));
    }
    Ok(())
}

/// Pathwise gradient of the jump functional at the realized checkpoint
/// states, `[path][i·m + c]`.
fn terminal_gradients(problem: &ValidatedProblem, sb: &StateBatch, terminal: &dyn TerminalCost) -> Vec<f64> {
    let grid = problem.grid();
    let width = grid.checkpoint_count() * problem.state_dim();
    let mut out = vec![0.0; sb.paths() * width];
    if terminal.is_zero() {
        return out;
    }
    parallel::for_each_slot(&mut out, width, |path, g| {
        let mut y = vec![0.0; width];
        sb.checkpoint_states(path, grid.checkpoints(), &mut y);
        terminal.gradient(&y, g);
    });
    out
}

/// Regression features at `node`: the current state followed by the states
/// at checkpoints strictly before `node`.
fn features_at(problem: &ValidatedProblem, sb: &StateBatch, node: usize) -> (Vec<f64>, usize) {
    let m = problem.state_dim();
    let past: Vec<usize> = problem.grid().checkpoints().iter().copied().filter(|&c| c < node).collect();
    let width = m * (1 + past.len());
    let mut feats = vec![0.0; sb.paths() * width];
    parallel::for_each_slot(&mut feats, width, |path, row| {
        row[..m].copy_from_slice(sb.state(path, node));
        for (i, &c) in past.iter().enumerate() {
            row[(i + 1) * m..(i + 2) * m].copy_from_slice(sb.state(path, c));
        }
    });
    (feats, width)
}

/// Solves the adjoint equations backward by regression Monte Carlo.
///
/// On each step `k`, with `P = p_{k+1}` and features at `X_k`:
/// `cont = Ê[P]`, `q = Ê[(P − cont)ΔW]/Δt`, and
/// `p(t_k⁺) = cont + Δt(b_xᵀcont + Σⱼ σʲ_xᵀqʲ − w₀f_x)`. At checkpoint `i`
/// the jump `−Ê[G_{yᵢ}]` is added, taken pathwise when the gradient block
/// is already known at `tᵢ`.
pub fn solve_adjoint(
    problem: &ValidatedProblem,
    sb: &StateBatch,
    wb: &BrownianBatch,
    spec: &RegressionSpec,
    weights: Option<&AdjointWeights>,
) -> Result<AdjointBatch, AdjointError> {
    check_batches(problem, sb, wb)?;
    spec.validate().map_err(|source| AdjointError::Regression { step: 0, source })?;
    let unit = AdjointWeights::unit(problem);
    let weights = weights.unwrap_or(&unit);
    let terminal = weights.terminal.as_ref();
    if !terminal.is_zero() && !terminal.is_differentiable() {
        return Err(AdjointError::NonSmoothTerminal);
    }
    let grid = problem.grid();
    let (m, d, paths, dt) = (problem.state_dim(), problem.brownian_dim(), sb.paths(), grid.dt());
    let n = grid.checkpoint_count();
    let w0 = weights.running;
    let mut ab = AdjointBatch::zeros(problem, paths, w0);
    let grads = terminal_gradients(problem, sb, terminal);

    // Pathwise −G_{yᵢ} on every path.
    let raw_jump = |i: usize| -> Vec<f64> {
        (0..paths)
            .flat_map(|p| grads[p * n * m + i * m..p * n * m + (i + 1) * m].iter().map(|g| -g))
            .collect()
    };

    // Jump at checkpoint `i`: fills `ab.jumps` block and returns it.
    let jump_at = |i: usize, ab: &mut AdjointBatch| -> Result<(), AdjointError> {
        let node = grid.checkpoints()[i];
        let mut block: Vec<f64> = (0..paths)
            .flat_map(|p| grads[p * n * m + i * m..p * n * m + (i + 1) * m].iter().map(|g| -g))
            .collect();
        if !terminal.adapted_gradient(i) && block.iter().any(|&v| v != 0.0) {
            let (feats, width) = features_at(problem, sb, node);
            let proj = Projector::fit(&feats, paths, width, spec)
                .map_err(|source| AdjointError::Regression { step: node, source })?;
            block = proj.project(&block, m);
        }
        ab.jumps[i * paths * m..(i + 1) * paths * m].copy_from_slice(&block);
        Ok(())
    };

    // Terminal node: p(t_n⁺) = 0, so p(T) is the last jump.
    let last = grid.steps();
    if let Some(i) = grid.checkpoint_at(last) {
        jump_at(i, &mut ab)?;
        let (jumps, p) = (&ab.jumps, &mut ab.p);
        p[last * paths * m..].copy_from_slice(&jumps[i * paths * m..(i + 1) * paths * m]);
        let raw = raw_jump(i);
        ab.p_sample[last * paths * m..].copy_from_slice(&raw);
    }

    let running_active = w0 != 0.0 && !problem.running().value.is_zero();
    for k in (0..grid.steps()).rev() {
        let next = ab.p[(k + 1) * paths * m..(k + 2) * paths * m].to_vec();
        let next_sample = ab.p_sample[(k + 1) * paths * m..(k + 2) * paths * m].to_vec();
        let (cont, q, q_target) = if next.iter().all(|&v| v == 0.0) {
            (next, vec![0.0; paths * m * d], vec![0.0; paths * m * d])
        } else {
            let (feats, width) = features_at(problem, sb, k);
            let proj = Projector::fit(&feats, paths, width, spec)
                .map_err(|source| AdjointError::Regression { step: k, source })?;
            let cont = proj.project(&next, m);
            let mut target = vec![0.0; paths * m * d];
            parallel::for_each_slot(&mut target, m * d, |path, row| {
                let dw = wb.increment(path, k);
                for i in 0..m {
                    let r = next[path * m + i] - cont[path * m + i];
                    for j in 0..d {
                        row[i * d + j] = r * dw[j] / dt;
                    }
                }
            });
            let q = proj.project(&target, m * d);
            (cont, q, target)
        };

        let mut right = vec![0.0; paths * m];
        let needs_dynamics = cont.iter().any(|&v| v != 0.0) || running_active;
        if needs_dynamics {
            parallel::for_each_slot(&mut right, m, |path, out| {
                let mut pt = vec![0.0; problem.point_len()];
                let mut jac = Jacobians::new(problem);
                problem.fill_point(&mut pt, grid.time(k), sb.state(path, k), sb.control(path, k));
                jac.eval(problem, &pt);
                let c = &cont[path * m..(path + 1) * m];
                let qq = &q[path * m * d..(path + 1) * m * d];
                for (a, o) in out.iter_mut().enumerate() {
                    let mut s = -w0 * jac.f_x[a];
                    for i in 0..m {
                        s += jac.b_x[i * m + a] * c[i];
                        for j in 0..d {
                            s += jac.s_x[(i * d + j) * m + a] * qq[i * d + j];
                        }
                    }
                    *o = c[a] + dt * s;
                }
            });
        }
        let mut sample = vec![0.0; paths * m];
        if needs_dynamics || next_sample.iter().any(|&v| v != 0.0) {
            parallel::for_each_slot(&mut sample, m, |path, out| {
                let mut pt = vec![0.0; problem.point_len()];
                let mut jac = Jacobians::new(problem);
                problem.fill_point(&mut pt, grid.time(k), sb.state(path, k), sb.control(path, k));
                jac.eval(problem, &pt);
                let c = &next_sample[path * m..(path + 1) * m];
                let qq = &q[path * m * d..(path + 1) * m * d];
                for (a, o) in out.iter_mut().enumerate() {
                    let mut s = -w0 * jac.f_x[a];
                    for i in 0..m {
                        s += jac.b_x[i * m + a] * c[i];
                        for j in 0..d {
                            s += jac.s_x[(i * d + j) * m + a] * qq[i * d + j];
                        }
                    }
                    *o = c[a] + dt * s;
                }
            });
        }
        if let Some(i) = grid.checkpoint_at(k) {
            for (o, j) in sample.iter_mut().zip(raw_jump(i)) {
                *o += j;
            }
        }
        ab.p_sample[k * paths * m..(k + 1) * paths * m].copy_from_slice(&sample);
        ab.q_sample[k * paths * m * d..(k + 1) * paths * m * d].copy_from_slice(&q_target);
        ab.p_next[k * paths * m..(k + 1) * paths * m].copy_from_slice(&cont);
        ab.q[k * paths * m * d..(k + 1) * paths * m * d].copy_from_slice(&q);
        let slot = k * paths * m..(k + 1) * paths * m;
        match grid.checkpoint_at(k) {
            Some(i) => {
                jump_at(i, &mut ab)?;
                ab.right[i * paths * m..(i + 1) * paths * m].copy_from_slice(&right);
                let jump = &ab.jumps[i * paths * m..(i + 1) * paths * m];
                let left: Vec<f64> = right.iter().zip(jump).map(|(r, j)| r + j).collect();
                ab.p[slot].copy_from_slice(&left);
            }
            None => ab.p[slot].copy_from_slice(&right),
        }
    }
    Ok(ab)
}

/// Evaluates a stored closed-form adjoint pathwise (scalar built-ins).
///
/// `beta` gives signed multipliers for the constrained example; the
/// continuation on step `k` is taken as the right limit at node `k`.
pub fn analytic_adjoint(
    solution: &AnalyticSolution,
    problem: &ValidatedProblem,
    wb: &BrownianBatch,
    beta: Option<&[f64]>,
) -> Result<AdjointBatch, AdjointError> {
    if problem.state_dim() != 1 || problem.brownian_dim() != 1 {
        return Err(AdjointError::NoClosedForm("closed forms are scalar".into()));
    }
    let grid = problem.grid();
    if wb.steps() != grid.steps() || wb.dim() != 1 {
        return Err(AdjointError::Misaligned("Brownian batch does not match the grid".into()));
    }
    let paths = wb.paths();
    let running_weight = beta.map_or(1.0, |b| b[0]);
    let mut ab = AdjointBatch::zeros(problem, paths, running_weight);
    if problem.terminal().is_zero() && problem.running().value.is_zero() {
        return Ok(ab);
    }
    for path in 0..paths {
        let w = wb.cumulative(path);
        for node in 0..grid.nodes() {
            let (left, right) = solution.adjoint_p(grid, node, &w, beta);
            ab.p[node * paths + path] = left;
            ab.p_sample[node * paths + path] = left;
            if let Some(i) = grid.checkpoint_at(node) {
                ab.right[i * paths + path] = right;
                ab.jumps[i * paths + path] = left - right;
            }
            if node < grid.steps() {
                ab.p_next[node * paths + path] = right;
                ab.q[node * paths + path] = solution.adjoint_q(grid, node);
                ab.q_sample[node * paths + path] = solution.adjoint_q(grid, node);
            }
        }
    }
    Ok(ab)
}

/// Exact discrete gradient of the (weighted) cost with respect to an
/// open-loop control: entry `k` is `E[H_u]` on step `k`, i.e.
/// `−(1/Δt)∂J/∂u_k`, computed by a pathwise backward sweep
/// `P_k = (I + b_xΔt + Σⱼσʲ_xΔWʲ)ᵀP_{k+1} − w₀f_xΔt − G_{y}` (jump at
/// checkpoints).
pub fn hamiltonian_gradient(
    problem: &ValidatedProblem,
    sb: &StateBatch,
    wb: &BrownianBatch,
    weights: Option<&AdjointWeights>,
) -> Result<HamiltonianGradient, AdjointError> {
    check_batches(problem, sb, wb)?;
    let unit = AdjointWeights::unit(problem);
    let weights = weights.unwrap_or(&unit);
    let terminal = weights.terminal.as_ref();
    if !terminal.is_zero() && !terminal.is_differentiable() {
        return Err(AdjointError::NonSmoothTerminal);
    }
    let grid = problem.grid();
    let (m, d, mu, dt) = (problem.state_dim(), problem.brownian_dim(), problem.control_dim(), grid.dt());
    let (steps, n, w0) = (grid.steps(), grid.checkpoint_count(), weights.running);
    let paths = sb.paths();
    let len = steps * mu;
    // First half of the accumulator holds sums, second half sums of squares.
    let totals = parallel::sum_blocks(paths, 2 * len, |range, acc| {
        let mut pt = vec![0.0; problem.point_len()];
        let mut jac = Jacobians::new(problem);
        let mut y = vec![0.0; n * m];
        let mut g = vec![0.0; n * m];
        let mut p = vec![0.0; m];
        let mut prev = vec![0.0; m];
        for path in range {
            sb.checkpoint_states(path, grid.checkpoints(), &mut y);
            if terminal.is_zero() {
                g.iter_mut().for_each(|v| *v = 0.0);
            } else {
                terminal.gradient(&y, &mut g);
            }
            p.iter_mut().for_each(|v| *v = 0.0);
            if let Some(i) = grid.checkpoint_at(steps) {
                for c in 0..m {
                    p[c] = -g[i * m + c];
                }
            }
            for k in (0..steps).rev() {
                problem.fill_point(&mut pt, grid.time(k), sb.state(path, k), sb.control(path, k));
                jac.eval(problem, &pt);
                let dw = wb.increment(path, k);
                for l in 0..mu {
                    let mut h = -w0 * jac.f_u[l];
                    for i in 0..m {
                        h += jac.b_u[i * mu + l] * p[i];
                        for j in 0..d {
                            h += jac.s_u[(i * d + j) * mu + l] * p[i] * dw[j] / dt;
                        }
                    }
                    acc[k * mu + l] += h;
                    acc[len + k * mu + l] += h * h;
                }
                prev.copy_from_slice(&p);
                for a in 0..m {
                    let mut s = -w0 * jac.f_x[a] * dt;
                    for i in 0..m {
                        s += jac.b_x[i * m + a] * prev[i] * dt;
                        for j in 0..d {
                            s += jac.s_x[(i * d + j) * m + a] * prev[i] * dw[j];
                        }
                    }
                    p[a] = prev[a] + s;
                }
                if let Some(i) = grid.checkpoint_at(k) {
                    for c in 0..m {
                        p[c] -= g[i * m + c];
                    }
                }
            }
        }
    });
    let np = paths.max(1) as f64;
    let mean: Vec<f64> = totals[..len].iter().map(|t| t / np).collect();
    let stderr: Vec<f64> = (0..len)
        .map(|i| {
            if paths < 2 {
                return 0.0;
            }
            let var = (totals[len + i] - np * mean[i] * mean[i]).max(0.0) / (np - 1.0);
            (var / np).sqrt()
        })
        .collect();
    let wrap = |v| ControlProcess::from_values(steps, mu, v).map_err(|e| AdjointError::Misaligned(e.to_string()));
    Ok(HamiltonianGradient {
        mean: wrap(mean)?,
        stderr: wrap(stderr)?,
    })
}

/// Per-step Monte Carlo mean of `H_u` and its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianGradient {
    pub mean: ControlProcess,
    pub stderr: ControlProcess,
}

/// Both sides of the duality identity between the adjoint and the
/// variational state, and their paired difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityResidual {
    /// `E[−Σᵢ G_{yᵢ}·y(tᵢ)] − E Σ_k w₀(f_x·y_k + f_u·v_k)Δt`.
    pub lhs: Estimate,
    /// `E Σ_k (pᵀb_u v + Σⱼ qʲᵀσʲ_u v − w₀f_u·v)Δt`.
    pub rhs: Estimate,
    /// Paired difference `lhs − rhs`.
    pub difference: Estimate,
}

impl DualityResidual {
    pub fn residual(&self) -> f64 {
        self.difference.mean.abs()
    }

    pub fn combined_stderr(&self) -> f64 {
        self.difference.stderr
    }
}

/// Evaluates the summed duality identity obtained from Itô's formula for
/// `p·y` over the whole horizon, using the continuation `p_next` on each
/// step.
pub fn duality_residual(
    problem: &ValidatedProblem,
    ab: &AdjointBatch,
    sb: &StateBatch,
    direction: &ControlProcess,
    vb: &VariationalBatch,
    weights: Option<&AdjointWeights>,
) -> Result<DualityResidual, AdjointError> {
    let grid = problem.grid();
    if ab.paths() != sb.paths() || vb.paths() != sb.paths() || direction.steps() != grid.steps() {
        return Err(AdjointError::Misaligned("adjoint, state and variational batches differ".into()));
    }
    let unit = AdjointWeights::unit(problem);
    let weights = weights.unwrap_or(&unit);
    let terminal = weights.terminal.as_ref();
    if !terminal.is_zero() && !terminal.is_differentiable() {
        return Err(AdjointError::NonSmoothTerminal);
    }
    let (m, d, mu, dt) = (problem.state_dim(), problem.brownian_dim(), problem.control_dim(), grid.dt());
    let n = grid.checkpoint_count();
    let w0 = weights.running;
    if direction.is_zero() {
        let zero = Estimate::from_samples(&vec![0.0; sb.paths()]);
        return Ok(DualityResidual {
            lhs: zero,
            rhs: zero,
            difference: zero,
        });
    }
    let pairs: Vec<(f64, f64)> = parallel::map(sb.paths(), |path| {
        let mut pt = vec![0.0; problem.point_len()];
        let mut jac = Jacobians::new(problem);
        let mut y = vec![0.0; n * m];
        let mut g = vec![0.0; n * m];
        let (mut lhs, mut rhs) = (0.0, 0.0);
        sb.checkpoint_states(path, grid.checkpoints(), &mut y);
        if !terminal.is_zero() {
            terminal.gradient(&y, &mut g);
        }
        for (i, &node) in grid.checkpoints().iter().enumerate() {
            let yi = vb.state(path, node);
            lhs -= (0..m).map(|c| g[i * m + c] * yi[c]).sum::<f64>();
        }
        for k in 0..grid.steps() {
            problem.fill_point(&mut pt, grid.time(k), sb.state(path, k), sb.control(path, k));
            jac.eval(problem, &pt);
            let yk = vb.state(path, k);
            let v = direction.value(k);
            let fx_y: f64 = (0..m).map(|c| jac.f_x[c] * yk[c]).sum();
            let fu_v: f64 = (0..mu).map(|l| jac.f_u[l] * v[l]).sum();
            lhs -= w0 * (fx_y + fu_v) * dt;
            let p = ab.p_next(path, k);
            let q = ab.q(path, k);
            let mut h = -w0 * fu_v;
            for i in 0..m {
                for l in 0..mu {
                    let mut coef = jac.b_u[i * mu + l] * p[i];
                    for j in 0..d {
                        coef += jac.s_u[(i * d + j) * mu + l] * q[i * d + j];
                    }
                    h += coef * v[l];
                }
            }
            rhs += h * dt;
        }
        (lhs, rhs)
    });
    let lhs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let rhs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    Ok(DualityResidual {
        lhs: Estimate::from_samples(&lhs),
        rhs: Estimate::from_samples(&rhs),
        difference: Estimate::from_samples(&diff),
    })
}

/// Writes the adjoint dump body: one row per (path, node) with `p`, `q` (of
/// the step starting at the node; empty on the last node), a checkpoint
/// flag and both one-sided limits of `p`.
pub fn write_adjoint_csv(
    out: &mut dyn Write,
    problem: &ValidatedProblem,
    ab: &AdjointBatch,
    max_paths: usize,
) -> io::Result<()> {
    let grid = problem.grid();
    let (m, d) = (ab.state_dim(), ab.brownian_dim());
    let mut header = vec!["path".to_string(), "node".into(), "time".into()];
    header.extend((1..=m).map(|i| format!("p{i}")));
    for i in 1..=m {
        header.extend((1..=d).map(|j| format!("q{i}_{j}")));
    }
    header.push("is_checkpoint".into());
    header.extend((1..=m).map(|i| format!("p_left{i}")));
    header.extend((1..=m).map(|i| format!("p_right{i}")));
    writeln!(out, "{}", header.join(","))?;
    for path in 0..ab.paths().min(max_paths) {
        for node in 0..grid.nodes() {
            write!(out, "{path},{node},{}", grid.time(node))?;
            for v in ab.p(path, node) {
                write!(out, ",{v}")?;
            }
            if node < grid.steps() {
                for v in ab.q(path, node) {
                    write!(out, ",{v}")?;
                }
            } else {
                for _ in 0..m * d {
                    write!(out, ",")?;
                }
            }
            write!(out, ",{}", u8::from(grid.checkpoint_at(node).is_some()))?;
            for v in ab.p(path, node) {
                write!(out, ",{v}")?;
            }
            for v in ab.p_right(path, node) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
