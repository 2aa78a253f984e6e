//! Brownian paths, Euler–Maruyama simulation of the controlled state, the
//! variational (linearized) state, Monte Carlo cost estimates and the
//! first-order (Gateaux) expansion check.

mod brownian;
mod control;

use std::io::{self, Write};

use serde::Serialize;

pub use brownian::BrownianBatch;
pub use control::{ControlProcess, FeedbackControl};

use crate::parallel;
use crate::problem::ValidatedProblem;
use crate::stats::{log_log_slope, Estimate};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForwardError {
    #[error("non-finite value on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("perturbed control leaves the control box at rho = {rho}")]
    OutOfBox { rho: f64 },
    #[error("terminal cost is not differentiable; mollify it first")]
    NonSmoothTerminal,
    #[error("invalid feedback control: {0}")]
    Feedback(String),
}

/// Monte Carlo estimate of the cost functional.
pub type CostEstimate = Estimate;

/// How the controls that produced a [`StateBatch`] are stored.
#[derive(Debug, Clone, PartialEq)]
pub enum Controls {
    /// One deterministic control shared by every path.
    Shared(ControlProcess),
    /// Pathwise values `[path][step][component]` from a feedback law.
    PerPath(Vec<f64>),
}

/// Simulated states `X[path][node][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBatch {
    paths: usize,
    nodes: usize,
    state_dim: usize,
    control_dim: usize,
    seed: u64,
    x: Vec<f64>,
    controls: Controls,
}

impl StateBatch {
    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Seed of the Brownian batch that drove the simulation.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let start = (path * self.nodes + node) * self.state_dim;
        &self.x[start..start + self.state_dim]
    }

    pub fn path_states(&self, path: usize) -> &[f64] {
        let len = self.nodes * self.state_dim;
        &self.x[path * len..(path + 1) * len]
    }

    pub fn control(&self, path: usize, step: usize) -> &[f64] {
        match &self.controls {
            Controls::Shared(c) => c.value(step),
            Controls::PerPath(v) => {
                let steps = self.nodes - 1;
                let start = (path * steps + step) * self.control_dim;
                &v[start..start + self.control_dim]
            }
        }
    }

    pub fn controls(&self) -> &Controls {
        &self.controls
    }

    /// The shared control, when the batch was driven by an open-loop control.
    pub fn shared_control(&self) -> Option<&ControlProcess> {
        match &self.controls {
            Controls::Shared(c) => Some(c),
            Controls::PerPath(_) => None,
        }
    }

    /// Flattened checkpoint states `[i·m + c]` of one path.
    pub fn checkpoint_states(&self, path: usize, checkpoints: &[usize], out: &mut [f64]) {
        let m = self.state_dim;
        for (i, &node) in checkpoints.iter().enumerate() {
            out[i * m..(i + 1) * m].copy_from_slice(self.state(path, node));
        }
    }
}

fn check_alignment(problem: &ValidatedProblem, wb: &BrownianBatch) -> Result<(), ForwardError> {
    if wb.steps() != problem.grid().steps() || wb.dim() != problem.brownian_dim() {
        return Err(ForwardError::Misaligned(format!(
            "Brownian batch has {} steps × {} components, problem expects {} × {}",
            wb.steps(),
            wb.dim(),
            problem.grid().steps(),
            problem.brownian_dim()
        )));
    }
    Ok(())
}

fn check_control(problem: &ValidatedProblem, u: &ControlProcess) -> Result<(), ForwardError> {
    if u.steps() != problem.grid().steps() || u.dim() != problem.control_dim() {
        return Err(ForwardError::Misaligned(format!(
            "control has {} steps × {} components, problem expects {} × {}",
            u.steps(),
            u.dim(),
            problem.grid().steps(),
            problem.control_dim()
        )));
    }
    Ok(())
}

/// One Euler–Maruyama step `x ← x + bΔt + σΔW`.
struct Stepper<'a> {
    problem: &'a ValidatedProblem,
    point: Vec<f64>,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(problem: &'a ValidatedProblem) -> Self {
        let (m, d) = (problem.state_dim(), problem.brownian_dim());
        Stepper {
            problem,
            point: vec![0.0; problem.point_len()],
            drift: vec![0.0; m],
            diffusion: vec![0.0; m * d],
        }
    }

    fn step(&mut self, t: f64, x: &[f64], u: &[f64], dw: &[f64], dt: f64, out: &mut [f64]) {
        let d = dw.len();
        self.problem.fill_point(&mut self.point, t, x, u);
        self.problem.drift_at(&self.point, &mut self.drift);
        self.problem.diffusion_at(&self.point, &mut self.diffusion);
        for i in 0..x.len() {
            let mut noise = 0.0;
            for j in 0..d {
                noise += self.diffusion[i * d + j] * dw[j];
            }
            out[i] = x[i] + self.drift[i] * dt + noise;
        }
    }
}

/// Euler–Maruyama simulation under an open-loop control.
pub fn simulate_state(
    problem: &ValidatedProblem,
    u: &ControlProcess,
    wb: &BrownianBatch,
) -> Result<StateBatch, ForwardError> {
    check_alignment(problem, wb)?;
    check_control(problem, u)?;
    let grid = problem.grid();
    let (m, nodes, dt) = (problem.state_dim(), grid.nodes(), grid.dt());
    let mut x = vec![0.0; wb.paths() * nodes * m];
    parallel::try_for_each_slot(&mut x, nodes * m, |path, slot| {
        let mut stepper = Stepper::new(problem);
        slot[..m].copy_from_slice(problem.x0());
        for k in 0..grid.steps() {
            let (head, tail) = slot.split_at_mut((k + 1) * m);
            stepper.step(grid.time(k), &head[k * m..], u.value(k), wb.increment(path, k), dt, &mut tail[..m]);
            if tail[..m].iter().any(|v| !v.is_finite()) {
                return Err(ForwardError::NonFinite { path, step: k });
            }
        }
        Ok(())
    })?;
    Ok(StateBatch {
        paths: wb.paths(),
        nodes,
        state_dim: m,
        control_dim: problem.control_dim(),
        seed: wb.seed(),
        x,
        controls: Controls::Shared(u.clone()),
    })
}

/// Euler–Maruyama simulation under a feedback law evaluated pathwise.
pub fn simulate_feedback(
    problem: &ValidatedProblem,
    law: &FeedbackControl,
    wb: &BrownianBatch,
) -> Result<StateBatch, ForwardError> {
    check_alignment(problem, wb)?;
    let grid = problem.grid();
    let (m, mu, nodes, steps, dt) = (
        problem.state_dim(),
        problem.control_dim(),
        grid.nodes(),
        grid.steps(),
        grid.dt(),
    );
    let ubox = problem.control_box();
    // Each path slot holds its states followed by its controls.
    let stride = nodes * m + steps * mu;
    let mut joint = vec![0.0; wb.paths() * stride];
    parallel::try_for_each_slot(&mut joint, stride, |path, slot| {
        let (xs, us) = slot.split_at_mut(nodes * m);
        let mut stepper = Stepper::new(problem);
        let mut scratch = vec![0.0; 1 + m];
        xs[..m].copy_from_slice(problem.x0());
        for k in 0..steps {
            let t = grid.time(k);
            let (head, tail) = xs.split_at_mut((k + 1) * m);
            let u = &mut us[k * mu..(k + 1) * mu];
            law.eval(t, &head[k * m..], ubox, &mut scratch, u);
            stepper.step(t, &head[k * m..], u, wb.increment(path, k), dt, &mut tail[..m]);
            if tail[..m].iter().any(|v| !v.is_finite()) {
                return Err(ForwardError::NonFinite { path, step: k });
            }
        }
        Ok(())
    })?;
    let mut x = Vec::with_capacity(wb.paths() * nodes * m);
    let mut controls = Vec::with_capacity(wb.paths() * steps * mu);
    for slot in joint.chunks(stride) {
        x.extend_from_slice(&slot[..nodes * m]);
        controls.extend_from_slice(&slot[nodes * m..]);
    }
    Ok(StateBatch {
        paths: wb.paths(),
        nodes,
        state_dim: m,
        control_dim: mu,
        seed: wb.seed(),
        x,
        controls: Controls::PerPath(controls),
    })
}

/// Per-path realized cost `Σ_k f(s_k, X_k, u_k)Δt + Ψ(X(t₁),…,X(tₙ))`.
pub fn path_costs(problem: &ValidatedProblem, sb: &StateBatch) -> Vec<f64> {
    let grid = problem.grid();
    let m = problem.state_dim();
    let dt = grid.dt();
    let terminal = problem.terminal();
    let running_zero = problem.running().value.is_zero();
    parallel::map(sb.paths(), |path| {
        let mut running = 0.0;
        if !running_zero {
            let mut pt = vec![0.0; problem.point_len()];
            for k in 0..grid.steps() {
                problem.fill_point(&mut pt, grid.time(k), sb.state(path, k), sb.control(path, k));
                running += problem.running_at(&pt) * dt;
            }
        }
        if terminal.is_zero() {
            return running;
        }
        let mut y = vec![0.0; grid.checkpoint_count() * m];
        sb.checkpoint_states(path, grid.checkpoints(), &mut y);
        running + terminal.value(&y)
    })
}

/// Monte Carlo estimate of the cost: mean of [`path_costs`] with its
/// standard error.
pub fn estimate_cost(problem: &ValidatedProblem, sb: &StateBatch) -> CostEstimate {
    Estimate::from_samples(&path_costs(problem, sb))
}

/// Solution `y[path][node][component]` of the variational equation
/// `dy = (b_x y + b_u v)dt + Σⱼ(σʲ_x y + σʲ_u v)dWʲ`, `y(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalBatch {
    paths: usize,
    nodes: usize,
    state_dim: usize,
    y: Vec<f64>,
}

impl VariationalBatch {
    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let start = (path * self.nodes + node) * self.state_dim;
        &self.y[start..start + self.state_dim]
    }
}

/// Coefficient Jacobians at one evaluation point.
pub(crate) struct Jacobians {
    pub b_x: Vec<f64>,
    pub b_u: Vec<f64>,
    pub s_x: Vec<f64>,
    pub s_u: Vec<f64>,
    pub f_x: Vec<f64>,
    pub f_u: Vec<f64>,
}

impl Jacobians {
    pub fn new(problem: &ValidatedProblem) -> Self {
        let (m, d, mu) = (problem.state_dim(), problem.brownian_dim(), problem.control_dim());
        Jacobians {
            b_x: vec![0.0; m * m],
            b_u: vec![0.0; m * mu],
            s_x: vec![0.0; m * d * m],
            s_u: vec![0.0; m * d * mu],
            f_x: vec![0.0; m],
            f_u: vec![0.0; mu],
        }
    }

    pub fn eval(&mut self, problem: &ValidatedProblem, pt: &[f64]) {
        problem.drift_dx(pt, &mut self.b_x);
        problem.drift_du(pt, &mut self.b_u);
        problem.diffusion_dx(pt, &mut self.s_x);
        problem.diffusion_du(pt, &mut self.s_u);
        problem.running_dx(pt, &mut self.f_x);
        problem.running_du(pt, &mut self.f_u);
    }
}

/// Simulates the variational state along `base` in direction `direction`.
pub fn simulate_variational(
    problem: &ValidatedProblem,
    base: &StateBatch,
    direction: &ControlProcess,
    wb: &BrownianBatch,
) -> Result<VariationalBatch, ForwardError> {
    check_alignment(problem, wb)?;
    check_control(problem, direction)?;
    if base.paths() != wb.paths() {
        return Err(ForwardError::Misaligned("state batch and Brownian batch path counts differ".into()));
    }
    let grid = problem.grid();
    let (m, d, mu, nodes, dt) = (
        problem.state_dim(),
        problem.brownian_dim(),
        problem.control_dim(),
        grid.nodes(),
        grid.dt(),
    );
    let mut y = vec![0.0; wb.paths() * nodes * m];
    if !direction.is_zero() {
        parallel::try_for_each_slot(&mut y, nodes * m, |path, slot| {
            let mut pt = vec![0.0; problem.point_len()];
            let mut jac = Jacobians::new(problem);
            for k in 0..grid.steps() {
                problem.fill_point(&mut pt, grid.time(k), base.state(path, k), base.control(path, k));
                jac.eval(problem, &pt);
                let v = direction.value(k);
                let dw = wb.increment(path, k);
                let (head, tail) = slot.split_at_mut((k + 1) * m);
                let yk = &head[k * m..];
                for i in 0..m {
                    let mut drift = 0.0;
                    for c in 0..m {
                        drift += jac.b_x[i * m + c] * yk[c];
                    }
                    for l in 0..mu {
                        drift += jac.b_u[i * mu + l] * v[l];
                    }
                    let mut noise = 0.0;
                    for j in 0..d {
                        let r = i * d + j;
                        let mut s = 0.0;
                        for c in 0..m {
                            s += jac.s_x[r * m + c] * yk[c];
                        }
                        for l in 0..mu {
                            s += jac.s_u[r * mu + l] * v[l];
                        }
                        noise += s * dw[j];
                    }
                    tail[i] = yk[i] + drift * dt + noise;
                }
                if tail[..m].iter().any(|v| !v.is_finite()) {
                    return Err(ForwardError::NonFinite { path, step: k });
                }
            }
            Ok(())
        })?;
    }
    Ok(VariationalBatch {
        paths: wb.paths(),
        nodes,
        state_dim: m,
        y,
    })
}

/// Per-path first-order expansion
/// `Σᵢ Ψ_{yᵢ}·y(tᵢ) + Σ_k (f_x·y_k + f_u·v_k)Δt` of the cost along `base`
/// in direction `direction`.
pub fn expansion_samples(
    problem: &ValidatedProblem,
    base: &StateBatch,
    direction: &ControlProcess,
    vb: &VariationalBatch,
) -> Result<Vec<f64>, ForwardError> {
    let terminal = problem.terminal();
    if !terminal.is_differentiable() {
        return Err(ForwardError::NonSmoothTerminal);
    }
    let grid = problem.grid();
    let (m, mu, dt) = (problem.state_dim(), problem.control_dim(), grid.dt());
    let cps = grid.checkpoints();
    Ok(parallel::map(base.paths(), |path| {
        let mut pt = vec![0.0; problem.point_len()];
        let mut fx = vec![0.0; m];
        let mut fu = vec![0.0; mu];
        let mut total = 0.0;
        for k in 0..grid.steps() {
            problem.fill_point(&mut pt, grid.time(k), base.state(path, k), base.control(path, k));
            problem.running_dx(&pt, &mut fx);
            problem.running_du(&pt, &mut fu);
            let yk = vb.state(path, k);
            let v = direction.value(k);
            let s: f64 = fx.iter().zip(yk).map(|(a, b)| a * b).sum::<f64>()
                + fu.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            total += s * dt;
        }
        let mut y = vec![0.0; cps.len() * m];
        let mut g = vec![0.0; cps.len() * m];
        base.checkpoint_states(path, cps, &mut y);
        terminal.gradient(&y, &mut g);
        for (i, &node) in cps.iter().enumerate() {
            let yi = vb.state(path, node);
            total += (0..m).map(|c| g[i * m + c] * yi[c]).sum::<f64>();
        }
        total
    }))
}

/// One row of a [`GateauxReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateauxEntry {
    pub rho: f64,
    /// `(J(ū+ρu) − J(ū))/ρ` with common random numbers.
    pub difference_quotient: Estimate,
    /// Mean of the pathwise gap (difference quotient − expansion).
    pub gap: Estimate,
}

/// Comparison of difference quotients with the first-order expansion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateauxReport {
    pub expansion: Estimate,
    pub entries: Vec<GateauxEntry>,
    /// Least-squares slope of `ln|gap|` against `ln ρ`; `None` when some gap
    /// is exactly zero or fewer than two `ρ` are given.
    pub order: Option<f64>,
}

/// Gateaux check: for every `ρ`, compares the common-random-number difference
/// quotient of the cost with the first-order expansion.
pub fn gateaux_check(
    problem: &ValidatedProblem,
    base: &ControlProcess,
    direction: &ControlProcess,
    rhos: &[f64],
    wb: &BrownianBatch,
) -> Result<GateauxReport, ForwardError> {
    let ubox = problem.control_box();
    for &rho in rhos {
        if !base.axpy(rho, direction).in_box(ubox) {
            return Err(ForwardError::OutOfBox { rho });
        }
    }
    let sb = simulate_state(problem, base, wb)?;
    let vb = simulate_variational(problem, &sb, direction, wb)?;
    let expansion = expansion_samples(problem, &sb, direction, &vb)?;
    let base_costs = path_costs(problem, &sb);
    let mut entries = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let sr = simulate_state(problem, &base.axpy(rho, direction), wb)?;
        let costs = path_costs(problem, &sr);
        let quotient: Vec<f64> = costs.iter().zip(&base_costs).map(|(a, b)| (a - b) / rho).collect();
        let gap: Vec<f64> = quotient.iter().zip(&expansion).map(|(q, e)| q - e).collect();
        entries.push(GateauxEntry {
            rho,
            difference_quotient: Estimate::from_samples(&quotient),
            gap: Estimate::from_samples(&gap),
        });
    }
    let gaps: Vec<f64> = entries.iter().map(|e| e.gap.mean.abs()).collect();
    let order = (entries.len() >= 2 && gaps.iter().all(|&g| g > 0.0)).then(|| {
        let rs: Vec<f64> = entries.iter().map(|e| e.rho).collect();
        log_log_slope(&rs, &gaps)
    });
    Ok(GateauxReport {
        expansion: Estimate::from_samples(&expansion),
        entries,
        order,
    })
}

/// Writes the path dump body: one row per (path, node) with the state and
/// the control of the step starting at that node (empty on the last node).
pub fn write_paths_csv(
    out: &mut dyn Write,
    problem: &ValidatedProblem,
    sb: &StateBatch,
    max_paths: usize,
) -> io::Result<()> {
    let grid = problem.grid();
    let (m, mu) = (problem.state_dim(), problem.control_dim());
    let mut header = vec!["path".to_string(), "node".into(), "time".into()];
    header.extend((1..=m).map(|k| format!("x{k}")));
    header.extend((1..=mu).map(|j| format!("u{j}")));
    writeln!(out, "{}", header.join(","))?;
    for path in 0..sb.paths().min(max_paths) {
        for node in 0..grid.nodes() {
            write!(out, "{path},{node},{}", grid.time(node))?;
            for v in sb.state(path, node) {
                write!(out, ",{v}")?;
            }
            if node < grid.steps() {
                for v in sb.control(path, node) {
                    write!(out, ",{v}")?;
                }
            } else {
                for _ in 0..mu {
                    write!(out, ",")?;
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
