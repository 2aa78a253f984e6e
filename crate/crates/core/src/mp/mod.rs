//! Hamiltonian evaluation, first-order (maximum principle) and sufficiency
//! checks, the control optimizer and the exhaustive tree oracle.

mod optimize;
mod oracle;

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optimize::{
    minimize, optimize_control, optimize_control_with, CostObjective, Method, Objective, ObjectiveGradient,
    OptimizeResult, OptimizerSpec, StepRule, TraceEntry,
};
pub use oracle::{brute_force_oracle, grid_optimality_slack, tiny_instance, tree_cost, OracleResult, MAX_ORACLE_LEVELS, MAX_ORACLE_STEPS};

use crate::adjoint::{AdjointBatch, AdjointError};
use crate::forward::{ControlProcess, ForwardError, Jacobians, StateBatch};
use crate::parallel;
use crate::problem::ValidatedProblem;
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MpError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error("oracle: {0}")]
    Oracle(String),
}

/// Evaluator of `H(β⁰,t,x,u,p,q) = bᵀp + Σⱼ(σʲ)ᵀqʲ − β⁰f` and its
/// gradients, with reusable scratch buffers.
pub struct Hamiltonian<'a> {
    problem: &'a ValidatedProblem,
    point: Vec<f64>,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    jac: Jacobians,
}

impl<'a> Hamiltonian<'a> {
    pub fn new(problem: &'a ValidatedProblem) -> Self {
        let (m, d) = (problem.state_dim(), problem.brownian_dim());
        Hamiltonian {
            problem,
            point: vec![0.0; problem.point_len()],
            drift: vec![0.0; m],
            diffusion: vec![0.0; m * d],
            jac: Jacobians::new(problem),
        }
    }

    /// `p` has length `m`; `q` is laid out `[i·d + j]`.
    pub fn value(&mut self, t: f64, x: &[f64], u: &[f64], p: &[f64], q: &[f64], beta0: f64) -> f64 {
        let pr = self.problem;
        pr.fill_point(&mut self.point, t, x, u);
        pr.drift_at(&self.point, &mut self.drift);
        pr.diffusion_at(&self.point, &mut self.diffusion);
        let mut h: f64 = self.drift.iter().zip(p).map(|(b, p)| b * p).sum();
        h += self.diffusion.iter().zip(q).map(|(s, q)| s * q).sum::<f64>();
        if beta0 != 0.0 {
            h -= beta0 * pr.running_at(&self.point);
        }
        h
    }

    /// `∂H/∂u` into `out`.
    #[allow(clippy::too_many_arguments)]
    pub fn grad_u(&mut self, t: f64, x: &[f64], u: &[f64], p: &[f64], q: &[f64], beta0: f64, out: &mut [f64]) {
        let pr = self.problem;
        let (m, d, mu) = (pr.state_dim(), pr.brownian_dim(), pr.control_dim());
        pr.fill_point(&mut self.point, t, x, u);
        self.jac.eval(pr, &self.point);
        let j = &self.jac;
        for (l, o) in out.iter_mut().enumerate().take(mu) {
            let mut h = -beta0 * j.f_u[l];
            for i in 0..m {
                h += j.b_u[i * mu + l] * p[i];
                for c in 0..d {
                    h += j.s_u[(i * d + c) * mu + l] * q[i * d + c];
                }
            }
            *o = h;
        }
    }

    /// `∂H/∂x` into `out`.
    #[allow(clippy::too_many_arguments)]
    pub fn grad_x(&mut self, t: f64, x: &[f64], u: &[f64], p: &[f64], q: &[f64], beta0: f64, out: &mut [f64]) {
        let pr = self.problem;
        let (m, d) = (pr.state_dim(), pr.brownian_dim());
        pr.fill_point(&mut self.point, t, x, u);
        self.jac.eval(pr, &self.point);
        let j = &self.jac;
        for (a, o) in out.iter_mut().enumerate().take(m) {
            let mut h = -beta0 * j.f_x[a];
            for i in 0..m {
                h += j.b_x[i * m + a] * p[i];
                for c in 0..d {
                    h += j.s_x[(i * d + c) * m + a] * q[i * d + c];
                }
            }
            *o = h;
        }
    }
}

/// `H(β⁰,t,x,u,p,q)`.
pub fn hamiltonian(problem: &ValidatedProblem, t: f64, x: &[f64], u: &[f64], p: &[f64], q: &[f64], beta0: f64) -> f64 {
    Hamiltonian::new(problem).value(t, x, u, p, q, beta0)
}

/// `∂H/∂u`.
pub fn hamiltonian_grad_u(
    problem: &ValidatedProblem,
    t: f64,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    q: &[f64],
    beta0: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; problem.control_dim()];
    Hamiltonian::new(problem).grad_u(t, x, u, p, q, beta0, &mut out);
    out
}

/// `∂H/∂x`.
pub fn hamiltonian_grad_x(
    problem: &ValidatedProblem,
    t: f64,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    q: &[f64],
    beta0: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; problem.state_dim()];
    Hamiltonian::new(problem).grad_x(t, x, u, p, q, beta0, &mut out);
    out
}

/// Settings of the first-order check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSpec {
    /// Points per control component in the `v`-grid.
    pub resolution: usize,
    /// Steps sampled per interval (0 checks every step).
    pub times_per_interval: usize,
    /// Pass iff every estimate ≤ `multiplier`·stderr + `abs_tol` + `slack`.
    pub multiplier: f64,
    /// Floating-point floor of the tolerance.
    pub abs_tol: f64,
    /// Deterministic allowance, e.g. for candidates that are only optimal
    /// on a control grid.
    pub slack: f64,
    /// `|E H_u| ≤ multiplier·stderr + flat_tol` on every sampled step marks
    /// an interval as stationary.
    pub flat_tol: f64,
}

impl Default for CheckSpec {
    fn default() -> Self {
        CheckSpec {
            resolution: 11,
            times_per_interval: 8,
            multiplier: 3.0,
            abs_tol: 1e-9,
            slack: 0.0,
            flat_tol: 1e-6,
        }
    }
}

impl CheckSpec {
    pub fn validate(&self) -> Result<(), MpError> {
        if self.times_per_interval == 0 {
            return Err(MpError::Spec("times_per_interval must be ≥ 1".into()));
        }
        if self.resolution < 2 {
            return Err(MpError::Spec(format!("v-grid resolution must be ≥ 2, got {}", self.resolution)));
        }
        for (name, v) in [
            ("multiplier", self.multiplier),
            ("abs_tol", self.abs_tol),
            ("slack", self.slack),
            ("flat_tol", self.flat_tol),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(MpError::Spec(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One `(t, v)` cell of the first-order check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpCell {
    pub interval: usize,
    pub step: usize,
    pub time: f64,
    pub v: Vec<f64>,
    /// Estimate of `E[H_u·(v − ū(t))]`.
    pub estimate: Estimate,
    pub pass: bool,
}

/// Outcome of the first-order check on one interval `(tᵢ₋₁, tᵢ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalVerdict {
    pub interval: usize,
    pub start: f64,
    pub end: f64,
    pub steps_checked: usize,
    pub worst: Estimate,
    pub worst_time: f64,
    pub worst_v: Vec<f64>,
    pub pass: bool,
    /// `H_u` vanishes (statistically) on the interval: the condition is
    /// satisfied by every `v`, so the optimal control is not pinned down.
    pub stationary: bool,
}

/// Result of the first-order (maximum principle) check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpReport {
    pub intervals: Vec<IntervalVerdict>,
    pub cells: Vec<MpCell>,
    pub pass: bool,
    /// The control set is a single point, so the check holds trivially.
    pub vacuous: bool,
    pub running_weight: f64,
    pub spec: CheckSpec,
}

impl MpReport {
    /// The cell at `step` whose `v` is closest to `v`.
    pub fn cell(&self, step: usize, v: &[f64]) -> Option<&MpCell> {
        self.cells.iter().filter(|c| c.step == step).min_by(|a, b| {
            let da: f64 = a.v.iter().zip(v).map(|(x, y)| (x - y).abs()).sum();
            let db: f64 = b.v.iter().zip(v).map(|(x, y)| (x - y).abs()).sum();
            da.total_cmp(&db)
        })
    }

    /// Largest estimate over all cells.
    pub fn worst(&self) -> Option<&IntervalVerdict> {
        self.intervals.iter().max_by(|a, b| a.worst.mean.total_cmp(&b.worst.mean))
    }

    /// Fixed-order text summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str("[first-order check]\n");
        s.push_str(&format!(
            "verdict: {}\nrule: estimate <= {}*stderr + {:e} + slack {:e}\nrunning weight: {}\n",
            if self.pass { "pass" } else { "fail" },
            self.spec.multiplier,
            self.spec.abs_tol,
            self.spec.slack,
            self.running_weight
        ));
        if self.vacuous {
            s.push_str("note: control set is a single point (vacuous)\n");
        }
        for iv in &self.intervals {
            s.push_str(&format!(
                "interval {} ({}, {}): {} worst {:.6e} ± {:.3e} at t = {} v = {:?}{}\n",
                iv.interval + 1,
                iv.start,
                iv.end,
                if iv.pass { "pass" } else { "fail" },
                iv.worst.mean,
                iv.worst.stderr,
                iv.worst_time,
                iv.worst_v,
                if iv.stationary { " [stationary, not unique]" } else { "" }
            ));
        }
        s
    }

    /// CSV body of the per-cell estimates.
    pub fn write_csv(&self, out: &mut dyn Write) -> io::Result<()> {
        let mu = self.cells.first().map_or(0, |c| c.v.len());
        let mut header = vec!["interval".to_string(), "step".into(), "time".into()];
        header.extend((1..=mu).map(|j| format!("v{j}")));
        header.extend(["estimate".into(), "stderr".into(), "pass".into()]);
        writeln!(out, "{}", header.join(","))?;
        for c in &self.cells {
            write!(out, "{},{},{}", c.interval + 1, c.step, c.time)?;
            for v in &c.v {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{},{},{}", c.estimate.mean, c.estimate.stderr, u8::from(c.pass))?;
        }
        Ok(())
    }
}

/// Steps of interval `i` used by the checks: checkpoint nodes are excluded,
/// and at most `per_interval` evenly spaced steps are kept.
pub(crate) fn sampled_steps(problem: &ValidatedProblem, interval: usize, per_interval: usize) -> Vec<usize> {
    let grid = problem.grid();
    let all: Vec<usize> = grid
        .interval_steps(interval)
        .filter(|&k| grid.checkpoint_at(k).is_none())
        .collect();
    if per_interval == 0 || all.len() <= per_interval {
        return all;
    }
    if per_interval == 1 {
        return vec![all[all.len() / 2]];
    }
    (0..per_interval)
        .map(|j| all[(j * (all.len() - 1) + (per_interval - 1) / 2) / (per_interval - 1)])
        .collect()
}

fn check_inputs(
    problem: &ValidatedProblem,
    candidate: &ControlProcess,
    ab: &AdjointBatch,
    sb: &StateBatch,
) -> Result<(), MpError> {
    let grid = problem.grid();
    if candidate.steps() != grid.steps() || candidate.dim() != problem.control_dim() {
        return Err(ForwardError::Misaligned("candidate control does not match the grid".into()).into());
    }
    if ab.paths() != sb.paths() || ab.nodes() != grid.nodes() || sb.nodes() != grid.nodes() {
        return Err(ForwardError::Misaligned("adjoint and state batches differ".into()).into());
    }
    Ok(())
}

/// Per-path `H_u` samples `[path][l]` on step `k`, evaluated with the
/// unprojected adjoint samples `p(t_{k+1})` and `q` targets.
///
/// Their conditional expectations given `F_k` are the fitted continuation
/// and `q`, so the mean estimates the same `E[H_u]` for controls that do not
/// look ahead, while the spread carries the sampling noise of the adjoint
/// averages; the fitted values alone would understate the standard error.
pub(crate) fn hu_samples(problem: &ValidatedProblem, ab: &AdjointBatch, sb: &StateBatch, step: usize) -> Vec<f64> {
    let mu = problem.control_dim();
    let t = problem.grid().time(step);
    let beta0 = ab.running_weight();
    let mut out = vec![0.0; sb.paths() * mu];
    parallel::for_each_slot(&mut out, mu, |path, o| {
        let mut h = Hamiltonian::new(problem);
        h.grad_u(t, sb.state(path, step), sb.control(path, step), ab.p_sample(path, step + 1), ab.q_sample(path, step), beta0, o);
    });
    out
}

/// Checks `E[H_u(X̄,ū,p,q)·(v − ū(t))] ≤ 0` on a `v`-grid at sampled times of
/// every interval, with a statistical tolerance.
pub fn check_necessary(
    problem: &ValidatedProblem,
    candidate: &ControlProcess,
    ab: &AdjointBatch,
    sb: &StateBatch,
    spec: &CheckSpec,
) -> Result<MpReport, MpError> {
    spec.validate()?;
    check_inputs(problem, candidate, ab, sb)?;
    let grid = problem.grid();
    let ubox = problem.control_box();
    let mu = problem.control_dim();
    let vgrid = ubox.grid(spec.resolution);
    let paths = sb.paths();
    let mut cells = Vec::new();
    let mut intervals = Vec::new();
    for i in 0..grid.checkpoint_count() {
        let range = grid.interval_steps(i);
        let steps = sampled_steps(problem, i, spec.times_per_interval);
        let mut worst: Option<(Estimate, f64, Vec<f64>)> = None;
        let mut pass = true;
        let mut stationary = !steps.is_empty();
        for &k in &steps {
            let hu = hu_samples(problem, ab, sb, k);
            let ubar = candidate.value(k);
            for l in 0..mu {
                let col: Vec<f64> = (0..paths).map(|p| hu[p * mu + l]).collect();
                let e = Estimate::from_samples(&col);
                if e.mean.abs() > spec.multiplier * e.stderr + spec.flat_tol {
                    stationary = false;
                }
            }
            for v in &vgrid {
                let samples: Vec<f64> = (0..paths)
                    .map(|p| (0..mu).map(|l| hu[p * mu + l] * (v[l] - ubar[l])).sum())
                    .collect();
                let est = Estimate::from_samples(&samples);
                let ok = est.mean <= spec.multiplier * est.stderr + spec.abs_tol + spec.slack;
                pass &= ok;
                if worst.as_ref().is_none_or(|w| est.mean > w.0.mean) {
                    worst = Some((est, grid.time(k), v.clone()));
                }
                cells.push(MpCell {
                    interval: i,
                    step: k,
                    time: grid.time(k),
                    v: v.clone(),
                    estimate: est,
                    pass: ok,
                });
            }
        }
        let (worst, worst_time, worst_v) = worst.unwrap_or((Estimate::exact(0.0), f64::NAN, Vec::new()));
        intervals.push(IntervalVerdict {
            interval: i,
            start: grid.time(range.start),
            end: grid.time(range.end),
            steps_checked: steps.len(),
            worst,
            worst_time,
            worst_v,
            pass,
            stationary,
        });
    }
    Ok(MpReport {
        pass: intervals.iter().all(|iv| iv.pass),
        intervals,
        cells,
        vacuous: ubox.is_point(),
        running_weight: ab.running_weight(),
        spec: *spec,
    })
}

/// Settings of the sampled sufficiency check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SufficiencySpec {
    /// Random pairs for each midpoint test.
    pub pairs: usize,
    /// Half-width (in units of the spread of the realized states, at least
    /// 1) of the box sampled for the terminal convexity test.
    pub half_width: f64,
    pub seed: u64,
    /// Tolerance of the midpoint inequalities.
    pub tol: f64,
    /// `v`-grid and sampled times for the Hamiltonian maximum test.
    pub resolution: usize,
    pub times_per_interval: usize,
    pub multiplier: f64,
}

impl Default for SufficiencySpec {
    fn default() -> Self {
        SufficiencySpec {
            pairs: 10_000,
            half_width: 3.0,
            seed: 0,
            tol: 1e-9,
            resolution: 11,
            times_per_interval: 8,
            multiplier: 3.0,
        }
    }
}

/// One sampled sub-verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledVerdict {
    pub pass: bool,
    pub samples: usize,
    /// Largest violation of the tested inequality (≤ 0 when it holds).
    pub worst_violation: f64,
    /// A violating pair, when one was found.
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
}

/// Result of the sufficiency check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficiencyReport {
    pub terminal_convexity: SampledVerdict,
    pub hamiltonian_concavity: SampledVerdict,
    pub hamiltonian_maximum: SampledVerdict,
    /// True only when all three sub-verdicts pass.
    pub certified: bool,
}

impl SufficiencyReport {
    pub fn conclusion(&self) -> &'static str {
        if self.certified {
            "certified optimal up to sampling"
        } else {
            "sufficiency inconclusive"
        }
    }

    pub fn summary(&self) -> String {
        let line = |name: &str, v: &SampledVerdict| {
            format!(
                "{name}: {} ({} samples, worst violation {:.3e})\n",
                if v.pass { "pass" } else { "fail" },
                v.samples,
                v.worst_violation
            )
        };
        let mut s = String::from("[sufficiency check]\n");
        s.push_str(&line("terminal convexity (sampled)", &self.terminal_convexity));
        s.push_str(&line("hamiltonian concavity (sampled)", &self.hamiltonian_concavity));
        s.push_str(&line("hamiltonian maximum", &self.hamiltonian_maximum));
        s.push_str(&format!("conclusion: {}\n", self.conclusion()));
        s
    }
}

/// Sampled check of the sufficient conditions: convexity of the terminal
/// cost, concavity of the Hamiltonian in `(x, u)` at fixed `(p, q)`, and the
/// Hamiltonian maximum condition in expectation.
pub fn check_sufficient(
    problem: &ValidatedProblem,
    candidate: &ControlProcess,
    ab: &AdjointBatch,
    sb: &StateBatch,
    spec: &SufficiencySpec,
) -> Result<SufficiencyReport, MpError> {
    check_inputs(problem, candidate, ab, sb)?;
    if spec.pairs == 0 || spec.resolution < 2 {
        return Err(MpError::Spec("pairs must be ≥ 1 and resolution ≥ 2".into()));
    }
    let grid = problem.grid();
    let (m, mu) = (problem.state_dim(), problem.control_dim());
    let ubox = problem.control_box();
    let paths = sb.paths();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // (a) Midpoint convexity of the terminal cost around the realized
    // checkpoint states.
    let n = grid.checkpoint_count();
    let width = n * m;
    let mut ys = vec![0.0; paths * width];
    for path in 0..paths {
        sb.checkpoint_states(path, grid.checkpoints(), &mut ys[path * width..(path + 1) * width]);
    }
    let centre: Vec<f64> = (0..width).map(|c| (0..paths).map(|p| ys[p * width + c]).sum::<f64>() / paths as f64).collect();
    let spread: Vec<f64> = (0..width)
        .map(|c| {
            let var = (0..paths).map(|p| (ys[p * width + c] - centre[c]).powi(2)).sum::<f64>() / paths as f64;
            spec.half_width * var.sqrt().max(1.0)
        })
        .collect();
    let terminal = problem.terminal();
    let mut convexity = SampledVerdict {
        pass: true,
        samples: spec.pairs,
        worst_violation: f64::NEG_INFINITY,
        witness: None,
    };
    let mut z = vec![0.0; width];
    let mut z2 = vec![0.0; width];
    let mut mid = vec![0.0; width];
    for _ in 0..spec.pairs {
        for c in 0..width {
            z[c] = centre[c] + spread[c] * rng.random_range(-1.0..=1.0);
            z2[c] = centre[c] + spread[c] * rng.random_range(-1.0..=1.0);
            mid[c] = 0.5 * (z[c] + z2[c]);
        }
        let viol = terminal.value(&mid) - 0.5 * (terminal.value(&z) + terminal.value(&z2));
        let scale = 1.0 + terminal.value(&z).abs().max(terminal.value(&z2).abs());
        if viol > convexity.worst_violation {
            convexity.worst_violation = viol;
        }
        if viol > spec.tol * scale {
            convexity.pass = false;
            convexity.witness.get_or_insert_with(|| (z.clone(), z2.clone()));
        }
    }

    // (b) Midpoint concavity of H in (x, u) at fixed (p, q) along the
    // realized paths.
    let beta0 = ab.running_weight();
    let mut concavity = SampledVerdict {
        pass: true,
        samples: spec.pairs,
        worst_violation: f64::NEG_INFINITY,
        witness: None,
    };
    let mut h = Hamiltonian::new(problem);
    let (mut u1, mut u2, mut um, mut xm) = (vec![0.0; mu], vec![0.0; mu], vec![0.0; mu], vec![0.0; m]);
    for _ in 0..spec.pairs {
        let k = rng.random_range(0..grid.steps());
        let (a, b) = (rng.random_range(0..paths), rng.random_range(0..paths));
        let t = grid.time(k);
        let (x1, x2) = (sb.state(a, k), sb.state(b, k));
        for l in 0..mu {
            u1[l] = rng.random_range(ubox.lower()[l]..=ubox.upper()[l]);
            u2[l] = rng.random_range(ubox.lower()[l]..=ubox.upper()[l]);
            um[l] = 0.5 * (u1[l] + u2[l]);
        }
        for c in 0..m {
            xm[c] = 0.5 * (x1[c] + x2[c]);
        }
        let (p, q) = (ab.p_next(a, k), ab.q(a, k));
        let h1 = h.value(t, x1, &u1, p, q, beta0);
        let h2 = h.value(t, x2, &u2, p, q, beta0);
        let hm = h.value(t, &xm, &um, p, q, beta0);
        let viol = 0.5 * (h1 + h2) - hm;
        if viol > concavity.worst_violation {
            concavity.worst_violation = viol;
        }
        if viol > spec.tol * (1.0 + h1.abs().max(h2.abs())) {
            concavity.pass = false;
            if concavity.witness.is_none() {
                let mut w1 = x1.to_vec();
                w1.extend_from_slice(&u1);
                let mut w2 = x2.to_vec();
                w2.extend_from_slice(&u2);
                concavity.witness = Some((w1, w2));
            }
        }
    }

    // (c) Hamiltonian maximum: E[H(X̄,v,p,q)] ≤ E[H(X̄,ū,p,q)] on a v-grid.
    let vgrid = ubox.grid(spec.resolution);
    let mut maximum = SampledVerdict {
        pass: true,
        samples: 0,
        worst_violation: f64::NEG_INFINITY,
        witness: None,
    };
    for i in 0..n {
        for k in sampled_steps(problem, i, spec.times_per_interval) {
            let t = grid.time(k);
            let ubar = candidate.value(k);
            let base: Vec<f64> = parallel::map(paths, |path| {
                Hamiltonian::new(problem).value(t, sb.state(path, k), ubar, ab.p_next(path, k), ab.q(path, k), beta0)
            });
            for v in &vgrid {
                let diff: Vec<f64> = parallel::map(paths, |path| {
                    Hamiltonian::new(problem).value(t, sb.state(path, k), v, ab.p_next(path, k), ab.q(path, k), beta0)
                        - base[path]
                });
                let est = Estimate::from_samples(&diff);
                maximum.samples += 1;
                let viol = est.mean - spec.multiplier * est.stderr;
                if viol > maximum.worst_violation {
                    maximum.worst_violation = viol;
                }
                if viol > spec.tol {
                    maximum.pass = false;
                    maximum.witness.get_or_insert_with(|| (vec![t], v.clone()));
                }
            }
        }
    }
    Ok(SufficiencyReport {
        certified: convexity.pass && concavity.pass && maximum.pass,
        terminal_convexity: convexity,
        hamiltonian_concavity: concavity,
        hamiltonian_maximum: maximum,
    })
}

#[cfg(test)]
mod tests;
