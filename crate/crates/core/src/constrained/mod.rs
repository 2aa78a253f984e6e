//! Expectation constraints at checkpoints: the Ekeland-penalized composite
//! cost, multiplier extraction, the staged solver and the multiplier-weighted
//! first-order check.

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adjoint::{hamiltonian_gradient, solve_adjoint, AdjointBatch, AdjointError, AdjointWeights};
use crate::forward::{path_costs, simulate_state, BrownianBatch, ControlProcess, ForwardError, StateBatch};
use crate::mp::{
    check_necessary, minimize, CheckSpec, Method, MpError, MpReport, Objective, ObjectiveGradient, OptimizerSpec,
};
use crate::problem::{ConstraintFunction, ProblemError, TerminalCost, ValidatedConstraints, ValidatedProblem};
use crate::regression::RegressionSpec;
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConstrainedError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error(transparent)]
    Mp(#[from] MpError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error("invalid multipliers: {0}")]
    Multipliers(String),
    #[error("perturbed cost vanishes: the control is feasible and at least θ below the reference")]
    Degenerate,
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<ConstrainedError>,
    },
}

/// Signed multipliers: `cost ≥ 0` weights the cost functional, and
/// `slots[j]` weights constraint slot `j` with the sign of its side (`≥ 0`
/// for upper bounds, `≤ 0` for lower bounds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub cost: f64,
    pub slots: Vec<f64>,
}

impl Multipliers {
    /// `(1, 0, …, 0)`.
    pub fn unconstrained(slots: usize) -> Self {
        Multipliers {
            cost: 1.0,
            slots: vec![0.0; slots],
        }
    }

    /// `[cost, slot₁, …]`.
    pub fn to_vec(&self) -> Vec<f64> {
        std::iter::once(self.cost).chain(self.slots.iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|b| b * b).sum::<f64>().sqrt()
    }

    /// Unit-sphere identity (to `1e-12`), `cost ≥ 0`, and the sign of every
    /// slot matching its side.
    pub fn validate(&self, constraints: &ValidatedConstraints) -> Result<(), ConstrainedError> {
        if self.slots.len() != constraints.slot_count() {
            return Err(ConstrainedError::Multipliers(format!(
                "{} slot multipliers for {} constraint slots",
                self.slots.len(),
                constraints.slot_count()
            )));
        }
        if self.to_vec().iter().any(|b| !b.is_finite()) {
            return Err(ConstrainedError::Multipliers("non-finite multiplier".into()));
        }
        if (self.norm() - 1.0).abs() > 1e-12 {
            return Err(ConstrainedError::Multipliers(format!("norm is {}, not 1", self.norm())));
        }
        if self.cost < 0.0 {
            return Err(ConstrainedError::Multipliers(format!("cost multiplier {} is negative", self.cost)));
        }
        for (j, (b, slot)) in self.slots.iter().zip(&constraints.slots).enumerate() {
            if b * slot.sign() < 0.0 {
                return Err(ConstrainedError::Multipliers(format!(
                    "slot {} ({:?} bound) has multiplier {b} of the wrong sign",
                    j + 1,
                    slot.side
                )));
            }
        }
        Ok(())
    }

    /// `Σⱼ |βʲ|·(bound slack)` at the extremal admissible bound values:
    /// zero under complementary slackness, positive when a multiplier sits
    /// on a slack constraint.
    pub fn complementarity(&self, constraints: &ValidatedConstraints, values: &[Estimate]) -> f64 {
        self.slots
            .iter()
            .zip(&constraints.slots)
            .map(|(b, slot)| -b.abs() * slot.margin(values[slot.constraint].mean))
            .sum()
    }
}

/// Decreasing penalty levels `θ_k = θ₀·decayᵏ`, `k < stages`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkelandSchedule {
    pub theta0: f64,
    pub decay: f64,
    pub stages: usize,
}

impl Default for EkelandSchedule {
    fn default() -> Self {
        EkelandSchedule {
            theta0: 1.0,
            decay: 0.5,
            stages: 8,
        }
    }
}

impl EkelandSchedule {
    pub fn validate(&self) -> Result<(), ConstrainedError> {
        if !(self.theta0 > 0.0) || !self.theta0.is_finite() {
            return Err(ConstrainedError::Spec(format!("theta0 must be positive, got {}", self.theta0)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(ConstrainedError::Spec(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        if self.stages == 0 {
            return Err(ConstrainedError::Spec("at least one stage is required".into()));
        }
        Ok(())
    }

    pub fn thetas(&self) -> Vec<f64> {
        (0..self.stages).map(|k| self.theta0 * self.decay.powi(k as i32)).collect()
    }
}

/// Reference value `Ĵ` subtracted from the cost in the composite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Fixed(f64),
    /// Cost of the initial control, lowered to every feasible stage result
    /// with a smaller sampled cost.
    BestFeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstrainedSpec {
    pub schedule: EkelandSchedule,
    pub reference: Reference,
    /// Softplus width as a fraction of the stage's `θ`.
    pub smoothing: f64,
    /// Maximum proximal re-anchorings per stage.
    pub max_anchor_updates: usize,
    /// Stop re-anchoring once `d̃(u, anchor)` falls below this value.
    pub anchor_tolerance: f64,
    pub optimizer: OptimizerSpec,
    pub regression: RegressionSpec,
    pub check: CheckSpec,
    /// Final `β⁰` at or below this value flags constraint-dominated
    /// multipliers.
    pub dominance_threshold: f64,
}

impl Default for ConstrainedSpec {
    fn default() -> Self {
        ConstrainedSpec {
            schedule: EkelandSchedule::default(),
            reference: Reference::BestFeasible,
            smoothing: 1e-3,
            max_anchor_updates: 12,
            anchor_tolerance: 1e-12,
            optimizer: OptimizerSpec {
                method: Method::ProjectedGradient,
                tolerance: 1e-9,
                max_iterations: 60,
                paths: 1_000,
                ..OptimizerSpec::default()
            },
            regression: RegressionSpec { degree: 1, ridge: 1e-8 },
            check: CheckSpec {
                abs_tol: 1e-6,
                ..CheckSpec::default()
            },
            dominance_threshold: 1e-3,
        }
    }
}

/// `d̃(u₁, u₂) = ∫|u₁(t) − u₂(t)|²dt` on the grid (no square root).
pub fn metric_d(u1: &ControlProcess, u2: &ControlProcess, dt: f64) -> Result<f64, ConstrainedError> {
    if u1.steps() != u2.steps() || u1.dim() != u2.dim() {
        return Err(ForwardError::Misaligned("controls live on different grids".into()).into());
    }
    Ok(u1.minus(u2).squared_norm(dt))
}

/// `β⁰Ψ + Σⱼ βʲφⱼ` on the checkpoint states.
#[derive(Debug, Clone)]
pub struct WeightedTerminal {
    cost_weight: f64,
    cost: Arc<dyn TerminalCost>,
    terms: Vec<(f64, ConstraintFunction)>,
    adapted: Vec<bool>,
    arity: usize,
}

impl WeightedTerminal {
    /// Weights follow the slots of `constraints`; both sides of a two-sided
    /// constraint accumulate onto the same function.
    pub fn new(problem: &ValidatedProblem, constraints: &ValidatedConstraints, beta: &Multipliers) -> Self {
        let mut weights = vec![0.0; constraints.functions.len()];
        for (b, slot) in beta.slots.iter().zip(&constraints.slots) {
            weights[slot.constraint] += b;
        }
        let terms: Vec<(f64, ConstraintFunction)> = weights
            .into_iter()
            .zip(&constraints.functions)
            .filter(|(w, _)| *w != 0.0)
            .map(|(w, f)| (w, f.clone()))
            .collect();
        let m = problem.state_dim();
        let n = problem.grid().checkpoint_count();
        let cost = problem.terminal().clone();
        let adapted = (0..n)
            .map(|i| {
                let cost_ok = beta.cost == 0.0 || cost.is_zero() || cost.adapted_gradient(i);
                cost_ok
                    && terms.iter().all(|(_, f)| {
                        (i * m..(i + 1) * m).all(|c| {
                            f.expr
                                .diff(c, problem.terminal_vars())
                                .map(|d| d.free_vars().iter().all(|&v| v < (i + 1) * m))
                                .unwrap_or(false)
                        })
                    })
            })
            .collect();
        WeightedTerminal {
            cost_weight: beta.cost,
            cost,
            terms,
            adapted,
            arity: n * m,
        }
    }
}

impl TerminalCost for WeightedTerminal {
    fn arity(&self) -> usize {
        self.arity
    }

    fn value(&self, y: &[f64]) -> f64 {
        let base = if self.cost_weight == 0.0 { 0.0 } else { self.cost_weight * self.cost.value(y) };
        base + self.terms.iter().map(|(w, f)| w * f.compiled.eval(y)).sum::<f64>()
    }

    fn is_differentiable(&self) -> bool {
        self.cost_weight == 0.0 || self.cost.is_zero() || self.cost.is_differentiable()
    }

    fn gradient(&self, y: &[f64], out: &mut [f64]) {
        if self.cost_weight == 0.0 || self.cost.is_zero() {
            out.iter_mut().for_each(|o| *o = 0.0);
        } else {
            self.cost.gradient(y, out);
            out.iter_mut().for_each(|o| *o *= self.cost_weight);
        }
        for (w, f) in &self.terms {
            for (o, g) in out.iter_mut().zip(&f.grad) {
                *o += w * g.eval(y);
            }
        }
    }

    fn adapted_gradient(&self, checkpoint: usize) -> bool {
        self.adapted.get(checkpoint).copied().unwrap_or(false)
    }

    fn is_zero(&self) -> bool {
        (self.cost_weight == 0.0 || self.cost.is_zero()) && self.terms.is_empty()
    }

    fn describe(&self) -> String {
        let mut s = format!("{}·[{}]", self.cost_weight, self.cost.describe());
        for (w, f) in &self.terms {
            s.push_str(&format!(" + {w}·[{:?}]", f.expr));
        }
        s
    }
}

/// Adjoint weights `(β⁰, β⁰Ψ + Σβʲφⱼ)` for the multiplier-weighted adjoint.
pub fn weighted_adjoint_weights(
    problem: &ValidatedProblem,
    constraints: &ValidatedConstraints,
    beta: &Multipliers,
) -> AdjointWeights {
    AdjointWeights {
        running: beta.cost,
        terminal: Arc::new(WeightedTerminal::new(problem, constraints, beta)),
    }
}

/// Per-path constraint function values `[path][constraint]`.
fn constraint_samples(problem: &ValidatedProblem, constraints: &ValidatedConstraints, sb: &StateBatch) -> Vec<f64> {
    let grid = problem.grid();
    let m = problem.state_dim();
    let nc = constraints.functions.len();
    let mut out = vec![0.0; sb.paths() * nc];
    crate::parallel::for_each_slot(&mut out, nc, |path, row| {
        let mut y = vec![0.0; grid.checkpoint_count() * m];
        sb.checkpoint_states(path, grid.checkpoints(), &mut y);
        for (o, f) in row.iter_mut().zip(&constraints.functions) {
            *o = f.compiled.eval(&y);
        }
    });
    out
}

/// Sampled cost and constraint expectations at one control.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub cost: Estimate,
    /// `E φⱼ`, one per constraint.
    pub constraints: Vec<Estimate>,
    /// Violation per slot (negative when slack).
    pub margins: Vec<f64>,
    #[serde(skip)]
    cost_samples: Vec<f64>,
    #[serde(skip)]
    constraint_samples: Vec<f64>,
}

impl Evaluation {
    pub fn is_feasible(&self) -> bool {
        self.margins.iter().all(|&m| m <= 0.0)
    }
}

pub fn evaluate(
    problem: &ValidatedProblem,
    constraints: &ValidatedConstraints,
    sb: &StateBatch,
) -> Evaluation {
    let cost_samples = path_costs(problem, sb);
    let cs = constraint_samples(problem, constraints, sb);
    let nc = constraints.functions.len();
    let values: Vec<Estimate> = (0..nc)
        .map(|j| Estimate::from_samples(&cs.iter().skip(j).step_by(nc.max(1)).copied().collect::<Vec<_>>()))
        .collect();
    Evaluation {
        cost: Estimate::from_samples(&cost_samples),
        margins: constraints.slots.iter().map(|s| s.margin(values[s.constraint].mean)).collect(),
        constraints: values,
        cost_samples,
        constraint_samples: cs,
    }
}

/// `(J(u) − Ĵ + θ)` and the slot margins: the arguments of the positive
/// parts in the composite.
fn composite_terms(eval: &Evaluation, theta: f64, reference: f64) -> (f64, &[f64]) {
    (eval.cost.mean - reference + theta, &eval.margins)
}

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// `J^θ(u) = √([(J(u) − Ĵ + θ)⁺]² + Σⱼ[marginⱼ⁺]²)` plus `√θ·d̃(anchor, u)`
/// when an anchor is given, with a delta-method standard error.
#[allow(clippy::too_many_arguments)]
pub fn perturbed_cost(
    problem: &ValidatedProblem,
    constraints: &ValidatedConstraints,
    u: &ControlProcess,
    theta: f64,
    reference: f64,
    anchor: Option<&ControlProcess>,
    wb: &BrownianBatch,
) -> Result<Estimate, ConstrainedError> {
    if !(theta > 0.0) {
        return Err(ConstrainedError::Spec(format!("θ must be positive, got {theta}")));
    }
    let sb = simulate_state(problem, u, wb)?;
    let eval = evaluate(problem, constraints, &sb);
    let (a, margins) = composite_terms(&eval, theta, reference);
    let value = (pos(a).powi(2) + margins.iter().map(|m| pos(*m).powi(2)).sum::<f64>()).sqrt();
    let stderr = if value > 0.0 {
        let nc = constraints.functions.len();
        let lin: Vec<f64> = (0..sb.paths())
            .map(|p| {
                let mut z = pos(a) * eval.cost_samples[p];
                for (slot, m) in constraints.slots.iter().zip(margins) {
                    z += pos(*m) * slot.sign() * eval.constraint_samples[p * nc + slot.constraint];
                }
                z / value
            })
            .collect();
        Estimate::from_samples(&lin).stderr
    } else {
        0.0
    };
    let prox = match anchor {
        Some(anchor) => theta.sqrt() * metric_d(anchor, u, problem.grid().dt())?,
        None => 0.0,
    };
    Ok(Estimate {
        mean: value + prox,
        stderr,
        paths: sb.paths(),
    })
}

/// `β^{0,θ} = (J − Ĵ + θ)⁺/J^θ`, `β^{j,θ} = ±marginⱼ⁺/J^θ` (sign of the
/// slot's side), from an evaluation at `u^θ`.
pub fn extract_multipliers(
    eval: &Evaluation,
    constraints: &ValidatedConstraints,
    theta: f64,
    reference: f64,
) -> Result<Multipliers, ConstrainedError> {
    let (a, margins) = composite_terms(eval, theta, reference);
    let value = (pos(a).powi(2) + margins.iter().map(|m| pos(*m).powi(2)).sum::<f64>()).sqrt();
    if value == 0.0 {
        return Err(ConstrainedError::Degenerate);
    }
    let mut beta = Multipliers {
        cost: pos(a) / value,
        slots: constraints
            .slots
            .iter()
            .zip(margins)
            .map(|(s, m)| s.sign() * pos(*m) / value)
            .collect(),
    };
    // Renormalize so the identity holds to rounding.
    let n = beta.norm();
    beta.cost /= n;
    beta.slots.iter_mut().for_each(|b| *b /= n);
    Ok(beta)
}

/// `w·ln(1 + e^{x/w})` and its derivative.
fn softplus(x: f64, width: f64) -> (f64, f64) {
    let z = x / width;
    if z > 30.0 {
        (x, 1.0)
    } else if z < -30.0 {
        (width * z.exp(), z.exp())
    } else {
        (width * z.exp().ln_1p(), 1.0 / (1.0 + (-z).exp()))
    }
}

/// The smoothed stage objective `√(s(a)² + Σ s(mⱼ)²) + √θ·d̃(anchor, u)`.
struct StageObjective<'a> {
    problem: &'a ValidatedProblem,
    constraints: &'a ValidatedConstraints,
    wb: &'a BrownianBatch,
    theta: f64,
    reference: f64,
    width: f64,
    anchor: ControlProcess,
}

impl StageObjective<'_> {
    /// Smoothed composite, its chain-rule weights `(c₀, c_slots)` and the
    /// state batch.
    fn smoothed(&self, u: &ControlProcess) -> Result<(f64, f64, Vec<f64>, StateBatch), MpError> {
        let sb = simulate_state(self.problem, u, self.wb)?;
        let eval = evaluate(self.problem, self.constraints, &sb);
        let (a, margins) = composite_terms(&eval, self.theta, self.reference);
        let (sa, da) = softplus(a, self.width);
        let sm: Vec<(f64, f64)> = margins.iter().map(|&m| softplus(m, self.width)).collect();
        let value = (sa * sa + sm.iter().map(|(s, _)| s * s).sum::<f64>()).sqrt();
        let c0 = sa * da / value;
        let cs = sm.iter().map(|(s, d)| s * d / value).collect();
        Ok((value, c0, cs, sb))
    }

    fn prox(&self, u: &ControlProcess) -> f64 {
        self.theta.sqrt() * u.minus(&self.anchor).squared_norm(self.problem.grid().dt())
    }
}

impl Objective for StageObjective<'_> {
    fn value(&self, u: &ControlProcess) -> Result<f64, MpError> {
        Ok(self.smoothed(u)?.0 + self.prox(u))
    }

    fn gradient(&self, u: &ControlProcess) -> Result<ObjectiveGradient, MpError> {
        let (_, c0, cs, sb) = self.smoothed(u)?;
        let beta = Multipliers {
            cost: c0,
            slots: self.constraints.slots.iter().zip(&cs).map(|(s, c)| s.sign() * c).collect(),
        };
        let weights = weighted_adjoint_weights(self.problem, self.constraints, &beta);
        let g = hamiltonian_gradient(self.problem, &sb, self.wb, Some(&weights))?;
        // ∂(√θ·Δt·Σ|u − anchor|²)/∂u_k in units of −Δt.
        let mut mean = g.mean;
        let push = u.minus(&self.anchor).scaled(-2.0 * self.theta.sqrt());
        for (m, p) in mean.values_mut().iter_mut().zip(push.values()) {
            *m += p;
        }
        Ok(ObjectiveGradient { mean, stderr: g.stderr })
    }
}

/// One Ekeland stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: usize,
    pub theta: f64,
    pub reference: f64,
    pub control: ControlProcess,
    /// Exact (unsmoothed) composite at the stage control.
    pub perturbed: Estimate,
    pub evaluation: Evaluation,
    /// `None` when the composite vanished (degenerate stage).
    pub multipliers: Option<Multipliers>,
    pub distance_to_previous: f64,
    pub anchor_updates: usize,
    /// Worst estimate of the multiplier-weighted first-order check.
    pub mp_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstrainedSolution {
    pub control: ControlProcess,
    pub multipliers: Multipliers,
    pub stages: Vec<StageRecord>,
    #[serde(skip)]
    pub report: Option<MpReport>,
    pub complementarity: f64,
    /// Final `β⁰` at or below the dominance threshold.
    pub constraint_dominated: bool,
    /// No constraint slot: the unconstrained optimizer was run directly.
    pub reduced: bool,
}

impl ConstrainedSolution {
    pub fn summary(&self) -> String {
        let mut s = String::from("[constrained solve]\n");
        s.push_str(&format!("multipliers: {:?}\n", self.multipliers.to_vec()));
        s.push_str(&format!("complementarity: {:.3e}\n", self.complementarity));
        if self.constraint_dominated {
            s.push_str("flag: constraint-dominated multipliers\n");
        }
        if self.reduced {
            s.push_str("note: no constraints; reduced to the unconstrained optimizer\n");
        }
        if let Some(r) = &self.report {
            s.push_str(&format!("first-order check: {}\n", if r.pass { "pass" } else { "fail" }));
        }
        s
    }
}

/// Stage log with columns `stage, theta, reference, cost, cost_stderr,
/// margin_j…, beta_0, beta_j…, d_prev, anchor_updates, mp_gap`.
pub fn write_stage_csv(out: &mut dyn Write, solution: &ConstrainedSolution) -> io::Result<()> {
    let slots = solution.multipliers.slots.len();
    let mut header: Vec<String> = ["stage", "theta", "reference", "cost", "cost_stderr"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=slots).map(|j| format!("margin_{j}")));
    header.push("beta_0".into());
    header.extend((1..=slots).map(|j| format!("beta_{j}")));
    header.extend(["d_prev".into(), "anchor_updates".into(), "mp_gap".into()]);
    writeln!(out, "{}", header.join(","))?;
    for st in &solution.stages {
        write!(out, "{},{},{},{},{}", st.stage, st.theta, st.reference, st.evaluation.cost.mean, st.evaluation.cost.stderr)?;
        for m in &st.evaluation.margins {
            write!(out, ",{m}")?;
        }
        match &st.multipliers {
            Some(b) => {
                for v in b.to_vec() {
                    write!(out, ",{v}")?;
                }
            }
            None => {
                for _ in 0..=slots {
                    write!(out, ",")?;
                }
            }
        }
        write!(out, ",{},{}", st.distance_to_previous, st.anchor_updates)?;
        match st.mp_gap {
            Some(g) => writeln!(out, ",{g}")?,
            None => writeln!(out, ",")?,
        }
    }
    Ok(())
}

/// First-order check with the multiplier-weighted Hamiltonian `H(β⁰,·)`.
/// The multipliers are validated before any Monte Carlo work.
pub fn check_constrained_mp(
    problem: &ValidatedProblem,
    constraints: &ValidatedConstraints,
    candidate: &ControlProcess,
    beta: &Multipliers,
    ab: &AdjointBatch,
    sb: &StateBatch,
    spec: &CheckSpec,
) -> Result<MpReport, ConstrainedError> {
    beta.validate(constraints)?;
    if ab.running_weight() != beta.cost {
        return Err(ConstrainedError::Multipliers(format!(
            "adjoint was solved with running weight {}, multipliers give {}",
            ab.running_weight(),
            beta.cost
        )));
    }
    Ok(check_necessary(problem, candidate, ab, sb, spec)?)
}

/// Runs the Ekeland stages on `spec.optimizer.paths` paths drawn from
/// `seed`, starting from `init`.
pub fn solve_constrained(
    problem: &ValidatedProblem,
    constraints: &ValidatedConstraints,
    init: &ControlProcess,
    spec: &ConstrainedSpec,
    seed: u64,
) -> Result<ConstrainedSolution, ConstrainedError> {
    let wb = BrownianBatch::sample(problem.grid(), problem.brownian_dim(), spec.optimizer.paths, seed);
    solve_constrained_with(problem, constraints, init, spec, &wb)
}

/// [`solve_constrained`] on an explicit Brownian batch.
///
/// Each stage minimizes the smoothed composite plus `√θ·d̃(anchor, ·)` and
/// re-anchors at the result until it no longer moves, so the stage control
/// satisfies the Ekeland inequality `J^θ(u^θ) ≤ J^θ(u) + √θ·d̃(u^θ, u)` up
/// to the optimizer tolerance.
pub fn solve_constrained_with(
    problem: &ValidatedProblem,
    constraints: &ValidatedConstraints,
    init: &ControlProcess,
    spec: &ConstrainedSpec,
    wb: &BrownianBatch,
) -> Result<ConstrainedSolution, ConstrainedError> {
    spec.schedule.validate()?;
    spec.optimizer.validate()?;
    spec.check.validate()?;
    if !(spec.smoothing > 0.0) {
        return Err(ConstrainedError::Spec("smoothing must be positive".into()));
    }
    let dt = problem.grid().dt();

    if constraints.slot_count() == 0 {
        let res = minimize(
            &crate::mp::CostObjective {
                problem,
                wb,
                weights: None,
            },
            problem,
            init,
            &spec.optimizer,
        )?;
        let beta = Multipliers::unconstrained(0);
        let sb = simulate_state(problem, &res.control, wb)?;
        let ab = solve_adjoint(problem, &sb, wb, &spec.regression, None)?;
        let report = check_necessary(problem, &res.control, &ab, &sb, &spec.check)?;
        return Ok(ConstrainedSolution {
            control: res.control,
            multipliers: beta,
            stages: Vec::new(),
            report: Some(report),
            complementarity: 0.0,
            constraint_dominated: false,
            reduced: true,
        });
    }

    let initial_eval = evaluate(problem, constraints, &simulate_state(problem, init, wb)?);
    let mut reference = match spec.reference {
        Reference::Fixed(v) => v,
        Reference::BestFeasible => initial_eval.cost.mean,
    };
    let mut current = init.clone();
    let mut stages = Vec::new();
    let mut last: Option<(Multipliers, MpReport, StateBatch)> = None;
    for (stage, theta) in spec.schedule.thetas().into_iter().enumerate() {
        let wrap = |e: ConstrainedError| ConstrainedError::Stage {
            stage,
            source: Box::new(e),
        };
        let mut objective = StageObjective {
            problem,
            constraints,
            wb,
            theta,
            reference,
            width: spec.smoothing * theta,
            anchor: current.clone(),
        };
        let mut u = current.clone();
        let mut updates = 0;
        loop {
            let res = minimize(&objective, problem, &u, &spec.optimizer).map_err(|e| wrap(e.into()))?;
            let moved = metric_d(&res.control, &objective.anchor, dt)?;
            u = res.control;
            updates += 1;
            if moved <= spec.anchor_tolerance || updates >= spec.max_anchor_updates {
                break;
            }
            objective.anchor = u.clone();
        }
        let sb = simulate_state(problem, &u, wb).map_err(|e| wrap(e.into()))?;
        let evaluation = evaluate(problem, constraints, &sb);
        let perturbed = perturbed_cost(problem, constraints, &u, theta, reference, None, wb).map_err(wrap)?;
        let multipliers = match extract_multipliers(&evaluation, constraints, theta, reference) {
            Ok(b) => Some(b),
            Err(ConstrainedError::Degenerate) => None,
            Err(e) => return Err(wrap(e)),
        };
        let mut mp_gap = None;
        if let Some(beta) = &multipliers {
            let weights = weighted_adjoint_weights(problem, constraints, beta);
            let ab = solve_adjoint(problem, &sb, wb, &spec.regression, Some(&weights)).map_err(|e| wrap(e.into()))?;
            let report =
                check_constrained_mp(problem, constraints, &u, beta, &ab, &sb, &spec.check).map_err(wrap)?;
            mp_gap = report.worst().map(|w| w.worst.mean);
            last = Some((beta.clone(), report, sb));
        }
        stages.push(StageRecord {
            stage,
            theta,
            reference,
            control: u.clone(),
            perturbed,
            distance_to_previous: metric_d(&u, &current, dt)?,
            evaluation: evaluation.clone(),
            multipliers,
            anchor_updates: updates,
            mp_gap,
        });
        if spec.reference == Reference::BestFeasible && evaluation.is_feasible() {
            reference = reference.min(evaluation.cost.mean);
        }
        current = u;
    }
    let (multipliers, report, _) = last.ok_or(ConstrainedError::Degenerate)?;
    let final_eval = &stages.last().expect("at least one stage").evaluation;
    Ok(ConstrainedSolution {
        complementarity: multipliers.complementarity(constraints, &final_eval.constraints),
        constraint_dominated: multipliers.cost <= spec.dominance_threshold,
        control: current,
        multipliers,
        stages,
        report: Some(report),
        reduced: false,
    })
}
