//! Path-dependent costs: restriction to equally spaced checkpoints, the
//! oscillation budget of that restriction, and the discretize → mollify →
//! optimize pipeline.

use serde::{Deserialize, Serialize};

use super::{mollify_error_scan, mollify_problem, probe_lattice, ErrorScan, MollifierSpec, MollifyError};
use crate::expr::{parse_expr, Expr, Func};
use crate::forward::{estimate_cost, simulate_state, BrownianBatch, ControlProcess, StateBatch};
use crate::mp::{optimize_control_with, OptimizerSpec};
use crate::problem::{dynamics_vars, terminal_vars, ProblemSpec, TimeGrid};
use crate::stats::Estimate;

/// How a path functional combines `g(x(t))` over `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathAggregate {
    /// `g(x(T))`.
    Terminal,
    /// `sup_t g(x(t))`.
    Max,
    /// `inf_t g(x(t))`.
    Min,
    /// `(1/T)∫ g(x(t)) dt`.
    Mean,
}

/// A cost on the whole state path, built from an integrand `g` over the
/// state variables (`x1..xm`, or `x` in one dimension) and an aggregate. `g`
/// must be `lipschitz`-Lipschitz in the sup norm; the constant is declared,
/// not verified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathFunctionalSpec {
    pub aggregate: PathAggregate,
    pub integrand: String,
    pub lipschitz: f64,
}

/// Restriction of a path functional to `n` equally spaced checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedFunctional {
    pub grid: TimeGrid,
    /// Cost over the checkpoint variables `y1..yn`.
    pub expr: Expr,
    pub text: String,
    /// Whether the restriction equals the path functional on every path.
    pub exact: bool,
    pub lipschitz: f64,
}

/// Replaces the path functional by its values at `tⱼ = jT/n`: `g(y_n)`,
/// `max_j g(y_j)`, `min_j g(y_j)` or `(1/n)Σ_j g(y_j)`. The checkpoints must
/// fall on nodes of `grid`.
pub fn discretize_path_functional(
    pf: &PathFunctionalSpec,
    n: usize,
    grid: &TimeGrid,
    state_dim: usize,
) -> Result<DiscretizedFunctional, MollifyError> {
    if !(pf.lipschitz > 0.0 && pf.lipschitz.is_finite()) {
        return Err(MollifyError::Spec(format!("Lipschitz constant must be positive, got {}", pf.lipschitz)));
    }
    if n == 0 || !grid.steps().is_multiple_of(n) {
        return Err(MollifyError::Spec(format!(
            "{n} checkpoints do not divide the {} steps of the grid",
            grid.steps()
        )));
    }
    let m = state_dim;
    let horizon = grid.horizon();
    let times: Vec<f64> = (1..=n).map(|j| horizon * j as f64 / n as f64).collect();
    let grid = TimeGrid::new(horizon, grid.steps(), &times)?;

    // Parse against t, x1..xm and reject any time dependence.
    let dyn_vars = dynamics_vars(m, 0);
    let g = parse_expr(&pf.integrand, &dyn_vars)?;
    if g.depends_on(0) {
        return Err(MollifyError::Spec("the integrand may not depend on t".into()));
    }
    let at = |j: usize| g.substitute(&|v| Expr::Var(j * m + v - 1));
    let expr = match pf.aggregate {
        PathAggregate::Terminal => at(n - 1),
        _ if n == 1 => at(0),
        PathAggregate::Max => Expr::Call(Func::Max, (0..n).map(at).collect()),
        PathAggregate::Min => Expr::Call(Func::Min, (0..n).map(at).collect()),
        PathAggregate::Mean => {
            let sum = (1..n).fold(at(0), |acc, j| Expr::Add(Box::new(acc), Box::new(at(j))));
            Expr::Div(Box::new(sum), Box::new(Expr::Num(n as f64)))
        }
    };
    let vars = terminal_vars(n, m);
    Ok(DiscretizedFunctional {
        grid,
        text: expr.display(&vars).to_string(),
        expr,
        exact: pf.aggregate == PathAggregate::Terminal || g.is_constant(),
        lipschitz: pf.lipschitz,
    })
}

/// `c·E[max_j sup_{t ∈ [t_{j−1}, t_j]} |X(t) − X(t_j)|]` on the simulated
/// nodes (Euclidean norm), with `t₀ = 0`. Zero for exact restrictions.
pub fn discretization_budget(disc: &DiscretizedFunctional, sb: &StateBatch) -> Estimate {
    if disc.exact {
        return Estimate::exact(0.0);
    }
    let checkpoints = disc.grid.checkpoints();
    let samples: Vec<f64> = (0..sb.paths())
        .map(|path| {
            let mut start = 0;
            let mut worst = 0.0f64;
            for &end in checkpoints {
                let anchor = sb.state(path, end);
                for node in start..end {
                    let dist = sb
                        .state(path, node)
                        .iter()
                        .zip(anchor)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    worst = worst.max(dist);
                }
                start = end;
            }
            disc.lipschitz * worst
        })
        .collect();
    Estimate::from_samples(&samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NearOptimalSpec {
    /// Number of equally spaced checkpoints `n`.
    pub checkpoints: usize,
    pub mollifier: MollifierSpec,
    pub optimizer: OptimizerSpec,
    /// Paths whose checkpoint states join the certificate's probe set.
    pub probe_paths: usize,
}

impl Default for NearOptimalSpec {
    fn default() -> Self {
        NearOptimalSpec {
            checkpoints: 2,
            mollifier: MollifierSpec::default(),
            optimizer: OptimizerSpec::default(),
            probe_paths: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearOptimalReport {
    pub epsilon: f64,
    pub checkpoints: usize,
    pub functional: String,
    pub quadrature: String,
    pub seed: u64,
    pub paths: usize,
    /// `J^ε` at the optimized control.
    pub value: Estimate,
    /// Cost with the unmollified restriction, same control and paths.
    pub unmollified_value: Estimate,
    pub budget: Estimate,
    pub certificate: ErrorScan,
    pub optimizer_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub control: ControlProcess,
}

impl NearOptimalReport {
    /// Measured `C` of `|Φ^ε − Φ| ≤ Cε` over the probe set.
    pub fn measured_c(&self) -> f64 {
        self.certificate.measured_c()
    }

    /// `C·ε + discretization budget + optimizer gap`.
    pub fn near_optimal_within(&self) -> f64 {
        self.measured_c() * self.epsilon + self.budget.mean + self.optimizer_gap.max(0.0)
    }

    pub fn summary(&self) -> String {
        format!(
            "[functional]\nrestriction: {}\ncheckpoints: {}\n\
             [mollifier]\nepsilon: {}\nquadrature: {}\n\
             [value]\nJ_eps: {} (stderr {:e}, paths {}, seed {})\nJ unmollified: {} (stderr {:e})\n\
             [budget]\ndiscretization: {} (stderr {:e})\nmeasured C: {}\nbound check: {}\n\
             [optimizer]\niterations: {}\nconverged: {}\ngap: {:e}\n\
             [verdict]\nnear-optimal within (measured C)*eps + discretization budget + optimizer gap = {}\n",
            self.functional,
            self.checkpoints,
            self.epsilon,
            self.quadrature,
            self.value.mean,
            self.value.stderr,
            self.paths,
            self.seed,
            self.unmollified_value.mean,
            self.unmollified_value.stderr,
            self.budget.mean,
            self.budget.stderr,
            self.measured_c(),
            if self.certificate.pass { "PASS" } else { "FAIL" },
            self.iterations,
            self.converged,
            self.optimizer_gap,
            self.near_optimal_within()
        )
    }
}

/// Probe set for the certificate: the sampled checkpoint states and a
/// lattice over the symmetric box that contains them (odd point counts, so
/// the origin is included).
fn certificate_probes(sb: &StateBatch, checkpoints: &[usize], arity: usize, paths: usize, eps: f64) -> Vec<Vec<f64>> {
    let mut probes = Vec::new();
    let mut radius = 0.0f64;
    for path in 0..sb.paths().min(paths) {
        let mut y = vec![0.0; arity];
        sb.checkpoint_states(path, checkpoints, &mut y);
        radius = y.iter().fold(radius, |r, v| r.max(v.abs()));
        probes.push(y);
    }
    let per_axis = match arity {
        0..=2 => 33,
        3..=4 => 9,
        5..=6 => 5,
        _ => 0,
    };
    if per_axis > 0 {
        let r = radius + 3.0 * eps;
        probes.extend(probe_lattice(arity, per_axis, -r, r));
    }
    probes
}

/// Discretizes the path functional of `problem` (its own terminal cost is
/// ignored), mollifies the restriction, optimizes the smooth problem and
/// certifies the result.
pub fn near_optimal_pipeline(
    problem: &ProblemSpec,
    pf: &PathFunctionalSpec,
    spec: &NearOptimalSpec,
    init: Option<&ControlProcess>,
    seed: u64,
) -> Result<NearOptimalReport, MollifyError> {
    spec.mollifier.validate()?;
    spec.optimizer.validate()?;
    let disc = discretize_path_functional(pf, spec.checkpoints, &problem.grid, problem.state_dim)?;
    let raw = ProblemSpec {
        grid: disc.grid.clone(),
        terminal_cost: disc.text.clone(),
        ..problem.clone()
    }
    .validate()?;
    let smooth = mollify_problem(&raw, &spec.mollifier)?;
    let grid = smooth.grid();
    let wb = BrownianBatch::sample(grid, smooth.brownian_dim(), spec.optimizer.paths, seed);
    let ubox = smooth.control_box();
    let init = match init {
        Some(u) => u.clone(),
        None => {
            let mid: Vec<f64> = ubox.lower().iter().zip(ubox.upper()).map(|(l, u)| 0.5 * (l + u)).collect();
            ControlProcess::constant(grid, ubox, &mid)
        }
    };
    let result = optimize_control_with(&smooth, &init, &spec.optimizer, &wb)?;
    let sb = simulate_state(&smooth, &result.control, &wb)?;
    let value = estimate_cost(&smooth, &sb);
    let unmollified_value = estimate_cost(&raw, &sb);
    let budget = discretization_budget(&disc, &sb);
    let arity = raw.terminal_vars().len();
    let probes = certificate_probes(&sb, grid.checkpoints(), arity, spec.probe_paths, spec.mollifier.epsilon);
    let certificate = mollify_error_scan(
        &disc.expr,
        raw.terminal_vars(),
        raw.state_dim(),
        pf.lipschitz,
        &[spec.mollifier.epsilon],
        &probes,
        &spec.mollifier,
    )?;
    Ok(NearOptimalReport {
        epsilon: spec.mollifier.epsilon,
        checkpoints: spec.checkpoints,
        functional: disc.text,
        quadrature: certificate.quadrature.clone(),
        seed,
        paths: spec.optimizer.paths,
        value,
        unmollified_value,
        budget,
        certificate,
        optimizer_gap: result.gap,
        iterations: result.iterations,
        converged: result.converged,
        control: result.control,
    })
}
