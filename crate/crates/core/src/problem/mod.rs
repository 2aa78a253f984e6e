//! Control problems: time grid, control box, coefficient expressions,
//! checkpoint costs and expectation constraints.
//!
//! A [`ProblemSpec`] is plain data (expression strings and numbers). Calling
//! [`ProblemSpec::validate`] parses every expression, differentiates the
//! dynamics and the terminal cost, compiles everything to bytecode and runs an
//! advisory sampled Lipschitz check. The resulting [`ValidatedProblem`] is
//! immutable and shared by every numerical module.

mod builtins;
mod grid;
mod terminal;

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::expr::{parse_expr, Compiled, Expr, ExprError, VarSet};

pub use builtins::{
    builtin_names, builtin_problem, lq_smooth_moment_cost, lq_smooth_reference, AnalyticSolution, Builtin,
    LqReference, LINEAR_TERMINAL_WEIGHTS,
};
pub use grid::TimeGrid;
pub use terminal::{SymbolicTerminal, TerminalCost};

/// Errors raised while building or validating a problem.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProblemError {
    #[error("{field}: {source}")]
    Expr {
        field: String,
        #[source]
        source: ExprError,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("invalid control box: {0}")]
    ControlBox(String),
    #[error("invalid constraint: {0}")]
    Constraint(String),
    #[error("unknown built-in problem `{0}`")]
    UnknownBuiltin(String),
}

/// The convex control set `U`, a product of closed intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ProblemError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(ProblemError::ControlBox(format!(
                "{} lower bounds but {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (l, r)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !r.is_finite() {
                return Err(ProblemError::ControlBox(format!("component {} is unbounded", j + 1)));
            }
            if l > r {
                return Err(ProblemError::ControlBox(format!(
                    "component {}: lower {l} exceeds upper {r}",
                    j + 1
                )));
            }
        }
        Ok(ControlBox { lower, upper })
    }

    /// Same interval for every component.
    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self, ProblemError> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn clamp(&self, j: usize, v: f64) -> f64 {
        v.clamp(self.lower[j], self.upper[j])
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .enumerate()
            .all(|(j, &v)| v >= self.lower[j] && v <= self.upper[j])
    }

    pub fn is_point(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(l, r)| l == r)
    }

    /// Euclidean diameter of the box.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, r)| (r - l).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Uniform grid with `resolution` points per component (a degenerate
    /// component contributes a single point).
    pub fn axis(&self, j: usize, resolution: usize) -> Vec<f64> {
        let (l, r) = (self.lower[j], self.upper[j]);
        if l == r || resolution < 2 {
            return vec![l];
        }
        (0..resolution)
            .map(|i| {
                if i + 1 == resolution {
                    r
                } else {
                    l + (r - l) * i as f64 / (resolution - 1) as f64
                }
            })
            .collect()
    }

    /// Tensor grid of points, the first component varying slowest.
    pub fn grid(&self, resolution: usize) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = (0..self.dim()).map(|j| self.axis(j, resolution)).collect();
        let mut out = vec![Vec::new()];
        for axis in &axes {
            let mut next = Vec::with_capacity(out.len() * axis.len());
            for prefix in &out {
                for &v in axis {
                    let mut p = prefix.clone();
                    p.push(v);
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }
}

/// One expectation constraint `lower ≤ E φ(X(t₁),…,X(tₙ)) ≤ upper`.
///
/// The per-checkpoint form uses a function of a single `yᵢ`; any terminal
/// variable is accepted so that aggregate constraints are expressible too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub function: String,
    #[serde(default = "neg_inf")]
    pub lower: f64,
    #[serde(default = "pos_inf")]
    pub upper: f64,
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

/// Which side of a constraint a multiplier slot enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundSide {
    Lower,
    Upper,
}

/// Expectation constraints at checkpoints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub items: Vec<Constraint>,
}

impl ConstraintSpec {
    pub fn new(items: Vec<Constraint>) -> Self {
        ConstraintSpec { items }
    }

    pub fn is_empty(&self) -> bool {
        self.items.iter().all(|c| c.lower == f64::NEG_INFINITY && c.upper == f64::INFINITY)
    }

    /// Parses and differentiates every constraint function against the
    /// terminal variables of `problem`.
    pub fn validate(&self, problem: &ValidatedProblem) -> Result<ValidatedConstraints, ProblemError> {
        let vars = problem.terminal_vars();
        let mut functions = Vec::new();
        let mut slots = Vec::new();
        for (i, c) in self.items.iter().enumerate() {
            if c.lower.is_nan() || c.upper.is_nan() || c.lower > c.upper {
                return Err(ProblemError::Constraint(format!(
                    "constraint {}: lower bound {} exceeds upper bound {}",
                    i + 1,
                    c.lower,
                    c.upper
                )));
            }
            let field = format!("constraints[{}].function", i + 1);
            let expr = parse_expr(&c.function, vars).map_err(|source| ProblemError::Expr {
                field: field.clone(),
                source,
            })?;
            let grad = (0..vars.len())
                .map(|v| expr.diff(v, vars).map(|d| d.compile()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|source| ProblemError::Expr { field, source })?;
            if c.lower > f64::NEG_INFINITY {
                slots.push(ConstraintSlot {
                    constraint: i,
                    side: BoundSide::Lower,
                    bound: c.lower,
                });
            }
            if c.upper < f64::INFINITY {
                slots.push(ConstraintSlot {
                    constraint: i,
                    side: BoundSide::Upper,
                    bound: c.upper,
                });
            }
            functions.push(ConstraintFunction {
                compiled: expr.compile(),
                expr,
                grad,
            });
        }
        Ok(ValidatedConstraints {
            spec: self.clone(),
            functions,
            slots,
        })
    }
}

/// A one-sided bound of a constraint; each slot carries one multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSlot {
    pub constraint: usize,
    pub side: BoundSide,
    pub bound: f64,
}

impl ConstraintSlot {
    /// Amount by which the expectation `value` violates this bound
    /// (negative when slack).
    pub fn margin(&self, value: f64) -> f64 {
        match self.side {
            BoundSide::Upper => value - self.bound,
            BoundSide::Lower => self.bound - value,
        }
    }

    /// `+1` for upper bounds, `−1` for lower bounds.
    pub fn sign(&self) -> f64 {
        match self.side {
            BoundSide::Upper => 1.0,
            BoundSide::Lower => -1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintFunction {
    pub expr: Expr,
    pub compiled: Compiled,
    pub grad: Vec<Compiled>,
}

/// Constraint functions compiled against a problem's terminal variables.
#[derive(Debug, Clone)]
pub struct ValidatedConstraints {
    pub spec: ConstraintSpec,
    pub functions: Vec<ConstraintFunction>,
    pub slots: Vec<ConstraintSlot>,
}

impl ValidatedConstraints {
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }
}

/// Full problem datum: dimensions, coefficient expressions, grid and `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub name: String,
    pub state_dim: usize,
    pub brownian_dim: usize,
    pub control_dim: usize,
    pub x0: Vec<f64>,
    /// `state_dim` drift entries.
    pub drift: Vec<String>,
    /// `state_dim` rows of `brownian_dim` diffusion entries.
    pub diffusion: Vec<Vec<String>>,
    pub running_cost: String,
    pub terminal_cost: String,
    pub grid: TimeGrid,
    pub control_box: ControlBox,
}

/// Settings of the advisory Lipschitz sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProbe {
    /// States are sampled in `[−half_width, half_width]^m`.
    pub half_width: f64,
    pub samples: usize,
    /// Declared constant `c`; slopes above it are flagged.
    pub bound: f64,
    pub seed: u64,
}

impl Default for LipschitzProbe {
    fn default() -> Self {
        LipschitzProbe {
            half_width: 5.0,
            samples: 10_000,
            bound: 100.0,
            seed: 0,
        }
    }
}

/// Result of the sampled secant check on `b` and `σ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub probe: LipschitzProbe,
    pub drift_slope: f64,
    pub diffusion_slope: f64,
    pub within_bound: bool,
}

/// A coefficient expression with its compiled value and partial derivatives.
#[derive(Debug, Clone)]
pub struct Coefficient {
    pub expr: Expr,
    pub value: Compiled,
    /// `∂/∂x_k` for each state component.
    pub dx: Vec<Compiled>,
    /// `∂/∂u_j` for each control component.
    pub du: Vec<Compiled>,
    dx_expr: Vec<Expr>,
    du_expr: Vec<Expr>,
}

impl Coefficient {
    fn build(text: &str, field: &str, vars: &VarSet, m: usize, mu: usize) -> Result<Self, ProblemError> {
        let err = |source| ProblemError::Expr {
            field: field.to_string(),
            source,
        };
        let expr = parse_expr(text, vars).map_err(err)?;
        let dx_expr = (0..m)
            .map(|k| expr.diff(1 + k, vars))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let du_expr = (0..mu)
            .map(|j| expr.diff(1 + m + j, vars))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        Ok(Coefficient {
            value: expr.compile(),
            dx: dx_expr.iter().map(Expr::compile).collect(),
            du: du_expr.iter().map(Expr::compile).collect(),
            expr,
            dx_expr,
            du_expr,
        })
    }

    pub fn depends_on_state(&self) -> bool {
        (0..self.dx.len()).any(|k| self.expr.depends_on(1 + k))
    }
}

/// A problem whose expressions are parsed, differentiated and compiled.
#[derive(Clone)]
pub struct ValidatedProblem {
    spec: ProblemSpec,
    dyn_vars: VarSet,
    term_vars: VarSet,
    drift: Vec<Coefficient>,
    diffusion: Vec<Vec<Coefficient>>,
    running: Coefficient,
    terminal: Arc<dyn TerminalCost>,
    terminal_expr: Expr,
    advisories: Vec<String>,
    lipschitz: LipschitzReport,
}

impl fmt::Debug for ValidatedProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ValidatedProblem")
            .field("spec", &self.spec)
            .field("terminal", &self.terminal.describe())
            .field("advisories", &self.advisories)
            .finish()
    }
}

/// Variables of the dynamics: `t, x1..xm, u1..umu` (with `x`/`u` aliases in
/// one dimension).
pub fn dynamics_vars(m: usize, mu: usize) -> VarSet {
    let mut names = vec!["t".to_string()];
    names.extend((1..=m).map(|k| format!("x{k}")));
    names.extend((1..=mu).map(|j| format!("u{j}")));
    let mut vs = VarSet::new(&names);
    if m == 1 {
        vs = vs.with_alias("x", "x1");
    }
    if mu == 1 {
        vs = vs.with_alias("u", "u1");
    }
    vs
}

/// Variables of the terminal cost: `y1..yn` for scalar states, `yi_c`
/// (checkpoint `i`, component `c`) otherwise. Variable `i·m + c` (0-based)
/// is component `c` of checkpoint `i`.
pub fn terminal_vars(n: usize, m: usize) -> VarSet {
    let names: Vec<String> = (1..=n)
        .flat_map(|i| {
            (1..=m).map(move |c| if m == 1 { format!("y{i}") } else { format!("y{i}_{c}") })
        })
        .collect();
    VarSet::new(&names)
}

impl ProblemSpec {
    /// Validates with the default Lipschitz probe.
    pub fn validate(&self) -> Result<ValidatedProblem, ProblemError> {
        self.validate_with(&LipschitzProbe::default())
    }

    pub fn validate_with(&self, probe: &LipschitzProbe) -> Result<ValidatedProblem, ProblemError> {
        let (m, d, mu) = (self.state_dim, self.brownian_dim, self.control_dim);
        if m == 0 || d == 0 || mu == 0 {
            return Err(ProblemError::Dimension(
                "state, Brownian and control dimensions must be positive".into(),
            ));
        }
        if self.x0.len() != m {
            return Err(ProblemError::Dimension(format!(
                "x0 has {} entries, state dimension is {m}",
                self.x0.len()
            )));
        }
        if self.drift.len() != m {
            return Err(ProblemError::Dimension(format!(
                "drift has {} entries, state dimension is {m}",
                self.drift.len()
            )));
        }
        if self.diffusion.len() != m {
            return Err(ProblemError::Dimension(format!(
                "diffusion has {} rows, state dimension is {m}",
                self.diffusion.len()
            )));
        }
        for (i, row) in self.diffusion.iter().enumerate() {
            if row.len() != d {
                return Err(ProblemError::Dimension(format!(
                    "diffusion row {} has {} columns, Brownian dimension is {d}",
                    i + 1,
                    row.len()
                )));
            }
        }
        if self.control_box.dim() != mu {
            return Err(ProblemError::Dimension(format!(
                "control box has {} components, control dimension is {mu}",
                self.control_box.dim()
            )));
        }
        let dyn_vars = dynamics_vars(m, mu);
        let term_vars = terminal_vars(self.grid.checkpoint_count(), m);
        let drift = self
            .drift
            .iter()
            .enumerate()
            .map(|(i, s)| Coefficient::build(s, &format!("drift[{}]", i + 1), &dyn_vars, m, mu))
            .collect::<Result<Vec<_>, _>>()?;
        let diffusion = self
            .diffusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, s)| {
                        Coefficient::build(s, &format!("diffusion[{}][{}]", i + 1, j + 1), &dyn_vars, m, mu)
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let running = Coefficient::build(&self.running_cost, "running_cost", &dyn_vars, m, mu)?;
        let terminal_expr =
            parse_expr(&self.terminal_cost, &term_vars).map_err(|source| ProblemError::Expr {
                field: "terminal_cost".into(),
                source,
            })?;
        let symbolic = SymbolicTerminal::new(terminal_expr.clone(), &term_vars, m);
        let mut advisories = Vec::new();
        if !symbolic.is_differentiable() {
            advisories.push("non-smooth terminal; mollify before adjoint".to_string());
        }
        let mut problem = ValidatedProblem {
            spec: self.clone(),
            dyn_vars,
            term_vars,
            drift,
            diffusion,
            running,
            terminal: Arc::new(symbolic),
            terminal_expr,
            advisories,
            lipschitz: LipschitzReport {
                probe: *probe,
                drift_slope: 0.0,
                diffusion_slope: 0.0,
                within_bound: true,
            },
        };
        problem.lipschitz = problem.sample_lipschitz(probe);
        if !problem.lipschitz.within_bound {
            problem.advisories.push(format!(
                "sampled Lipschitz slope {:.3e} exceeds declared constant {}",
                problem.lipschitz.drift_slope.max(problem.lipschitz.diffusion_slope),
                probe.bound
            ));
        }
        Ok(problem)
    }
}

impl ValidatedProblem {
    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.spec.grid
    }

    pub fn control_box(&self) -> &ControlBox {
        &self.spec.control_box
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn brownian_dim(&self) -> usize {
        self.spec.brownian_dim
    }

    pub fn control_dim(&self) -> usize {
        self.spec.control_dim
    }

    pub fn x0(&self) -> &[f64] {
        &self.spec.x0
    }

    pub fn dynamics_vars(&self) -> &VarSet {
        &self.dyn_vars
    }

    pub fn terminal_vars(&self) -> &VarSet {
        &self.term_vars
    }

    pub fn drift(&self) -> &[Coefficient] {
        &self.drift
    }

    pub fn diffusion(&self) -> &[Vec<Coefficient>] {
        &self.diffusion
    }

    pub fn running(&self) -> &Coefficient {
        &self.running
    }

    pub fn terminal(&self) -> &Arc<dyn TerminalCost> {
        &self.terminal
    }

    /// The terminal cost as declared (before any mollification).
    pub fn terminal_expr(&self) -> &Expr {
        &self.terminal_expr
    }

    pub fn advisories(&self) -> &[String] {
        &self.advisories
    }

    pub fn lipschitz(&self) -> &LipschitzReport {
        &self.lipschitz
    }

    /// Length of the evaluation point `[t, x…, u…]`.
    pub fn point_len(&self) -> usize {
        1 + self.spec.state_dim + self.spec.control_dim
    }

    /// Writes `[t, x…, u…]` into `buf`.
    pub fn fill_point(&self, buf: &mut [f64], t: f64, x: &[f64], u: &[f64]) {
        let m = self.spec.state_dim;
        buf[0] = t;
        buf[1..1 + m].copy_from_slice(x);
        buf[1 + m..].copy_from_slice(u);
    }

    /// `b(t,x,u)` into `out[i]`.
    pub fn drift_at(&self, pt: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.drift) {
            *o = c.value.eval(pt);
        }
    }

    /// `σ(t,x,u)` into `out[i·d + j]` (row `i`, Brownian column `j`).
    pub fn diffusion_at(&self, pt: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(self.diffusion.iter().flatten()) {
            *o = c.value.eval(pt);
        }
    }

    /// `∂bᵢ/∂x_k` into `out[i·m + k]`.
    pub fn drift_dx(&self, pt: &[f64], out: &mut [f64]) {
        let m = self.spec.state_dim;
        for (i, c) in self.drift.iter().enumerate() {
            for k in 0..m {
                out[i * m + k] = c.dx[k].eval(pt);
            }
        }
    }

    /// `∂bᵢ/∂u_j` into `out[i·mu + j]`.
    pub fn drift_du(&self, pt: &[f64], out: &mut [f64]) {
        let mu = self.spec.control_dim;
        for (i, c) in self.drift.iter().enumerate() {
            for j in 0..mu {
                out[i * mu + j] = c.du[j].eval(pt);
            }
        }
    }

    /// `∂σᵢⱼ/∂x_k` into `out[(i·d + j)·m + k]`.
    pub fn diffusion_dx(&self, pt: &[f64], out: &mut [f64]) {
        let m = self.spec.state_dim;
        for (r, c) in self.diffusion.iter().flatten().enumerate() {
            for k in 0..m {
                out[r * m + k] = c.dx[k].eval(pt);
            }
        }
    }

    /// `∂σᵢⱼ/∂u_l` into `out[(i·d + j)·mu + l]`.
    pub fn diffusion_du(&self, pt: &[f64], out: &mut [f64]) {
        let mu = self.spec.control_dim;
        for (r, c) in self.diffusion.iter().flatten().enumerate() {
            for l in 0..mu {
                out[r * mu + l] = c.du[l].eval(pt);
            }
        }
    }

    pub fn running_at(&self, pt: &[f64]) -> f64 {
        self.running.value.eval(pt)
    }

    pub fn running_dx(&self, pt: &[f64], out: &mut [f64]) {
        for (o, d) in out.iter_mut().zip(&self.running.dx) {
            *o = d.eval(pt);
        }
    }

    pub fn running_du(&self, pt: &[f64], out: &mut [f64]) {
        for (o, d) in out.iter_mut().zip(&self.running.du) {
            *o = d.eval(pt);
        }
    }

    /// Whether `b` or `σ` depend on the state (otherwise Euler is exact).
    pub fn dynamics_depend_on_state(&self) -> bool {
        self.drift.iter().any(Coefficient::depends_on_state)
            || self.diffusion.iter().flatten().any(Coefficient::depends_on_state)
    }

    /// Replaces the terminal cost (used by mollification). The declared
    /// expression is kept for reporting.
    pub fn with_terminal(&self, terminal: Arc<dyn TerminalCost>) -> ValidatedProblem {
        let mut out = self.clone();
        out.advisories.retain(|a| !a.starts_with("non-smooth terminal"));
        if !terminal.is_differentiable() {
            out.advisories.push("non-smooth terminal; mollify before adjoint".into());
        }
        out.terminal = terminal;
        out
    }

    /// Textual digest of every cached expression and derivative; equal
    /// digests mean equal caches.
    pub fn cache_digest(&self) -> String {
        let v = &self.dyn_vars;
        let mut out = String::new();
        let mut push = |c: &Coefficient| {
            out.push_str(&c.expr.display(v).to_string());
            for d in c.dx_expr.iter().chain(&c.du_expr) {
                out.push('|');
                out.push_str(&d.display(v).to_string());
            }
            out.push('\n');
        };
        self.drift.iter().for_each(&mut push);
        self.diffusion.iter().flatten().for_each(&mut push);
        push(&self.running);
        out.push_str(&self.terminal.describe());
        out
    }

    fn sample_lipschitz(&self, probe: &LipschitzProbe) -> LipschitzReport {
        let m = self.spec.state_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
        let mut p1 = vec![0.0; self.point_len()];
        let mut p2 = vec![0.0; self.point_len()];
        let (mut drift_slope, mut diffusion_slope) = (0.0f64, 0.0f64);
        let ubox = &self.spec.control_box;
        for _ in 0..probe.samples {
            let t = rng.random::<f64>() * self.spec.grid.horizon();
            let u: Vec<f64> = (0..ubox.dim())
                .map(|j| ubox.lower()[j] + rng.random::<f64>() * (ubox.upper()[j] - ubox.lower()[j]))
                .collect();
            let x1: Vec<f64> = (0..m).map(|_| probe.half_width * (2.0 * rng.random::<f64>() - 1.0)).collect();
            let x2: Vec<f64> = (0..m).map(|_| probe.half_width * (2.0 * rng.random::<f64>() - 1.0)).collect();
            let dist = x1.iter().zip(&x2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist < 1e-12 {
                continue;
            }
            self.fill_point(&mut p1, t, &x1, &u);
            self.fill_point(&mut p2, t, &x2, &u);
            let db: f64 = self
                .drift
                .iter()
                .map(|c| (c.value.eval(&p1) - c.value.eval(&p2)).powi(2))
                .sum::<f64>()
                .sqrt();
            let ds: f64 = self
                .diffusion
                .iter()
                .flatten()
                .map(|c| (c.value.eval(&p1) - c.value.eval(&p2)).powi(2))
                .sum::<f64>()
                .sqrt();
            if db.is_finite() {
                drift_slope = drift_slope.max(db / dist);
            } else {
                drift_slope = f64::INFINITY;
            }
            if ds.is_finite() {
                diffusion_slope = diffusion_slope.max(ds / dist);
            } else {
                diffusion_slope = f64::INFINITY;
            }
        }
        LipschitzReport {
            probe: *probe,
            drift_slope,
            diffusion_slope,
            within_bound: drift_slope <= probe.bound && diffusion_slope <= probe.bound,
        }
    }
}

#[cfg(test)]
mod tests;
