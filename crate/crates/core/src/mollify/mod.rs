//! Gaussian mollification of non-smooth checkpoint costs.
//!
//! `Φ^ε(y) = E[Φ(y + εZ)]` with `Z` standard normal on every argument the
//! cost actually reads. Gradients use the kernel-derivative identity
//! `∂ᵢΦ^ε(y) = E[Φ(y + εZ)·Zᵢ]/ε`, so `Φ` itself is never differentiated.
//!
//! Tensor quadrature runs axis by axis. An axis along which no kink of `Φ`
//! crosses uses the Gauss–Hermite rule; otherwise the (truncated) real line
//! is split at the kinks and each smooth piece gets a Gauss–Legendre rule of
//! the same size against the normal density. Plain Gauss–Hermite converges
//! only algebraically across a kink (64 nodes leave a `5e-3` error in
//! `E|Z|`), the split rule is accurate to rounding.

mod path;
mod quadrature;

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::expr::{Compiled, Expr, ExprError, VarSet};
use crate::forward::ForwardError;
use crate::mp::MpError;
use crate::parallel;
use crate::problem::{ProblemError, TerminalCost, ValidatedProblem};
use crate::stats;

pub use path::{
    discretization_budget, discretize_path_functional, near_optimal_pipeline, DiscretizedFunctional,
    NearOptimalReport, NearOptimalSpec, PathAggregate, PathFunctionalSpec,
};
pub use quadrature::{gauss_hermite, gauss_legendre, Rule};

/// Largest number of mollified arguments handled by tensor quadrature.
pub const MAX_TENSOR_DIMS: usize = 6;
/// Half-width of the truncated line used by split rules; the normal mass
/// beyond it is below `1e-22`.
pub const TRUNCATION: f64 = 10.0;
/// Absolute tolerance granted to tensor quadrature in error checks.
pub const QUADRATURE_TOLERANCE: f64 = 1e-10;
/// Default `ε` values of an error scan.
pub const DEFAULT_EPSILONS: [f64; 3] = [0.2, 0.1, 0.05];

const ROOT_SCAN_INTERVALS: usize = 64;
/// Gauss–Legendre sizes on kink pieces grow in steps of this many nodes.
const PIECE_NODE_STEP: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MollifyError {
    #[error("invalid mollifier spec: {0}")]
    Spec(String),
    #[error("quadrature overflow at y = {point:?}: the cost grows too fast for ε = {epsilon}")]
    Overflow { point: Vec<f64>, epsilon: f64 },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Mp(#[from] MpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureMode {
    /// Tensor Gauss rules up to [`MAX_TENSOR_DIMS`] arguments, Monte Carlo
    /// beyond.
    Auto,
    GaussHermite,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MollifierSpec {
    pub epsilon: f64,
    pub mode: QuadratureMode,
    /// Nodes per dimension (per smooth piece on split axes).
    pub nodes: usize,
    /// Monte Carlo sample count, drawn as antithetic pairs (odd counts are
    /// rounded up).
    pub samples: usize,
    pub seed: u64,
}

impl Default for MollifierSpec {
    fn default() -> Self {
        MollifierSpec {
            epsilon: 0.1,
            mode: QuadratureMode::Auto,
            nodes: 64,
            samples: 4096,
            seed: 0,
        }
    }
}

impl MollifierSpec {
    pub fn validate(&self) -> Result<(), MollifyError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(MollifyError::Spec(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.nodes == 0 || self.samples == 0 {
            return Err(MollifyError::Spec("node and sample counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        MollifierSpec { epsilon, ..self }
    }

    fn uses_tensor(&self, dims: usize) -> Result<bool, MollifyError> {
        match self.mode {
            QuadratureMode::Auto => Ok(dims <= MAX_TENSOR_DIMS),
            QuadratureMode::MonteCarlo => Ok(false),
            QuadratureMode::GaussHermite if dims > MAX_TENSOR_DIMS => Err(MollifyError::Spec(format!(
                "tensor quadrature is limited to {MAX_TENSOR_DIMS} arguments, the cost reads {dims}"
            ))),
            QuadratureMode::GaussHermite => Ok(true),
        }
    }
}

#[derive(Debug, Clone)]
struct Switch {
    function: Compiled,
    vars: BTreeSet<usize>,
    /// Per active axis: whether the switch is affine along it.
    affine: Vec<bool>,
}

#[derive(Debug, Clone)]
enum Engine {
    Tensor {
        nodes: usize,
        hermite: Rule,
        /// Rules of increasing size; a piece gets nodes in proportion to
        /// its share of the truncation interval.
        legendre: Vec<Rule>,
        switches: Vec<Switch>,
    },
    Sampled {
        /// Row-major `samples × active` standard normal draws.
        z: Vec<f64>,
        samples: usize,
    },
}

/// `Φ^ε` as a checkpoint cost, with value and kernel-derivative gradient.
#[derive(Debug, Clone)]
pub struct MollifiedTerminal {
    text: String,
    value: Compiled,
    arity: usize,
    epsilon: f64,
    active: Vec<usize>,
    engine: Engine,
    adapted: Vec<bool>,
}

/// Builds `Φ^ε` for the cost `expr` over `vars` (flattened checkpoint
/// arguments, `state_dim` per checkpoint). Smoothness is not required.
pub fn mollify_terminal(
    expr: &Expr,
    vars: &VarSet,
    state_dim: usize,
    spec: &MollifierSpec,
) -> Result<MollifiedTerminal, MollifyError> {
    spec.validate()?;
    let arity = vars.len();
    let m = state_dim.max(1);
    let active: Vec<usize> = expr.free_vars().into_iter().collect();
    let d = active.len();
    let engine = if spec.uses_tensor(d)? {
        let switches = expr
            .switching_functions()
            .into_iter()
            .map(|s| {
                let affine = active
                    .iter()
                    .map(|&a| s.diff(a, vars).map(|ds| !ds.depends_on(a)).unwrap_or(false))
                    .collect();
                Switch {
                    function: s.compile(),
                    vars: s.free_vars(),
                    affine,
                }
            })
            .filter(|s| !s.vars.is_empty())
            .collect();
        Engine::Tensor {
            nodes: spec.nodes,
            hermite: gauss_hermite(spec.nodes),
            legendre: piece_rules(spec.nodes),
            switches,
        }
    } else {
        let pairs = spec.samples.div_ceil(2);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut z = Vec::with_capacity(2 * pairs * d);
        for _ in 0..pairs {
            let draw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            z.extend_from_slice(&draw);
            z.extend(draw.iter().map(|v| -v));
        }
        Engine::Sampled { z, samples: 2 * pairs }
    };
    let n = arity / m;
    let last_active = active.last().copied();
    let adapted = (0..n)
        .map(|i| {
            let block_active = active.iter().any(|&a| a / m == i);
            !block_active || last_active.is_none_or(|l| l < (i + 1) * m)
        })
        .collect();
    Ok(MollifiedTerminal {
        text: expr.display(vars).to_string(),
        value: expr.compile(),
        arity,
        epsilon: spec.epsilon,
        active,
        engine,
        adapted,
    })
}

fn piece_rules(nodes: usize) -> Vec<Rule> {
    let mut sizes: Vec<usize> = (PIECE_NODE_STEP..nodes).step_by(PIECE_NODE_STEP).collect();
    sizes.push(nodes);
    sizes.into_iter().map(gauss_legendre).collect()
}

/// Replaces the checkpoint cost of `problem` by its mollification.
pub fn mollify_problem(problem: &ValidatedProblem, spec: &MollifierSpec) -> Result<ValidatedProblem, MollifyError> {
    let terminal = mollify_terminal(problem.terminal_expr(), problem.terminal_vars(), problem.state_dim(), spec)?;
    Ok(problem.with_terminal(Arc::new(terminal)))
}

struct Accumulator {
    value: f64,
    grad: Vec<f64>,
}

impl MollifiedTerminal {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// The unmollified cost `Φ(y)`.
    pub fn raw_value(&self, y: &[f64]) -> f64 {
        self.value.eval(y)
    }

    /// Indices of the arguments `Φ` depends on; only these are mollified.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn quadrature(&self) -> String {
        let d = self.active.len();
        match &self.engine {
            Engine::Tensor { nodes, .. } => {
                format!("tensor Gauss-Hermite, {nodes} nodes per dimension (split at kinks), {d} dimension(s)")
            }
            Engine::Sampled { samples, .. } => format!("Monte Carlo, {samples} antithetic samples, {d} dimension(s)"),
        }
    }

    /// `Φ^ε(y)` and `∇Φ^ε(y)` (full length, zeros on inactive arguments).
    pub fn evaluate(&self, y: &[f64]) -> Result<(f64, Vec<f64>), MollifyError> {
        let mut grad = vec![0.0; self.arity];
        if self.active.is_empty() {
            return Ok((self.value.eval(y), grad));
        }
        let acc = match &self.engine {
            Engine::Tensor { .. } => self.tensor(y)?,
            Engine::Sampled { z, samples } => self.sampled(y, z, *samples)?,
        };
        if !acc.value.is_finite() || acc.grad.iter().any(|g| !g.is_finite()) {
            return Err(self.overflow(y));
        }
        for (&a, g) in self.active.iter().zip(&acc.grad) {
            grad[a] = g / self.epsilon;
        }
        Ok((acc.value, grad))
    }

    fn overflow(&self, y: &[f64]) -> MollifyError {
        MollifyError::Overflow {
            point: y.to_vec(),
            epsilon: self.epsilon,
        }
    }

    fn sampled(&self, y: &[f64], z: &[f64], samples: usize) -> Result<Accumulator, MollifyError> {
        let d = self.active.len();
        let mut pt = y.to_vec();
        let mut acc = Accumulator {
            value: 0.0,
            grad: vec![0.0; d],
        };
        let w = 1.0 / samples as f64;
        for row in z.chunks_exact(d) {
            for (&a, zi) in self.active.iter().zip(row) {
                pt[a] = y[a] + self.epsilon * zi;
            }
            let f = self.value.eval(&pt);
            if !f.is_finite() {
                return Err(self.overflow(y));
            }
            acc.value += w * f;
            for (g, zi) in acc.grad.iter_mut().zip(row) {
                *g += w * f * zi;
            }
        }
        Ok(acc)
    }

    fn tensor(&self, y: &[f64]) -> Result<Accumulator, MollifyError> {
        let d = self.active.len();
        let mut acc = Accumulator {
            value: 0.0,
            grad: vec![0.0; d],
        };
        let mut pt = y.to_vec();
        let mut zs = vec![0.0; d];
        self.tensor_level(0, y, &mut pt, &mut zs, 1.0, &mut acc)?;
        Ok(acc)
    }

    fn tensor_level(
        &self,
        level: usize,
        y: &[f64],
        pt: &mut [f64],
        zs: &mut [f64],
        weight: f64,
        acc: &mut Accumulator,
    ) -> Result<(), MollifyError> {
        let Engine::Tensor {
            hermite,
            legendre,
            switches,
            ..
        } = &self.engine
        else {
            unreachable!("tensor evaluation needs a tensor engine")
        };
        let axis = self.active[level];
        let inner = &self.active[level + 1..];
        let mut kinks = Vec::new();
        for s in switches {
            // Kinks that move with inner axes are smoothed by the inner
            // integration; only the ones fixed by the outer values remain.
            if !s.vars.contains(&axis) || inner.iter().any(|v| s.vars.contains(v)) {
                continue;
            }
            self.kinks_along(s, level, y, pt, &mut kinks);
        }
        pt[axis] = y[axis];
        kinks.sort_by(f64::total_cmp);
        kinks.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);

        let visit = |z: f64, w: f64, pt: &mut [f64], zs: &mut [f64], acc: &mut Accumulator| {
            pt[axis] = y[axis] + self.epsilon * z;
            zs[level] = z;
            let w = weight * w;
            if level + 1 == self.active.len() {
                let f = self.value.eval(pt);
                if !f.is_finite() {
                    return Err(self.overflow(y));
                }
                acc.value += w * f;
                for (g, zi) in acc.grad.iter_mut().zip(zs.iter()) {
                    *g += w * f * zi;
                }
                Ok(())
            } else {
                self.tensor_level(level + 1, y, pt, zs, w, acc)
            }
        };
        if kinks.is_empty() {
            for (&z, &w) in hermite.nodes.iter().zip(&hermite.weights) {
                visit(z, w, pt, zs, acc)?;
            }
        } else {
            let mut edges = Vec::with_capacity(kinks.len() + 2);
            edges.push(-TRUNCATION);
            edges.extend(kinks);
            edges.push(TRUNCATION);
            let norm = (2.0 * std::f64::consts::PI).sqrt().recip();
            for piece in edges.windows(2) {
                let (mid, half) = (0.5 * (piece[0] + piece[1]), 0.5 * (piece[1] - piece[0]));
                let share = (half / TRUNCATION * legendre.last().map_or(0, Rule::len) as f64).ceil() as usize;
                let rule = legendre.iter().find(|r| r.len() >= share).unwrap_or(&legendre[legendre.len() - 1]);
                for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                    let z = mid + half * x;
                    visit(z, half * w * norm * (-0.5 * z * z).exp(), pt, zs, acc)?;
                }
            }
        }
        pt[axis] = y[axis];
        Ok(())
    }

    /// Zeros of switch `s` along the axis of `level` in the normalized
    /// coordinate `z`, restricted to the open truncation interval.
    fn kinks_along(&self, s: &Switch, level: usize, y: &[f64], pt: &mut [f64], out: &mut Vec<f64>) {
        let axis = self.active[level];
        let mut g = |z: f64| {
            pt[axis] = y[axis] + self.epsilon * z;
            s.function.eval(pt)
        };
        let inside = |z: f64| z.is_finite() && z.abs() < TRUNCATION - 1e-12;
        if s.affine[level] {
            let (g0, g1) = (g(0.0), g(1.0));
            let slope = g1 - g0;
            if slope != 0.0 {
                let z = -g0 / slope;
                if inside(z) {
                    out.push(z);
                }
            }
            return;
        }
        let h = 2.0 * TRUNCATION / ROOT_SCAN_INTERVALS as f64;
        let mut lo = -TRUNCATION;
        let mut g_lo = g(lo);
        for k in 1..=ROOT_SCAN_INTERVALS {
            let hi = -TRUNCATION + k as f64 * h;
            let g_hi = g(hi);
            if g_lo == 0.0 && inside(lo) {
                out.push(lo);
            } else if g_lo * g_hi < 0.0 {
                let (mut a, mut b, mut ga) = (lo, hi, g_lo);
                for _ in 0..100 {
                    let c = 0.5 * (a + b);
                    if c <= a || c >= b {
                        break;
                    }
                    let gc = g(c);
                    if gc == 0.0 {
                        a = c;
                        b = c;
                        break;
                    }
                    if ga * gc < 0.0 {
                        b = c;
                    } else {
                        a = c;
                        ga = gc;
                    }
                }
                out.push(0.5 * (a + b));
            }
            lo = hi;
            g_lo = g_hi;
        }
    }
}

impl TerminalCost for MollifiedTerminal {
    fn arity(&self) -> usize {
        self.arity
    }

    /// `NaN` when the quadrature overflows; [`MollifiedTerminal::evaluate`]
    /// reports the failure explicitly.
    fn value(&self, y: &[f64]) -> f64 {
        self.evaluate(y).map(|(v, _)| v).unwrap_or(f64::NAN)
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn gradient(&self, y: &[f64], out: &mut [f64]) {
        match self.evaluate(y) {
            Ok((_, g)) => out.copy_from_slice(&g),
            Err(_) => out.iter_mut().for_each(|o| *o = f64::NAN),
        }
    }

    fn adapted_gradient(&self, checkpoint: usize) -> bool {
        self.adapted.get(checkpoint).copied().unwrap_or(false)
    }

    fn is_zero(&self) -> bool {
        self.value.is_zero()
    }

    fn describe(&self) -> String {
        format!("mollified[eps={}]({})", self.epsilon, self.text)
    }
}

/// One `ε` of an error scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRow {
    pub epsilon: f64,
    /// `max` over probes of `|Φ^ε − Φ|`.
    pub sup_error: f64,
    /// Probe attaining `sup_error`.
    pub worst_probe: Vec<f64>,
    /// `c·ε·√(2/π)·(n·m)`.
    pub bound: f64,
    /// `sup_error / ε`.
    pub measured_c: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorScan {
    pub lipschitz: f64,
    pub dims: usize,
    pub quadrature: String,
    pub tolerance: f64,
    pub rows: Vec<ScanRow>,
    /// Log-log slope of the sup error in `ε`; `None` when fewer than two
    /// errors rise above the quadrature tolerance (e.g. affine costs).
    pub slope: Option<f64>,
    pub pass: bool,
}

impl ErrorScan {
    /// Largest measured `C` over the scanned `ε` values.
    pub fn measured_c(&self) -> f64 {
        self.rows.iter().map(|r| r.measured_c).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "verdict: {}\nlipschitz constant: {}\ndimensions: {}\nquadrature: {}\n",
            if self.pass { "PASS" } else { "FAIL" },
            self.lipschitz,
            self.dims,
            self.quadrature
        );
        for r in &self.rows {
            s.push_str(&format!(
                "eps {}: sup error {:.6e} (bound {:.6e}, C = {:.6})\n",
                r.epsilon, r.sup_error, r.bound, r.measured_c
            ));
        }
        match self.slope {
            Some(k) => s.push_str(&format!("log-log slope: {k:.4}\n")),
            None => s.push_str("log-log slope: n/a (errors at quadrature level)\n"),
        }
        s
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> io::Result<()> {
        writeln!(out, "epsilon,sup_error,bound,measured_c")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.epsilon, r.sup_error, r.bound, r.measured_c)?;
        }
        Ok(())
    }
}

impl fmt::Display for ErrorScan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.summary())
    }
}

/// Measures `sup |Φ^ε − Φ|` over `probes` for every `ε` and compares it
/// with the per-dimension bound `c·ε·√(2/π)·(n·m)`, where `n·m` is the number
/// of arguments of `Φ`.
pub fn mollify_error_scan(
    expr: &Expr,
    vars: &VarSet,
    state_dim: usize,
    lipschitz: f64,
    epsilons: &[f64],
    probes: &[Vec<f64>],
    quadrature: &MollifierSpec,
) -> Result<ErrorScan, MollifyError> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(MollifyError::Spec(format!("Lipschitz constant must be positive, got {lipschitz}")));
    }
    if epsilons.is_empty() || probes.is_empty() {
        return Err(MollifyError::Spec("need at least one epsilon and one probe".into()));
    }
    if let Some(p) = probes.iter().find(|p| p.len() != vars.len()) {
        return Err(MollifyError::Spec(format!("probe {p:?} does not have {} entries", vars.len())));
    }
    let dims = vars.len();
    let mut rows = Vec::with_capacity(epsilons.len());
    let mut description = String::new();
    let mut tolerance = QUADRATURE_TOLERANCE;
    for &eps in epsilons {
        let spec = quadrature.with_epsilon(eps);
        let phi = mollify_terminal(expr, vars, state_dim, &spec)?;
        description = phi.quadrature();
        if let Engine::Sampled { samples, .. } = &phi.engine {
            // Four standard deviations of the sample mean of a c-Lipschitz
            // function of εZ.
            tolerance = 4.0 * lipschitz * eps * (phi.active.len() as f64).sqrt() / (*samples as f64).sqrt();
        }
        let errors: Vec<Result<f64, MollifyError>> = parallel::map(probes.len(), |i| {
            let (v, _) = phi.evaluate(&probes[i])?;
            Ok((v - phi.raw_value(&probes[i])).abs())
        });
        let mut sup = 0.0;
        let mut worst = probes[0].clone();
        for (i, e) in errors.into_iter().enumerate() {
            let e = e?;
            if e > sup {
                sup = e;
                worst = probes[i].clone();
            }
        }
        let bound = lipschitz * eps * (2.0 / std::f64::consts::PI).sqrt() * dims as f64;
        rows.push(ScanRow {
            epsilon: eps,
            sup_error: sup,
            worst_probe: worst,
            bound,
            measured_c: sup / eps,
            pass: sup <= bound + tolerance,
        });
    }
    let significant: Vec<&ScanRow> = rows.iter().filter(|r| r.sup_error > tolerance).collect();
    let slope = (significant.len() >= 2).then(|| {
        let xs: Vec<f64> = significant.iter().map(|r| r.epsilon).collect();
        let ys: Vec<f64> = significant.iter().map(|r| r.sup_error).collect();
        stats::log_log_slope(&xs, &ys)
    });
    Ok(ErrorScan {
        lipschitz,
        dims,
        quadrature: description,
        tolerance,
        pass: rows.iter().all(|r| r.pass),
        rows,
        slope,
    })
}

/// Tensor lattice of `per_axis` points per argument on `[lo, hi]`.
pub fn probe_lattice(dims: usize, per_axis: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = if per_axis <= 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..per_axis).map(|k| lo + (hi - lo) * k as f64 / (per_axis - 1) as f64).collect()
    };
    let mut out = vec![Vec::with_capacity(dims)];
    for _ in 0..dims {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}
