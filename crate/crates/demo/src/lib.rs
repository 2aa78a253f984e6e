//! Browser bindings: a few interactive operations over the core library,
//! returning JSON (or plain text) for the static page in `www/`.
//!
//! Each binding wraps a plain function that returns `Result<_, String>`, so
//! the logic is testable off the browser.

use serde::Serialize;
use smp_core::adjoint::solve_adjoint;
use smp_core::expr::parse_expr;
use smp_core::forward::{estimate_cost, simulate_state, BrownianBatch, ControlProcess};
use smp_core::mollify::{mollify_terminal, MollifierSpec};
use smp_core::mp::{check_necessary, CheckSpec};
use smp_core::problem::{builtin_problem, terminal_vars, ValidatedProblem};
use smp_core::regression::RegressionSpec;
use wasm_bindgen::prelude::*;

/// Path and point counts are capped to keep the page responsive.
const MAX_PATHS: usize = 20_000;
const MAX_SHOWN: usize = 50;
const MAX_POINTS: usize = 2_001;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn problem(name: &str) -> Result<(ValidatedProblem, Option<smp_core::problem::AnalyticSolution>), String> {
    let b = builtin_problem(name).map_err(err)?;
    Ok((b.spec.validate().map_err(err)?, b.analytic))
}

/// `analytic` or a number (constant control, clamped into the box).
fn candidate(p: &ValidatedProblem, analytic: Option<&smp_core::problem::AnalyticSolution>, spec: &str) -> Result<ControlProcess, String> {
    let grid = p.grid();
    let ubox = p.control_box();
    if spec.trim() == "analytic" {
        let a = analytic.ok_or("this problem has no closed-form control")?;
        return Ok(ControlProcess::from_fn(grid, ubox, |t| vec![a.control(grid, t)]));
    }
    let v: f64 = spec.trim().parse().map_err(|_| format!("`{spec}` is neither `analytic` nor a number"))?;
    Ok(ControlProcess::constant(grid, ubox, &vec![v; ubox.dim()]))
}

#[derive(Debug, Serialize)]
pub struct Simulation {
    pub cost: f64,
    pub stderr: f64,
    pub times: Vec<f64>,
    /// First state component along the first `shown` paths.
    pub paths: Vec<Vec<f64>>,
}

pub fn simulate_paths(name: &str, control: &str, paths: usize, seed: u64, shown: usize) -> Result<Simulation, String> {
    if paths == 0 || paths > MAX_PATHS {
        return Err(format!("paths must be between 1 and {MAX_PATHS}"));
    }
    let (p, analytic) = problem(name)?;
    let u = candidate(&p, analytic.as_ref(), control)?;
    let wb = BrownianBatch::sample(p.grid(), p.brownian_dim(), paths, seed);
    let sb = simulate_state(&p, &u, &wb).map_err(err)?;
    let cost = estimate_cost(&p, &sb);
    let grid = p.grid();
    Ok(Simulation {
        cost: cost.mean,
        stderr: cost.stderr,
        times: (0..grid.nodes()).map(|k| grid.time(k)).collect(),
        paths: (0..paths.min(shown).min(MAX_SHOWN))
            .map(|i| (0..grid.nodes()).map(|k| sb.state(i, k)[0]).collect())
            .collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct Mollified {
    pub y: Vec<f64>,
    pub raw: Vec<f64>,
    pub smooth: Vec<f64>,
    pub sup_error: f64,
    pub quadrature: String,
}

/// `Φ` and `Φ^ε` of a scalar cost in `y1` on `points` equally spaced
/// arguments in `[lo, hi]`.
pub fn mollify_curve(expr: &str, epsilon: f64, lo: f64, hi: f64, points: usize) -> Result<Mollified, String> {
    if !(2..=MAX_POINTS).contains(&points) || !(lo < hi) {
        return Err(format!("need lo < hi and 2..={MAX_POINTS} points"));
    }
    let vars = terminal_vars(1, 1);
    let e = parse_expr(expr, &vars).map_err(err)?;
    let phi = mollify_terminal(&e, &vars, 1, &MollifierSpec::default().with_epsilon(epsilon)).map_err(err)?;
    let y: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let raw: Vec<f64> = y.iter().map(|&v| phi.raw_value(&[v])).collect();
    let smooth = y
        .iter()
        .map(|&v| phi.evaluate(&[v]).map(|r| r.0).map_err(err))
        .collect::<Result<Vec<f64>, String>>()?;
    let sup_error = raw.iter().zip(&smooth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(Mollified {
        y,
        raw,
        smooth,
        sup_error,
        quadrature: phi.quadrature(),
    })
}

/// First-order check report for a candidate on a built-in problem.
pub fn first_order_report(name: &str, control: &str, paths: usize, seed: u64) -> Result<String, String> {
    if !(10..=MAX_PATHS).contains(&paths) {
        return Err(format!("paths must be between 10 and {MAX_PATHS}"));
    }
    let (p, analytic) = problem(name)?;
    let u = candidate(&p, analytic.as_ref(), control)?;
    let wb = BrownianBatch::sample(p.grid(), p.brownian_dim(), paths, seed);
    let sb = simulate_state(&p, &u, &wb).map_err(err)?;
    let ab = solve_adjoint(&p, &sb, &wb, &RegressionSpec { degree: 1, ridge: 1e-8 }, None).map_err(err)?;
    let report = check_necessary(&p, &u, &ab, &sb, &CheckSpec::default()).map_err(err)?;
    Ok(report.summary())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.and_then(|v| serde_json::to_string(&v).map_err(err)).map_err(|e| JsError::new(&e))
}

/// JSON `{cost, stderr, times, paths}`.
#[wasm_bindgen]
pub fn simulate(name: &str, control: &str, paths: usize, seed: u64, shown: usize) -> Result<String, JsError> {
    to_js(simulate_paths(name, control, paths, seed, shown))
}

/// JSON `{y, raw, smooth, sup_error, quadrature}`.
#[wasm_bindgen]
pub fn mollify(expr: &str, epsilon: f64, lo: f64, hi: f64, points: usize) -> Result<String, JsError> {
    to_js(mollify_curve(expr, epsilon, lo, hi, points))
}

/// Plain-text first-order check report.
#[wasm_bindgen]
pub fn verify_mp(name: &str, control: &str, paths: usize, seed: u64) -> Result<String, JsError> {
    first_order_report(name, control, paths, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_control_freezes_example1() {
        let s = simulate_paths("example1", "0", 3, 1, 2).unwrap();
        assert_eq!(s.paths.len(), 2);
        assert!(s.paths.iter().flatten().all(|&x| x == 1.0));
        assert_eq!(s.times.len(), 201);
        assert_eq!(s.cost, -1.0);
    }

    #[test]
    fn mollified_abs_at_zero_is_the_folded_mean() {
        let m = mollify_curve("abs(y1)", 0.1, -1.0, 1.0, 3).unwrap();
        assert_eq!(m.y, vec![-1.0, 0.0, 1.0]);
        assert!((m.smooth[1] - 0.1 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((m.sup_error - m.smooth[1]).abs() < 1e-12);
    }

    #[test]
    fn report_distinguishes_optimal_and_suboptimal_controls() {
        assert!(first_order_report("example1", "analytic", 2000, 3).unwrap().contains("verdict: pass"));
        assert!(first_order_report("example1", "0.5", 2000, 3).unwrap().contains("verdict: fail"));
    }

    #[test]
    fn bad_inputs_are_messages() {
        assert!(simulate_paths("nope", "0", 10, 1, 1).is_err());
        assert!(simulate_paths("example1", "fast", 10, 1, 1).is_err());
        assert!(simulate_paths("lq_smooth", "analytic", 10, 1, 1).is_err());
        assert!(mollify_curve("abs(", 0.1, -1.0, 1.0, 5).is_err());
        assert!(mollify_curve("abs(y1)", 0.1, 1.0, -1.0, 5).is_err());
        assert!(first_order_report("example1", "analytic", 0, 1).is_err());
    }
}
