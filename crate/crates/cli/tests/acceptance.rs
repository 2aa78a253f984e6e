//! Acceptance suite: every criterion at its pinned tolerance, one pass/fail
//! line each. Run with `cargo test -p smp-cli --test acceptance`.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use smp_core::adjoint::{duality_residual, solve_adjoint};
use smp_core::constrained::{solve_constrained, ConstrainedSpec};
use smp_core::expr::parse_expr;
use smp_core::forward::{estimate_cost, gateaux_check, simulate_state, simulate_variational, BrownianBatch, ControlProcess};
use smp_core::mollify::{
    mollify_error_scan, mollify_terminal, near_optimal_pipeline, probe_lattice, MollifierSpec, NearOptimalSpec,
    PathAggregate, PathFunctionalSpec,
};
use smp_core::mp::{
    brute_force_oracle, check_necessary, check_sufficient, grid_optimality_slack, optimize_control_with, tiny_instance,
    tree_cost, CheckSpec, OptimizerSpec, SufficiencySpec,
};
use smp_core::problem::{builtin_problem, lq_smooth_reference, terminal_vars, ValidatedProblem};
use smp_core::regression::RegressionSpec;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn builtin(name: &str) -> Result<(ValidatedProblem, ControlProcess), String> {
    let b = builtin_problem(name).map_err(err)?;
    let p = b.spec.validate().map_err(err)?;
    let u = match (&b.analytic, name) {
        (_, "lq_smooth") => ControlProcess::clamped(p.grid(), p.control_box(), lq_smooth_reference(p.grid()).control).map_err(err)?,
        (Some(a), _) => ControlProcess::from_fn(p.grid(), p.control_box(), |t| vec![a.control(p.grid(), t)]),
        (None, _) => return Err(format!("{name} has no reference control")),
    };
    Ok((p, u))
}

fn relative_rmse(est: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = est.iter().zip(exact).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = exact.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

/// Monte Carlo cost at the optimum against E[−(1 + W(1/2))²] = −3/2.
fn example1_value() -> Verdict {
    let (p, u) = builtin("example1")?;
    let wb = BrownianBatch::sample(p.grid(), 1, 100_000, 101);
    let e = estimate_cost(&p, &simulate_state(&p, &u, &wb).map_err(err)?);
    check((e.mean + 1.5).abs() <= 0.05, format!("J = {:.5} ± {:.1e}, target -1.5 ± 0.05", e.mean, e.stderr))
}

/// Regressed adjoint on [0, 1/2) against p = 2 + 2W, q = 2, and the
/// first-order check on the same batch.
fn example1_adjoint_and_mp() -> (Verdict, Verdict) {
    let run = || -> Result<(Verdict, Verdict), String> {
        let (p, u) = builtin("example1")?;
        let wb = BrownianBatch::sample(p.grid(), 1, 100_000, 102);
        let sb = simulate_state(&p, &u, &wb).map_err(err)?;
        let ab = solve_adjoint(&p, &sb, &wb, &RegressionSpec { degree: 1, ridge: 1e-8 }, None).map_err(err)?;
        let half = p.grid().checkpoints()[0];
        let (mut pe, mut px, mut qe, mut qx) = (vec![], vec![], vec![], vec![]);
        for path in 0..sb.paths() {
            let w = wb.cumulative(path);
            for k in 0..half {
                pe.push(ab.p(path, k)[0]);
                px.push(2.0 + 2.0 * w[k]);
                qe.push(ab.q(path, k)[0]);
                qx.push(2.0);
            }
        }
        let (rp, rq) = (relative_rmse(&pe, &px), relative_rmse(&qe, &qx));
        let adjoint = check(rp <= 0.05 && rq <= 0.05, format!("relative rmse p {rp:.4}, q {rq:.4} (≤ 0.05)"));

        let report = check_necessary(&p, &u, &ab, &sb, &CheckSpec::default()).map_err(err)?;
        let worst: Vec<String> = report
            .intervals
            .iter()
            .map(|iv| format!("{:.2e} ≤ 3·{:.1e}", iv.worst.mean, iv.worst.stderr))
            .collect();
        let within = report.intervals.iter().all(|iv| iv.worst.mean <= 3.0 * iv.worst.stderr + 1e-9);
        let at_zero: Vec<f64> = report
            .cells
            .iter()
            .filter(|c| c.interval == 0 && c.v == [0.0])
            .map(|c| c.estimate.mean)
            .collect();
        let dev = at_zero.iter().map(|m| (m + 2.0).abs()).fold(0.0, f64::max);
        let mp = check(
            report.pass && within && report.intervals.len() == 2 && !at_zero.is_empty() && dev <= 0.05,
            format!(
                "worst gaps [{}]; v=0 on (0,1/2): {} cells, max |est + 2| = {dev:.2e}",
                worst.join(", "),
                at_zero.len()
            ),
        );
        Ok((adjoint, mp))
    };
    run().unwrap_or_else(|e| (Err(e.clone()), Err(e)))
}

fn example2_constrained() -> Verdict {
    let b = builtin_problem("example2_transformed").map_err(err)?;
    let p = b.spec.validate().map_err(err)?;
    let c = b.constraints.ok_or("no constraints")?.validate(&p).map_err(err)?;
    let (_, u) = builtin("example2_transformed")?;
    // The noise is additive, so it shifts every cost by the same amount and
    // a small batch carries the full gradient information.
    let mut spec = ConstrainedSpec::default();
    spec.optimizer.paths = 200;
    let sol = solve_constrained(&p, &c, &u, &spec, 7).map_err(err)?;
    let beta = sol.multipliers.to_vec();
    let norm = (sol.multipliers.norm() - 1.0).abs();
    let s1 = beta[0] + beta[2];
    let s2 = (2.0 * beta[0] + beta[1] + beta[2]).abs();
    let mp = sol.report.as_ref().is_some_and(|r| r.pass);
    check(
        norm <= 1e-12 && s1 <= 1e-3 && s2 <= 1e-3 && mp,
        format!("β = {beta:.4?}, ||β||-1 = {norm:.1e}, β0+β2 = {s1:.2e}, |2β0+β1+β2| = {s2:.2e}, weighted check {}", if mp { "pass" } else { "fail" }),
    )
}

fn oracle_equivalence() -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..6 {
        let (spec, levels) = tiny_instance(seed);
        let p = spec.validate().map_err(err)?;
        let oracle = brute_force_oracle(&p, &levels).map_err(err)?;
        let wb = BrownianBatch::binomial_tree(p.grid(), 1);
        let opt = OptimizerSpec {
            resolution: levels.len(),
            polish: true,
            tolerance: 1e-10,
            ..OptimizerSpec::default()
        };
        let init = ControlProcess::constant(p.grid(), p.control_box(), &levels[levels.len() / 2]);
        let res = optimize_control_with(&p, &init, &opt, &wb).map_err(err)?;
        let exact = tree_cost(&p, &res.control).map_err(err)?;
        let slack = grid_optimality_slack(&p, &oracle.control, &levels).map_err(err)?;
        let sb = simulate_state(&p, &oracle.control, &wb).map_err(err)?;
        let ab = solve_adjoint(&p, &sb, &wb, &RegressionSpec { degree: 3, ridge: 1e-10 }, None).map_err(err)?;
        let report = check_necessary(
            &p,
            &oracle.control,
            &ab,
            &sb,
            &CheckSpec {
                resolution: levels.len(),
                slack,
                ..CheckSpec::default()
            },
        )
        .map_err(err)?;
        let diff = (exact - oracle.value).abs();
        ok &= diff <= 1e-10 && report.pass && p.grid().steps() <= 3 && levels.len() <= 7;
        lines.push(format!("{}×{} |Δ|={diff:.0e} mp {}", p.grid().steps(), levels.len(), if report.pass { "ok" } else { "FAIL" }));
    }
    check(ok, lines.join("; "))
}

/// Duality residual at `steps` and `2·steps`; the change measures the
/// time-step bias.
fn duality_case(name: &str, seed: u64) -> Result<(bool, String), String> {
    let mut results = Vec::new();
    for factor in [1, 2] {
        let b = builtin_problem(name).map_err(err)?;
        let steps = b.spec.grid.steps() * factor;
        let b = b.with_steps(steps).map_err(err)?;
        let p = b.spec.validate().map_err(err)?;
        let u = match name {
            "lq_smooth" => ControlProcess::clamped(p.grid(), p.control_box(), lq_smooth_reference(p.grid()).control).map_err(err)?,
            _ => {
                let a = b.analytic.as_ref().ok_or("no closed form")?;
                ControlProcess::from_fn(p.grid(), p.control_box(), |t| vec![a.control(p.grid(), t)])
            }
        };
        let wb = BrownianBatch::sample(p.grid(), p.brownian_dim(), 20_000, seed);
        let sb = simulate_state(&p, &u, &wb).map_err(err)?;
        let ab = solve_adjoint(&p, &sb, &wb, &RegressionSpec { degree: 2, ridge: 1e-8 }, None).map_err(err)?;
        let target = ControlProcess::from_fn(p.grid(), p.control_box(), |t| vec![0.25 + 0.5 * t]);
        let dir = target.minus(&u);
        let vb = simulate_variational(&p, &sb, &dir, &wb).map_err(err)?;
        results.push(duality_residual(&p, &ab, &sb, &dir, &vb, None).map_err(err)?);
    }
    let bias = (results[0].difference.mean - results[1].difference.mean).abs();
    let (r, se) = (results[0].residual(), results[0].combined_stderr());
    Ok((r <= 3.0 * se + bias, format!("{name}: |r| {r:.2e} ≤ 3·{se:.1e} + bias {bias:.1e}")))
}

fn duality() -> Verdict {
    let (a, da) = duality_case("example1", 106)?;
    let (b, db) = duality_case("lq_smooth", 107)?;
    check(a && b, format!("{da}; {db}"))
}

fn gateaux() -> Verdict {
    let b = builtin_problem("lq_smooth").map_err(err)?;
    let p = b.spec.validate().map_err(err)?;
    let base = ControlProcess::constant(p.grid(), p.control_box(), &[0.2]);
    let steps = p.grid().steps();
    let dir = ControlProcess::from_values(steps, 1, (0..steps).map(|k| 1.0 - 2.0 * k as f64 / steps as f64).collect()).map_err(err)?;
    let wb = BrownianBatch::sample(p.grid(), 1, 5_000, 108);
    let r = gateaux_check(&p, &base, &dir, &[0.1, 0.05, 0.025], &wb).map_err(err)?;
    let order = r.order.ok_or("gap vanished")?;
    check((order - 1.0).abs() <= 0.3, format!("empirical order {order:.3} (1 ± 0.3)"))
}

fn sufficiency() -> Verdict {
    let (p, u) = builtin("lq_smooth")?;
    let wb = BrownianBatch::sample(p.grid(), 1, 20_000, 109);
    let sb = simulate_state(&p, &u, &wb).map_err(err)?;
    let ab = solve_adjoint(&p, &sb, &wb, &RegressionSpec::default(), None).map_err(err)?;
    let lq = check_sufficient(&p, &u, &ab, &sb, &SufficiencySpec::default()).map_err(err)?;

    let (p, u) = builtin("example1")?;
    let wb = BrownianBatch::sample(p.grid(), 1, 20_000, 110);
    let sb = simulate_state(&p, &u, &wb).map_err(err)?;
    let ab = solve_adjoint(&p, &sb, &wb, &RegressionSpec { degree: 1, ridge: 1e-8 }, None).map_err(err)?;
    let ex1 = check_sufficient(&p, &u, &ab, &sb, &SufficiencySpec::default()).map_err(err)?;
    check(
        lq.certified && !ex1.certified && !ex1.terminal_convexity.pass,
        format!(
            "lq_smooth: {}; example1: {} (terminal convexity worst violation {:.2e})",
            lq.conclusion(),
            ex1.conclusion(),
            ex1.terminal_convexity.worst_violation
        ),
    )
}

fn mollifier() -> Verdict {
    let vars = terminal_vars(1, 1);
    let abs = parse_expr("abs(y1)", &vars).map_err(err)?;
    let eps = 0.1;
    let phi = mollify_terminal(&abs, &vars, 1, &MollifierSpec::default().with_epsilon(eps)).map_err(err)?;
    let at_zero = phi.evaluate(&[0.0]).map_err(err)?.0;
    let want = eps * (2.0 / PI).sqrt();
    let probes = probe_lattice(1, 41, -2.0, 2.0);
    let spec = MollifierSpec::default();
    let scan = mollify_error_scan(&abs, &vars, 1, 1.0, &[0.2, 0.1, 0.05], &probes, &spec).map_err(err)?;
    let slope = scan.slope.ok_or("no slope")?;
    let affine = parse_expr("3*y1 - 0.5", &vars).map_err(err)?;
    let fixed = mollify_error_scan(&affine, &vars, 1, 3.0, &[0.2, 0.1, 0.05], &probes, &spec).map_err(err)?;
    let worst_affine = fixed.rows.iter().map(|r| r.sup_error).fold(0.0, f64::max);
    check(
        (at_zero - 0.79788 * eps).abs() <= 1e-6 && (at_zero - want).abs() <= 1e-12 && (slope - 1.0).abs() <= 0.1 && worst_affine <= 1e-12,
        format!("Φε(0) = {at_zero:.9} (0.79788·ε = {:.6}), slope {slope:.4}, affine error {worst_affine:.1e}", 0.79788 * eps),
    )
}

fn near_optimal_gap() -> Verdict {
    let spec = builtin_problem("example1").map_err(err)?.spec;
    let pf = PathFunctionalSpec {
        aggregate: PathAggregate::Terminal,
        integrand: "abs(x)".into(),
        lipschitz: 1.0,
    };
    let run = |eps: f64| {
        let cfg = NearOptimalSpec {
            checkpoints: 2,
            mollifier: MollifierSpec::default().with_epsilon(eps),
            optimizer: OptimizerSpec {
                paths: 2000,
                max_iterations: 40,
                ..OptimizerSpec::default()
            },
            probe_paths: 64,
        };
        near_optimal_pipeline(&spec, &pf, &cfg, None, 111).map_err(err)
    };
    let (a, b) = (run(0.1)?, run(0.05)?);
    let c = a.measured_c().max(b.measured_c());
    let stderr = (a.value.stderr.powi(2) + b.value.stderr.powi(2)).sqrt();
    let gap = (a.value.mean - b.value.mean).abs();
    let bound = c * 0.05 + 3.0 * stderr;
    check(
        gap <= bound && a.certificate.pass && b.certificate.pass,
        format!("J^0.1 = {:.5}, J^0.05 = {:.5}, gap {gap:.2e} ≤ C·0.05 + 3·se = {bound:.2e} (C = {c:.5})", a.value.mean, b.value.mean),
    )
}

const ABS_CONFIG: &str = r#"
seed = 12
[problem.spec]
name = "abs_terminal"
state_dim = 1
brownian_dim = 1
control_dim = 1
x0 = [0.0]
drift = ["u"]
diffusion = [["0.3"]]
running_cost = "0.5*u^2"
terminal_cost = "abs(y1)"
grid = { horizon = 1.0, steps = 20, checkpoints = [1.0] }
control_box = { lower = [-1.0], upper = [1.0] }
[scan]
lipschitz = 1.0
[path_functional]
aggregate = "max"
integrand = "abs(x)"
lipschitz = 1.0
"#;

/// CSV bodies (header block stripped) of every CSV in the run directory
/// printed by the command.
fn csv_bodies(dir: &Path, args: &[&str], workers: &str) -> Result<Vec<(String, String)>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_smp"))
        .args(args)
        .args(["--workers", workers])
        .current_dir(dir)
        .output()
        .map_err(err)?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    let run = stdout
        .lines()
        .find_map(|l| l.strip_prefix("artifacts: "))
        .ok_or_else(|| format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir.join(run)).map_err(err)? {
        let path = entry.map_err(err)?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let text = std::fs::read_to_string(&path).map_err(err)?;
            let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
            files.push((path.file_name().unwrap().to_string_lossy().into_owned(), body));
        }
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Verdict {
    let runs: Vec<Vec<&str>> = vec![
        vec!["simulate", "--builtin", "lq_smooth", "--paths", "2000", "--seed", "5", "--set", "dump.max_paths=2000"],
        vec!["adjoint", "--builtin", "example1", "--paths", "2000", "--seed", "5", "--set", "dump.max_paths=2000"],
        vec!["verify-mp", "--builtin", "example1", "--paths", "2000", "--seed", "5"],
        vec!["verify-sufficient", "--builtin", "lq_smooth", "--candidate", "reference", "--paths", "2000", "--seed", "5"],
        vec!["optimize", "--builtin", "lq_smooth", "--paths", "500", "--steps", "40", "--seed", "5"],
        vec!["constrained", "--builtin", "example2_transformed", "--paths", "100", "--steps", "40", "--seed", "5"],
        vec!["mollify-scan", "--config", "abs.toml"],
        vec!["near-optimal", "--config", "abs.toml", "--paths", "200", "--set", "path_functional.aggregate=\"terminal\""],
        vec!["oracle", "--builtin", "example1", "--steps", "2", "--ugrid", "0,0.25,0.5,0.75,1", "--seed", "5"],
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for args in &runs {
        let mut bodies = Vec::new();
        for workers in ["1", "4"] {
            let dir = tempfile::tempdir().map_err(err)?;
            std::fs::write(dir.path().join("abs.toml"), ABS_CONFIG).map_err(err)?;
            bodies.push(csv_bodies(dir.path(), args, workers)?);
        }
        let same = !bodies[0].is_empty() && bodies[0] == bodies[1];
        ok &= same;
        lines.push(format!("{} {}", args[0], if same { "identical" } else { "DIFFERS" }));
    }
    check(ok, lines.join(", "))
}

fn main() {
    let start = Instant::now();
    let mut failures = 0;
    let mut report = |id: usize, name: &str, verdict: Verdict, secs: f64| {
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {id:>2} {name}: {detail} ({secs:.1}s)");
    };
    let timed = |f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = f();
        (v, t.elapsed().as_secs_f64())
    };

    let (v, s) = timed(&example1_value);
    report(1, "Example 1 value", v, s);
    let t = Instant::now();
    let (adjoint, mp) = example1_adjoint_and_mp();
    let s = t.elapsed().as_secs_f64();
    report(2, "Example 1 adjoint", adjoint, s);
    report(3, "Example 1 first-order check", mp, 0.0);
    let cases: [(usize, &str, &dyn Fn() -> Verdict); 8] = [
        (4, "Example 2 constrained multipliers", &example2_constrained),
        (5, "oracle equivalence", &oracle_equivalence),
        (6, "duality identity", &duality),
        (7, "Gateaux consistency", &gateaux),
        (8, "sufficiency", &sufficiency),
        (9, "mollifier", &mollifier),
        (10, "near-optimal gap", &near_optimal_gap),
        (11, "determinism across worker counts", &determinism),
    ];
    for (id, name, f) in cases {
        let (v, s) = timed(f);
        report(id, name, v, s);
    }
    println!("acceptance: {} of 11 criteria passed in {:.0}s", 11 - failures, start.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
