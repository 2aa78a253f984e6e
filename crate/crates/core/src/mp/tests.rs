use proptest::prelude::*;

use super::*;
use crate::adjoint::{analytic_adjoint, solve_adjoint};
use crate::forward::{estimate_cost, simulate_state, BrownianBatch};
use crate::problem::{builtin_problem, lq_smooth_reference, AnalyticSolution, ControlBox};
use crate::regression::RegressionSpec;

fn validated(name: &str) -> ValidatedProblem {
    builtin_problem(name).unwrap().spec.validate().unwrap()
}

fn example1_optimum(p: &ValidatedProblem) -> ControlProcess {
    ControlProcess::from_fn(p.grid(), p.control_box(), |t| vec![if t < 0.5 { 1.0 } else { 0.0 }])
}

/// Exact discrete cost of an open-loop control on Example 1:
/// `−1 − Δt·Σ_{first half} u² + Δt·Σ_{second half} u²`.
fn example1_exact_cost(p: &ValidatedProblem, u: &ControlProcess) -> f64 {
    let half = p.grid().checkpoints()[0];
    let dt = p.grid().dt();
    -1.0 + (0..u.steps())
        .map(|k| {
            let s = u.value(k)[0].powi(2) * dt;
            if k < half {
                -s
            } else {
                s
            }
        })
        .sum::<f64>()
}

#[test]
fn hamiltonian_of_lq_by_hand() {
    let p = validated("lq_smooth");
    // b = −x/2 + u, σ = 0.2 + 0.1x, f = u²/2 + x²/4.
    let (x, u, pp, q) = (0.8, -0.3, 1.5, -0.7);
    let b = -0.5 * x + u;
    let s = 0.2 + 0.1 * x;
    let f = 0.5 * u * u + 0.25 * x * x;
    let h = hamiltonian(&p, 0.1, &[x], &[u], &[pp], &[q], 1.0);
    assert!((h - (b * pp + s * q - f)).abs() < 1e-14);
    let h0 = hamiltonian(&p, 0.1, &[x], &[u], &[pp], &[q], 0.0);
    assert!((h0 - (b * pp + s * q)).abs() < 1e-14);
    let gu = hamiltonian_grad_u(&p, 0.1, &[x], &[u], &[pp], &[q], 1.0);
    assert!((gu[0] - (pp - u)).abs() < 1e-14);
    let gx = hamiltonian_grad_x(&p, 0.1, &[x], &[u], &[pp], &[q], 1.0);
    assert!((gx[0] - (-0.5 * pp + 0.1 * q - 0.5 * x)).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hamiltonian_gradients_match_central_differences(
        seed in 0u64..500,
        x in -2.0f64..2.0,
        u in -1.0f64..1.0,
        pp in -3.0f64..3.0,
        q in -3.0f64..3.0,
        beta0 in 0.0f64..2.0,
    ) {
        let (spec, _) = tiny_instance(seed);
        let pr = spec.validate().unwrap();
        let u = pr.control_box().clamp(0, u);
        let h = 1e-6;
        let hv = |x: f64, u: f64| hamiltonian(&pr, 0.25, &[x], &[u], &[pp], &[q], beta0);
        let gu = hamiltonian_grad_u(&pr, 0.25, &[x], &[u], &[pp], &[q], beta0);
        let gx = hamiltonian_grad_x(&pr, 0.25, &[x], &[u], &[pp], &[q], beta0);
        let fu = (hv(x, u + h) - hv(x, u - h)) / (2.0 * h);
        let fx = (hv(x + h, u) - hv(x - h, u)) / (2.0 * h);
        prop_assert!((fu - gu[0]).abs() <= 1e-6 * fu.abs().max(1.0));
        prop_assert!((fx - gx[0]).abs() <= 1e-6 * fx.abs().max(1.0));
    }

    /// Shifting the terminal cost by a constant changes every tree cost by
    /// that constant and leaves the oracle's argmin unchanged.
    #[test]
    fn oracle_argmin_is_invariant_to_constant_shifts(seed in 0u64..200, shift in -5.0f64..5.0) {
        let (spec, levels) = tiny_instance(seed);
        let base = brute_force_oracle(&spec.validate().unwrap(), &levels).unwrap();
        let mut shifted = spec.clone();
        shifted.terminal_cost = format!("{} + ({shift})", spec.terminal_cost);
        let moved = brute_force_oracle(&shifted.validate().unwrap(), &levels).unwrap();
        prop_assert_eq!(&base.control, &moved.control);
        prop_assert!((moved.value - base.value - shift).abs() < 1e-9);
    }
}

#[test]
fn example1_optimum_passes_and_constant_half_fails() {
    let p = validated("example1");
    let wb = BrownianBatch::sample(p.grid(), 1, 20_000, 31);
    let spec = RegressionSpec { degree: 1, ridge: 1e-8 };

    let u = example1_optimum(&p);
    let sb = simulate_state(&p, &u, &wb).unwrap();
    let ab = solve_adjoint(&p, &sb, &wb, &spec, None).unwrap();
    let report = check_necessary(&p, &u, &ab, &sb, &CheckSpec::default()).unwrap();
    assert!(report.pass, "{}", report.summary());
    assert!(!report.vacuous);
    assert_eq!(report.intervals.len(), 2);

    let half = ControlProcess::constant(p.grid(), p.control_box(), &[0.5]);
    let sb = simulate_state(&p, &half, &wb).unwrap();
    let ab = solve_adjoint(&p, &sb, &wb, &spec, None).unwrap();
    let report = check_necessary(&p, &half, &ab, &sb, &CheckSpec::default()).unwrap();
    assert!(!report.pass);
    // Both halves want to move: up on the first, down on the second.
    assert!(report.intervals.iter().all(|iv| !iv.pass));
    let down = report.cells.iter().filter(|c| c.interval == 1 && c.v == [0.0]).collect::<Vec<_>>();
    assert!(!down.is_empty());
    for cell in down {
        assert!((cell.estimate.mean - 0.5).abs() < 0.05, "{:?}", cell.estimate);
    }
}

#[test]
fn closed_form_adjoint_gives_exact_pass() {
    let p = validated("example1");
    let wb = BrownianBatch::sample(p.grid(), 1, 200, 32);
    let u = example1_optimum(&p);
    let sb = simulate_state(&p, &u, &wb).unwrap();
    let ab = analytic_adjoint(&AnalyticSolution::Example1, &p, &wb, None).unwrap();
    let report = check_necessary(&p, &u, &ab, &sb, &CheckSpec::default()).unwrap();
    assert!(report.pass, "{}", report.summary());
    // With q ≡ 2 on the first half, E[H_u(v − 1)] = 2(v − 1).
    let c = report.cell(report.cells[0].step, &[0.0]).unwrap();
    assert!((c.estimate.mean + 2.0).abs() < 1e-12);
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("interval,step,time,v1,estimate,stderr,pass\n"));
}

#[test]
fn point_control_set_is_vacuous() {
    let b = builtin_problem("lq_smooth").unwrap();
    let mut spec = b.spec.clone();
    spec.control_box = ControlBox::uniform(1, 0.3, 0.3).unwrap();
    let p = spec.validate().unwrap();
    let u = ControlProcess::constant(p.grid(), p.control_box(), &[0.3]);
    let wb = BrownianBatch::sample(p.grid(), 1, 500, 33);
    let sb = simulate_state(&p, &u, &wb).unwrap();
    let ab = solve_adjoint(&p, &sb, &wb, &RegressionSpec::default(), None).unwrap();
    let report = check_necessary(&p, &u, &ab, &sb, &CheckSpec::default()).unwrap();
    assert!(report.pass && report.vacuous);
    assert!(report.summary().contains("vacuous"));
}

#[test]
fn invalid_check_specs_are_rejected() {
    for spec in [
        CheckSpec {
            resolution: 1,
            ..CheckSpec::default()
        },
        CheckSpec {
            multiplier: -1.0,
            ..CheckSpec::default()
        },
        CheckSpec {
            times_per_interval: 0,
            ..CheckSpec::default()
        },
    ] {
        assert!(matches!(spec.validate(), Err(MpError::Spec(_))));
    }
}

#[test]
fn lq_reference_is_certified() {
    let p = validated("lq_smooth");
    let reference = lq_smooth_reference(p.grid());
    let u = ControlProcess::from_values(p.grid().steps(), 1, reference.control.clone()).unwrap();
    let wb = BrownianBatch::sample(p.grid(), 1, 20_000, 34);
    let sb = simulate_state(&p, &u, &wb).unwrap();
    let ab = solve_adjoint(&p, &sb, &wb, &RegressionSpec::default(), None).unwrap();
    let report = check_sufficient(&p, &u, &ab, &sb, &SufficiencySpec::default()).unwrap();
    assert!(report.certified, "{}", report.summary());
    assert_eq!(report.conclusion(), "certified optimal up to sampling");
    let mp = check_necessary(&p, &u, &ab, &sb, &CheckSpec::default()).unwrap();
    assert!(mp.pass, "{}", mp.summary());
}

#[test]
fn example1_fails_terminal_convexity() {
    let p = validated("example1");
    let u = example1_optimum(&p);
    let wb = BrownianBatch::sample(p.grid(), 1, 2_000, 35);
    let sb = simulate_state(&p, &u, &wb).unwrap();
    let ab = analytic_adjoint(&AnalyticSolution::Example1, &p, &wb, None).unwrap();
    let report = check_sufficient(&p, &u, &ab, &sb, &SufficiencySpec::default()).unwrap();
    assert!(!report.terminal_convexity.pass);
    assert!(report.terminal_convexity.witness.is_some());
    assert!(!report.certified);
    assert_eq!(report.conclusion(), "sufficiency inconclusive");
}

#[test]
fn linear_terminal_cost_is_convex() {
    let p = validated("linear_terminal");
    let u = ControlProcess::constant(p.grid(), p.control_box(), &[0.0]);
    let wb = BrownianBatch::sample(p.grid(), 1, 2_000, 36);
    let sb = simulate_state(&p, &u, &wb).unwrap();
    let ab = solve_adjoint(&p, &sb, &wb, &RegressionSpec::default(), None).unwrap();
    let report = check_sufficient(&p, &u, &ab, &sb, &SufficiencySpec::default()).unwrap();
    assert!(report.terminal_convexity.pass);
    assert!(report.terminal_convexity.worst_violation <= 1e-12);
}

#[test]
fn tree_cost_matches_simulation_on_the_tree_batch() {
    for seed in 0..20 {
        let (spec, levels) = tiny_instance(seed);
        let p = spec.validate().unwrap();
        let wb = BrownianBatch::binomial_tree(p.grid(), 1);
        let vals: Vec<f64> = (0..p.grid().steps()).map(|k| levels[(k * 2 + 1) % levels.len()][0]).collect();
        let u = ControlProcess::from_values(p.grid().steps(), 1, vals).unwrap();
        let sim = estimate_cost(&p, &simulate_state(&p, &u, &wb).unwrap()).mean;
        let tree = tree_cost(&p, &u).unwrap();
        assert!((sim - tree).abs() <= 1e-12 * tree.abs().max(1.0), "seed {seed}: {sim} vs {tree}");
    }
}

#[test]
fn optimizer_reaches_the_oracle_on_tiny_trees() {
    for seed in 0..25 {
        let (spec, levels) = tiny_instance(seed);
        let p = spec.validate().unwrap();
        let oracle = brute_force_oracle(&p, &levels).unwrap();
        let wb = BrownianBatch::binomial_tree(p.grid(), 1);
        let opt = OptimizerSpec {
            resolution: levels.len(),
            polish: true,
            tolerance: 1e-10,
            ..OptimizerSpec::default()
        };
        let init = ControlProcess::constant(p.grid(), p.control_box(), &levels[levels.len() / 2]);
        let res = optimize_control_with(&p, &init, &opt, &wb).unwrap();
        let exact = tree_cost(&p, &res.control).unwrap();
        assert!((exact - oracle.value).abs() <= 1e-10, "seed {seed}: {exact} vs {}", oracle.value);
        assert!((res.value - exact).abs() <= 1e-10);
    }
}

#[test]
fn oracle_ties_resolve_to_the_first_sequence() {
    let (mut spec, levels) = tiny_instance(3);
    spec.running_cost = "0".into();
    spec.terminal_cost = "0".into();
    let p = spec.validate().unwrap();
    let r = brute_force_oracle(&p, &levels).unwrap();
    assert_eq!(r.value, 0.0);
    assert_eq!(r.near_ties, r.evaluated);
    assert!(r.control.values().iter().all(|&v| v == levels[0][0]));
}

#[test]
fn oracle_picks_the_lower_bound_for_a_linear_cost() {
    let (mut spec, levels) = tiny_instance(4);
    spec.drift = vec!["u".into()];
    spec.diffusion = vec![vec!["0.3".into()]];
    spec.running_cost = "0".into();
    spec.terminal_cost = (1..=spec.grid.checkpoint_count()).map(|i| format!("y{i}")).collect::<Vec<_>>().join(" + ");
    let p = spec.validate().unwrap();
    let r = brute_force_oracle(&p, &levels).unwrap();
    let lo = p.control_box().lower()[0];
    assert!(r.control.values().iter().all(|&v| v == lo));
    assert_eq!(r.near_ties, 1);
}

#[test]
fn oracle_rejects_large_problems() {
    let p = validated("lq_smooth");
    assert!(matches!(brute_force_oracle(&p, &[vec![0.0]]), Err(MpError::Oracle(_))));
    let (spec, _) = tiny_instance(0);
    let p = spec.validate().unwrap();
    let many: Vec<Vec<f64>> = (0..8).map(|_| vec![p.control_box().lower()[0]]).collect();
    assert!(matches!(brute_force_oracle(&p, &many), Err(MpError::Oracle(_))));
}

#[test]
fn example1_optimizer_finds_the_bang_bang_control() {
    let p = validated("example1");
    let init = ControlProcess::constant(p.grid(), p.control_box(), &[0.5]);
    let spec = OptimizerSpec {
        paths: 4_000,
        max_iterations: 60,
        ..OptimizerSpec::default()
    };
    let res = optimize_control(&p, &init, &spec, 40).unwrap();
    let exact = example1_exact_cost(&p, &res.control);
    assert!(exact <= -1.45, "exact cost {exact}");
    assert!(res.trace.windows(2).all(|w| w[1].cost <= w[0].cost + 1e-12));
}

#[test]
fn projected_gradient_matches_lq_reference_on_moments() {
    // The sampled objective is replaced by the exact moment cost, so the
    // optimizer must recover the reference minimizer.
    struct Moments<'a>(&'a ValidatedProblem);
    impl Objective for Moments<'_> {
        fn value(&self, u: &ControlProcess) -> Result<f64, MpError> {
            Ok(crate::problem::lq_smooth_moment_cost(self.0.grid(), u.values()))
        }
        fn gradient(&self, u: &ControlProcess) -> Result<ObjectiveGradient, MpError> {
            let dt = self.0.grid().dt();
            let mut mean = u.clone();
            for k in 0..u.steps() {
                let h = 1e-6;
                let (mut a, mut b) = (u.clone(), u.clone());
                a.value_mut(k)[0] += h;
                b.value_mut(k)[0] -= h;
                mean.value_mut(k)[0] = -(self.value(&a)? - self.value(&b)?) / (2.0 * h) / dt;
            }
            Ok(ObjectiveGradient {
                mean,
                stderr: ControlProcess::zeros(u.steps(), 1),
            })
        }
    }
    let p = builtin_problem("lq_smooth").unwrap().with_steps(20).unwrap().spec.validate().unwrap();
    let reference = lq_smooth_reference(p.grid());
    let init = ControlProcess::constant(p.grid(), p.control_box(), &[0.0]);
    let spec = OptimizerSpec {
        method: Method::ProjectedGradient,
        tolerance: 1e-12,
        max_iterations: 500,
        ..OptimizerSpec::default()
    };
    let res = minimize(&Moments(&p), &p, &init, &spec).unwrap();
    assert!((res.value - reference.value).abs() < 1e-8, "{} vs {}", res.value, reference.value);
    assert!(res.converged || res.stalled);
}

#[test]
fn optimizer_rejects_out_of_box_start() {
    let p = validated("example1");
    let init = ControlProcess::constant(p.grid(), &ControlBox::uniform(1, 2.0, 2.0).unwrap(), &[2.0]);
    assert!(matches!(
        optimize_control(&p, &init, &OptimizerSpec::default(), 0),
        Err(MpError::Spec(_))
    ));
}

#[test]
fn first_order_check_passes_at_oracle_optima() {
    for seed in 0..10 {
        let (spec, levels) = tiny_instance(seed);
        let p = spec.validate().unwrap();
        let oracle = brute_force_oracle(&p, &levels).unwrap();
        let slack = grid_optimality_slack(&p, &oracle.control, &levels).unwrap();
        let wb = BrownianBatch::binomial_tree(p.grid(), 1);
        let sb = simulate_state(&p, &oracle.control, &wb).unwrap();
        let ab = solve_adjoint(&p, &sb, &wb, &RegressionSpec { degree: 3, ridge: 1e-10 }, None).unwrap();
        let check = CheckSpec {
            resolution: levels.len(),
            slack,
            ..CheckSpec::default()
        };
        let report = check_necessary(&p, &oracle.control, &ab, &sb, &check).unwrap();
        assert!(report.pass, "seed {seed} slack {slack}: {}", report.summary());
    }
}
