use super::*;

fn example1() -> ProblemSpec {
    builtin_problem("example1").unwrap().spec
}

#[test]
fn grid_snaps_checkpoints_to_nodes() {
    let g = TimeGrid::new(1.0, 200, &[0.5, 1.0]).unwrap();
    assert_eq!(g.checkpoints(), &[100, 200]);
    assert_eq!(g.nodes(), 201);
    assert!((g.time(37) - 0.185).abs() < 1e-15);
    assert_eq!(g.checkpoint_at(100), Some(0));
    assert_eq!(g.checkpoint_at(99), None);
}

#[test]
fn single_step_grid() {
    let g = TimeGrid::new(1.0, 1, &[1.0]).unwrap();
    assert_eq!(g.checkpoints(), &[1]);
    assert_eq!(g.checkpoint_count(), 1);
}

#[test]
fn grid_rejects_bad_input() {
    assert!(matches!(TimeGrid::new(1.0, 3, &[0.5, 1.0]), Err(ProblemError::Grid(_))));
    assert!(TimeGrid::new(1.0, 10, &[1.0, 0.5]).is_err());
    assert!(TimeGrid::new(0.0, 10, &[0.0]).is_err());
    assert!(TimeGrid::new(-1.0, 10, &[1.0]).is_err());
    assert!(TimeGrid::new(1.0, 0, &[1.0]).is_err());
    assert!(TimeGrid::new(1.0, 10, &[0.5]).is_err(), "last checkpoint must be T");
    assert!(TimeGrid::new(1.0, 10, &[0.50, 0.52, 1.0]).is_err(), "both snap to node 5");
    // Within a third of a step the checkpoint snaps.
    let g = TimeGrid::new(1.0, 10, &[0.33, 1.0]).unwrap();
    assert_eq!(g.checkpoints(), &[3, 10]);
}

#[test]
fn intervals_partition_steps() {
    let g = TimeGrid::new(1.0, 8, &[0.25, 0.5, 1.0]).unwrap();
    assert_eq!(g.interval_steps(0), 0..2);
    assert_eq!(g.interval_steps(1), 2..4);
    assert_eq!(g.interval_steps(2), 4..8);
    for i in 0..3 {
        for k in g.interval_steps(i) {
            assert_eq!(g.interval_of_step(k), i);
        }
    }
    let zero_first = TimeGrid::new(1.0, 4, &[0.0, 1.0]).unwrap();
    assert_eq!(zero_first.interval_steps(0), 0..0);
    assert_eq!(zero_first.interval_of_step(0), 1);
}

#[test]
fn control_box_grid_and_clamp() {
    let b = ControlBox::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
    assert_eq!(b.axis(0, 3), vec![0.0, 0.5, 1.0]);
    let g = b.grid(3);
    assert_eq!(g.len(), 9);
    assert_eq!(g[1], vec![0.0, 0.0]);
    assert_eq!(b.clamp(1, 3.0), 1.0);
    assert!(b.contains(&[0.5, -1.0]));
    assert!(!b.contains(&[1.5, 0.0]));
    assert!((b.diameter() - 5f64.sqrt()).abs() < 1e-15);
    assert!(ControlBox::new(vec![1.0], vec![0.0]).is_err());
    assert!(ControlBox::new(vec![0.0], vec![f64::INFINITY]).is_err());
    let point = ControlBox::uniform(1, 0.3, 0.3).unwrap();
    assert!(point.is_point());
    assert_eq!(point.grid(11), vec![vec![0.3]]);
}

#[test]
fn example1_validates() {
    let p = example1().validate().unwrap();
    assert!(p.advisories().is_empty());
    assert!(!p.dynamics_depend_on_state());
    assert_eq!(p.terminal_vars().names(), &["y1", "y2"]);
    let mut g = [0.0; 2];
    p.terminal().gradient(&[1.5, 2.0], &mut g);
    assert_eq!(g, [-6.0, 4.0]);
    assert!(p.terminal().adapted_gradient(0));
    assert!(p.terminal().adapted_gradient(1));
    // σ = u: ∂σ/∂u = 1, ∂σ/∂x = 0.
    let s = &p.diffusion()[0][0];
    assert_eq!(s.du[0].constant(), Some(1.0));
    assert!(s.dx[0].is_zero());
}

#[test]
fn nonsmooth_terminal_is_flagged_not_rejected() {
    let mut spec = example1();
    spec.terminal_cost = "abs(y1)".into();
    let p = spec.validate().unwrap();
    assert!(p.advisories().iter().any(|a| a.contains("mollify before adjoint")));
    assert_eq!(p.terminal().value(&[-3.0, 0.0]), 3.0);
    assert!(!p.terminal().is_differentiable());
}

#[test]
fn dimension_errors() {
    let mut spec = example1();
    spec.brownian_dim = 2;
    assert!(matches!(spec.validate(), Err(ProblemError::Dimension(_))));
    let mut spec = example1();
    spec.x0 = vec![1.0, 2.0];
    assert!(matches!(spec.validate(), Err(ProblemError::Dimension(_))));
    let mut spec = example1();
    spec.drift = vec!["0".into(), "1".into()];
    assert!(matches!(spec.validate(), Err(ProblemError::Dimension(_))));
}

#[test]
fn expression_errors_name_the_field() {
    let mut spec = example1();
    spec.diffusion[0][0] = "u * z".into();
    match spec.validate() {
        Err(ProblemError::Expr { field, .. }) => assert_eq!(field, "diffusion[1][1]"),
        other => panic!("unexpected {other:?}"),
    }
    let mut spec = example1();
    spec.terminal_cost = "y3".into();
    assert!(matches!(spec.validate(), Err(ProblemError::Expr { .. })));
    let mut spec = example1();
    spec.drift[0] = "abs(x)".into();
    assert!(matches!(
        spec.validate(),
        Err(ProblemError::Expr { source: crate::expr::ExprError::NonDifferentiable(_), .. })
    ));
}

#[test]
fn validation_is_idempotent() {
    for name in builtin_names() {
        let p = builtin_problem(name).unwrap().spec.validate().unwrap();
        let again = p.spec().validate().unwrap();
        assert_eq!(p.cache_digest(), again.cache_digest(), "{name}");
    }
}

#[test]
fn lipschitz_probe_reports_slopes() {
    let p = builtin_problem("lq_smooth").unwrap().spec.validate().unwrap();
    let l = p.lipschitz();
    assert!((l.drift_slope - 0.5).abs() < 1e-9);
    assert!((l.diffusion_slope - 0.1).abs() < 1e-9);
    assert!(l.within_bound);
    let mut spec = builtin_problem("lq_smooth").unwrap().spec;
    spec.drift[0] = "x^5".into();
    let p = spec.validate().unwrap();
    assert!(!p.lipschitz().within_bound);
    assert!(p.advisories().iter().any(|a| a.contains("Lipschitz")));
}

#[test]
fn multi_dimensional_variable_names() {
    let spec = ProblemSpec {
        name: "2d".into(),
        state_dim: 2,
        brownian_dim: 2,
        control_dim: 1,
        x0: vec![0.0, 1.0],
        drift: vec!["x2".into(), "u1 - x1".into()],
        diffusion: vec![vec!["0.1".into(), "0".into()], vec!["0".into(), "0.2*x2".into()]],
        running_cost: "u^2".into(),
        terminal_cost: "y1_1*y2_2 + y2_1".into(),
        grid: TimeGrid::new(1.0, 4, &[0.5, 1.0]).unwrap(),
        control_box: ControlBox::uniform(1, -1.0, 1.0).unwrap(),
    };
    let p = spec.validate().unwrap();
    assert_eq!(p.terminal_vars().names(), &["y1_1", "y1_2", "y2_1", "y2_2"]);
    // ∂/∂y1 depends on y2_2, so checkpoint 0's gradient is not adapted.
    assert!(!p.terminal().adapted_gradient(0));
    assert!(p.terminal().adapted_gradient(1));
    assert!(p.dynamics_depend_on_state());
}

#[test]
fn unknown_builtin() {
    assert_eq!(
        builtin_problem("nope").unwrap_err(),
        ProblemError::UnknownBuiltin("nope".into())
    );
}

#[test]
fn example1_analytic_adjoint_has_jump_at_half() {
    let b = builtin_problem("example1").unwrap().with_steps(4).unwrap();
    let a = b.analytic.unwrap();
    let g = &b.spec.grid;
    let w = [0.0, 0.3, -0.2, 0.5, 0.1];
    assert_eq!(a.adjoint_p(g, 1, &w, None), (2.6, 2.6));
    let (left, right) = a.adjoint_p(g, 2, &w, None);
    assert!((left - 1.6).abs() < 1e-15 && (right + 1.6).abs() < 1e-15);
    // jump = 4·X̄(1/2) with X̄(1/2) = 1 + W(1/2)
    assert!((left - right - 4.0 * 0.8).abs() < 1e-15);
    assert_eq!(a.adjoint_p(g, 4, &w, None), (-1.6, -1.6));
    assert_eq!(a.adjoint_q(g, 1), 2.0);
    assert_eq!(a.adjoint_q(g, 2), 0.0);
    assert_eq!(a.state(g, 4, &w), Some(0.8));
    assert_eq!(a.control(g, 0.25), 1.0);
    assert_eq!(a.control(g, 0.5), 0.0);
}

#[test]
fn linear_terminal_adjoint_is_minus_future_weights() {
    let b = builtin_problem("linear_terminal").unwrap();
    let a = b.analytic.unwrap();
    let g = &b.spec.grid;
    let w = vec![0.0; g.nodes()];
    let [a1, a2, a3] = LINEAR_TERMINAL_WEIGHTS;
    assert_eq!(a.adjoint_p(g, 10, &w, None), (-(a1 + a2 + a3), -(a1 + a2 + a3)));
    assert_eq!(a.adjoint_p(g, 50, &w, None), (-(a1 + a2 + a3), -(a2 + a3)));
    assert_eq!(a.adjoint_p(g, 150, &w, None), (-a3, -a3));
    assert_eq!(a.adjoint_p(g, 200, &w, None), (-a3, 0.0));
    // Bang-bang: u = −sign(−p).
    assert_eq!(a.control(g, 0.1), -1.0);
    assert_eq!(a.control(g, 0.3), 1.0);
    assert_eq!(a.control(g, 0.7), -1.0);
}

#[test]
fn example2_adjoint_with_multipliers() {
    let b = builtin_problem("example2_transformed").unwrap();
    let a = b.analytic.unwrap();
    let g = &b.spec.grid;
    let w = vec![0.0; g.nodes()];
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let beta = [0.0, s, -s];
    assert_eq!(a.adjoint_p(g, 10, &w, Some(&beta)), (0.0, 0.0));
    assert_eq!(a.adjoint_p(g, 150, &w, Some(&beta)), (s, s));
    assert!((a.control(g, 0.3) - 0.8).abs() < 1e-15);
    assert_eq!(a.control(g, 0.75), 2.0);
    assert_eq!(b.constraints.unwrap().items.len(), 2);
}

#[test]
fn lq_reference_is_interior_stationary_optimum() {
    let grid = TimeGrid::new(1.0, 40, &[0.5, 1.0]).unwrap();
    let r = lq_smooth_reference(&grid);
    assert!(r.interior);
    let h = 1e-4;
    for i in 0..grid.steps() {
        let mut up = r.control.clone();
        let mut dn = r.control.clone();
        up[i] += h;
        dn[i] -= h;
        let g = (lq_smooth_moment_cost(&grid, &up) - lq_smooth_moment_cost(&grid, &dn)) / (2.0 * h);
        assert!(g.abs() < 1e-9, "gradient {g} at {i}");
    }
    // Strictly better than simple alternatives.
    assert!(r.value < lq_smooth_moment_cost(&grid, &vec![0.0; 40]));
    assert!(r.value < lq_smooth_moment_cost(&grid, &vec![1.0; 40]));
}

#[test]
fn lq_moment_cost_matches_hand_computation_on_one_step() {
    // One step, x0 = 0: X1 = u·dt + 0.2·ΔW, E X1 = u, E X1² = u² + 0.04.
    let grid = TimeGrid::new(1.0, 2, &[0.5, 1.0]).unwrap();
    let u = [0.7, -0.4];
    let dt = 0.5;
    let m1 = 0.7 * dt;
    let s1 = m1 * m1 + 0.04 * dt;
    let a = 1.0 - 0.5 * dt;
    let m2 = a * m1 - 0.4 * dt;
    let var1 = s1 - m1 * m1;
    // E X2² = Var + mean²; Var X2 = a²Var X1 + E(0.2+0.1X1)²·dt
    let s2 = m2 * m2 + a * a * var1 + (0.04 + 0.04 * m1 + 0.01 * s1) * dt;
    let expect = dt * (0.5 * 0.49 + 0.0) + dt * (0.5 * 0.16 + 0.25 * s1)
        + 0.5 * (s1 - 2.0 * m1 + 1.0)
        + (s2 - m2 + 0.25);
    assert!((lq_smooth_moment_cost(&grid, &u) - expect).abs() < 1e-14);
}
