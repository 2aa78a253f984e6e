use super::*;
use proptest::prelude::*;

fn vars(names: &[&str]) -> VarSet {
    VarSet::new(names)
}

fn parse(text: &str, vs: &VarSet) -> Expr {
    parse_expr(text, vs).unwrap_or_else(|e| panic!("{text}: {e}"))
}

fn same_value(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

#[test]
fn parses_production_drift() {
    let vs = vars(&["t", "u"]);
    let e = parse("u - (8/3)*t", &vs);
    let v = e.eval(&[0.75, 2.0]).unwrap();
    assert!((v - (2.0 - 2.0)).abs() < 1e-15);
    assert_eq!(e.free_vars().into_iter().collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn parses_single_variable() {
    let vs = vars(&["x1"]);
    assert_eq!(parse("x1", &vs), Expr::Var(0));
}

#[test]
fn undeclared_variable_is_named() {
    let vs = vars(&["t", "u"]);
    match parse_expr("u - z", &vs) {
        Err(ExprError::UndeclaredVariable { name, pos }) => {
            assert_eq!(name, "z");
            assert_eq!(pos, 4);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn syntax_errors_carry_positions() {
    let vs = vars(&["x"]);
    for (text, pos) in [("x +", 3), ("(x", 2), ("x ^ 1.5", 5), ("foo(x)", 0), ("x $", 2)] {
        match parse_expr(text, &vs) {
            Err(ExprError::Syntax { pos: p, .. }) => assert_eq!(p, pos, "{text}"),
            other => panic!("{text}: unexpected {other:?}"),
        }
    }
    assert!(parse_expr("abs(x, x)", &vs).is_err());
    assert!(parse_expr("min(x)", &vs).is_err());
    assert!(parse_expr("", &vs).is_err());
}

#[test]
fn aliases_resolve_to_canonical_slot() {
    let vs = vars(&["t", "x1", "u1"]).with_alias("x", "x1").with_alias("u", "u1");
    let e = parse("x*u + x1", &vs);
    assert_eq!(e.eval(&[0.0, 2.0, 3.0]).unwrap(), 8.0);
    assert_eq!(e.display(&vs).to_string(), "x1*u1 + x1");
}

#[test]
fn evaluates_example_cost() {
    let vs = vars(&["y1", "y2"]);
    let e = parse("-2*y1^2 + y2^2", &vs);
    let b: Binding = [("y1".to_string(), 1.0), ("y2".to_string(), 1.0)].into();
    assert_eq!(e.eval_binding(&vs, &b).unwrap(), -1.0);
}

#[test]
fn zero_and_abs() {
    let vs = vars(&["y1"]);
    assert_eq!(parse("0", &vs).eval_binding(&vs, &Binding::new()).unwrap(), 0.0);
    let b: Binding = [("y1".to_string(), -3.0)].into();
    assert_eq!(parse("abs(y1)", &vs).eval_binding(&vs, &b).unwrap(), 3.0);
}

#[test]
fn unbound_variable_reported() {
    let vs = vars(&["y1", "y2"]);
    let b: Binding = [("y1".to_string(), 1.0)].into();
    assert_eq!(
        parse("y1 + y2", &vs).eval_binding(&vs, &b),
        Err(ExprError::Unbound("y2".into()))
    );
}

#[test]
fn division_by_zero_is_an_error() {
    let vs = vars(&["x"]);
    assert_eq!(parse("1/x", &vs).eval(&[0.0]), Err(ExprError::DivisionByZero));
    assert_eq!(parse("x^(-2)", &vs).eval(&[0.0]), Err(ExprError::DivisionByZero));
    assert!(parse("1/x", &vs).compile().eval(&[0.0]).is_infinite());
}

#[test]
fn power_binds_tighter_than_unary_minus() {
    let vs = vars(&["x"]);
    assert_eq!(parse("-x^2", &vs).eval(&[3.0]).unwrap(), -9.0);
    assert_eq!(parse("(-x)^2", &vs).eval(&[3.0]).unwrap(), 9.0);
    assert_eq!(parse("2^-1", &vs).eval(&[0.0]).unwrap(), 0.5);
    assert_eq!(parse("8/4/2", &vs).eval(&[0.0]).unwrap(), 1.0);
    assert_eq!(parse("8-4-2", &vs).eval(&[0.0]).unwrap(), 2.0);
}

#[test]
fn derivative_of_example_cost() {
    let vs = vars(&["y1", "y2"]);
    let e = parse("-2*y1^2 + y2^2", &vs);
    let d = e.diff_named("y1", &vs).unwrap();
    assert_eq!(d.display(&vs).to_string(), "-4*y1");
    assert_eq!(e.diff_named("y2", &vs).unwrap().display(&vs).to_string(), "2*y2");
}

#[test]
fn derivative_of_constant_is_zero() {
    let vs = vars(&["x", "c"]);
    assert_eq!(parse("c", &vs).diff_named("x", &vs).unwrap(), Expr::Num(0.0));
    assert_eq!(parse("3.5", &vs).diff_named("x", &vs).unwrap(), Expr::Num(0.0));
}

#[test]
fn derivative_matches_central_difference() {
    let vs = vars(&["t", "u"]);
    let e = parse("u^3 - t*u", &vs);
    let d = e.diff_named("u", &vs).unwrap();
    let at = [2.0, 1.0];
    let sym = d.eval(&at).unwrap();
    assert!((sym - 1.0).abs() < 1e-12);
    let h = 1e-5;
    let fd = (e.eval(&[2.0, 1.0 + h]).unwrap() - e.eval(&[2.0, 1.0 - h]).unwrap()) / (2.0 * h);
    assert!((fd - sym).abs() < 1e-6);
}

#[test]
fn nonsmooth_derivatives_are_rejected() {
    let vs = vars(&["x", "y"]);
    let e = parse("abs(x) + y^2", &vs);
    match e.diff_named("x", &vs) {
        Err(ExprError::NonDifferentiable(s)) => assert_eq!(s, "abs(x)"),
        other => panic!("unexpected {other:?}"),
    }
    // The kink does not involve y, so the y-derivative is fine.
    assert_eq!(e.diff_named("y", &vs).unwrap().display(&vs).to_string(), "2*y");
    assert!(parse("max(x, 0)", &vs).diff_named("x", &vs).is_err());
    assert!(!e.is_smooth());
    assert!(parse("exp(x)", &vs).is_smooth());
    assert!(matches!(e.diff_named("q", &vs), Err(ExprError::UnknownVariable(_))));
}

#[test]
fn exp_and_quotient_rules() {
    let vs = vars(&["x"]);
    let e = parse("exp(2*x)/(1 + x^2)", &vs);
    let d = e.diff(0, &vs).unwrap();
    let x: f64 = 0.3;
    let expect = 2.0 * (2.0 * x).exp() / (1.0 + x * x)
        - (2.0 * x).exp() * 2.0 * x / (1.0 + x * x).powi(2);
    assert!((d.eval(&[x]).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn switching_functions_of_kinks() {
    let vs = vars(&["y1", "y2"]);
    let e = parse("abs(y1 - 1) + max(y1, y2, 0)", &vs);
    let sw: Vec<String> = e
        .switching_functions()
        .iter()
        .map(|s| s.display(&vs).to_string())
        .collect();
    assert_eq!(sw, ["y1 - 1", "y1 - y2", "y1 - 0", "y2 - 0"]);
}

#[test]
fn substitute_renames_variables() {
    let from = vars(&["y1", "y2"]);
    let to = vars(&["a", "b", "c"]);
    let e = parse("y1*y2 + y2", &from);
    let s = e.substitute(&|i| Expr::Var(i + 1));
    assert_eq!(s.display(&to).to_string(), "b*c + c");
}

#[test]
fn compiled_agrees_with_tree_walk() {
    let vs = vars(&["x", "y"]);
    let e = parse("min(x, y, 1) * max(x, -y) - abs(x)^3 / exp(y) + -x", &vs);
    let c = e.compile();
    for &(x, y) in &[(0.5, -1.0), (2.0, 3.0), (-1.5, 0.25)] {
        assert!(same_value(c.eval(&[x, y]), e.eval(&[x, y]).unwrap()));
    }
    assert_eq!(parse("2.5", &vs).compile().constant(), Some(2.5));
    assert!(parse("0", &vs).compile().is_zero());
}

#[test]
fn deep_expressions_use_heap_stack() {
    let vs = vars(&["x"]);
    let mut text = String::from("x");
    for _ in 0..100 {
        text = format!("1 + ({text})*x");
    }
    // Right-nested products push the stack beyond the inline buffer.
    let mut nested = String::from("x");
    for _ in 0..80 {
        nested = format!("x*({nested} + 1)");
    }
    for t in [&text, &nested] {
        let e = parse(t, &vs);
        assert!(same_value(e.compile().eval(&[0.5]), e.eval(&[0.5]).unwrap()));
    }
}

// ---------- property tests ----------

const NAMES: [&str; 3] = ["x", "y", "z"];

fn any_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-5.0f64..5.0).prop_map(Expr::Num),
        (0usize..3).prop_map(Expr::Var),
    ];
    leaf.prop_recursive(5, 48, 3, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
            (inner.clone(), -3i32..4).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
            inner.clone().prop_map(|a| Expr::Call(Func::Abs, vec![a])),
            inner.clone().prop_map(|a| Expr::Call(Func::Exp, vec![a])),
            prop::collection::vec(inner.clone(), 2..4).prop_map(|v| Expr::Call(Func::Min, v)),
            prop::collection::vec(inner, 2..4).prop_map(|v| Expr::Call(Func::Max, v)),
        ]
    })
}

/// Random polynomial of total degree ≤ 4 in x, y, z, as text.
fn polynomial_text() -> impl Strategy<Value = String> {
    let term = (-2.0f64..2.0, 0u32..5, 0u32..5, 0u32..5).prop_filter_map(
        "degree ≤ 4",
        |(c, a, b, d)| {
            (a + b + d <= 4).then(|| format!("({c})*x^{a}*y^{b}*z^{d}"))
        },
    );
    prop::collection::vec(term, 1..8).prop_map(|terms| terms.join(" + "))
}

fn binding() -> impl Strategy<Value = [f64; 3]> {
    [-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0]
}

proptest! {
    #[test]
    fn print_then_parse_evaluates_identically(e in any_expr(), points in prop::collection::vec(binding(), 100)) {
        let vs = vars(&NAMES);
        let printed = e.display(&vs).to_string();
        let back = parse_expr(&printed, &vs).unwrap();
        for p in &points {
            let lhs = e.eval(p);
            let rhs = back.eval(p);
            match (lhs, rhs) {
                (Ok(a), Ok(b)) => prop_assert!(same_value(a, b), "{printed}: {a} vs {b}"),
                (Err(a), Err(b)) => prop_assert_eq!(a, b),
                (a, b) => prop_assert!(false, "{printed}: {a:?} vs {b:?}"),
            }
        }
        // Printing is a fixed point after one round trip.
        prop_assert_eq!(back.display(&vs).to_string(), printed.clone());
    }

    #[test]
    fn compiled_matches_tree(e in any_expr(), p in binding()) {
        if let Ok(v) = e.eval(&p) {
            prop_assert!(same_value(e.compile().eval(&p), v));
        }
    }

    #[test]
    fn derivative_matches_finite_difference(text in polynomial_text(), p in binding(), var in 0usize..3) {
        let vs = vars(&NAMES);
        let e = parse_expr(&text, &vs).unwrap();
        let d = e.diff(var, &vs).unwrap();
        let sym = d.eval(&p).unwrap();
        let h = 1e-5;
        let (mut hi, mut lo) = (p, p);
        hi[var] += h;
        lo[var] -= h;
        let fd = (e.eval(&hi).unwrap() - e.eval(&lo).unwrap()) / (2.0 * h);
        prop_assert!((sym - fd).abs() <= 1e-6 * (1.0 + sym.abs()), "{text}: {sym} vs {fd}");
    }

    #[test]
    fn derivative_is_linear(t1 in polynomial_text(), t2 in polynomial_text(), a in -3.0f64..3.0,
                            points in prop::collection::vec(binding(), 10), var in 0usize..3) {
        let vs = vars(&NAMES);
        let combined = parse_expr(&format!("({a})*({t1}) + ({t2})"), &vs).unwrap();
        let d = combined.diff(var, &vs).unwrap();
        let d1 = parse_expr(&t1, &vs).unwrap().diff(var, &vs).unwrap();
        let d2 = parse_expr(&t2, &vs).unwrap().diff(var, &vs).unwrap();
        for p in &points {
            let lhs = d.eval(p).unwrap();
            let rhs = a * d1.eval(p).unwrap() + d2.eval(p).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
    }
}
