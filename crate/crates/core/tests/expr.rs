use proptest::prelude::*;

use foliage_core::expr::{bump, smoothstep};
use foliage_core::{Env, Expr, Var};

fn atom() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("x1".to_string()),
        Just("t".to_string()),
        (-3.0..3.0f64).prop_map(|c| format!("({c})")),
        Just("sin(t)".to_string()),
        Just("bump(x1/2)".to_string()),
        Just("smoothstep(t)".to_string()),
    ]
}

fn expr() -> impl Strategy<Value = String> {
    atom().prop_recursive(3, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}+{b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}*{b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}-{b})")),
            inner.clone().prop_map(|a| format!("cos({a})")),
            inner.clone().prop_map(|a| format!("({a})^2")),
            inner.prop_map(|a| format!("exp(0.1*{a})")),
        ]
    })
}

fn env(x: f64, t: f64) -> Env {
    Env::new().with(Var::X(1), x).with(Var::T, t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symbolic_derivative_matches_central_difference(text in expr(), x in -1.5..1.5f64, t in 0.1..0.9f64) {
        let e = Expr::parse(&text).unwrap();
        let h = 1e-5;
        for (var, plus, minus) in [
            (Var::X(1), env(x + h, t), env(x - h, t)),
            (Var::T, env(x, t + h), env(x, t - h)),
        ] {
            let fd = (e.eval(&plus) - e.eval(&minus)) / (2.0 * h);
            let d = e.derivative(var).eval(&env(x, t));
            prop_assert!((fd - d).abs() <= 1e-5 * (1.0 + d.abs()), "{text}: {d} vs {fd}");
        }
    }

    #[test]
    fn compiled_and_tree_evaluation_agree_bitwise(text in expr(), x in -2.0..2.0f64, t in -1.0..2.0f64) {
        let e = Expr::parse(&text).unwrap();
        let p = e.compile();
        let v = env(x, t);
        prop_assert_eq!(e.eval(&v).to_bits(), p.eval(&v).to_bits());
        let d = e.derivative(Var::T);
        prop_assert_eq!(d.eval(&v).to_bits(), d.compile().eval(&v).to_bits());
    }

    #[test]
    fn printed_form_reparses(text in expr(), x in -2.0..2.0f64, t in -1.0..2.0f64) {
        let e = Expr::parse(&text).unwrap();
        let again = Expr::parse(&e.to_string()).unwrap();
        prop_assert_eq!(e.eval(&env(x, t)), again.eval(&env(x, t)));
        let json = serde_json::to_string(&e).unwrap();
        let back: Expr = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, again);
    }

    #[test]
    fn bump_support_is_the_open_interval(u in -3.0..3.0f64) {
        if u.abs() < 1.0 {
            prop_assert!(bump(u) > 0.0);
        } else {
            prop_assert_eq!(bump(u), 0.0);
        }
        let s = smoothstep(u);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + smoothstep(1.0 - u) - 1.0).abs() < 1e-14);
    }
}

#[test]
fn square_of_sine_derivative() {
    let d = Expr::parse("sin(t)^2").unwrap().derivative(Var::T);
    let closed = Expr::parse("2*sin(t)*cos(t)").unwrap();
    for i in 0..100 {
        let v = Env::new().with(Var::T, -3.0 + 0.06 * i as f64);
        assert!((d.eval(&v) - closed.eval(&v)).abs() < 1e-12);
    }
}

#[test]
fn grammar_rejections() {
    assert!(Expr::parse("abs(x1)").is_err());
    assert!(Expr::parse("y + 1").is_err());
    assert!(Expr::parse("(x1").is_err());
    assert!(Expr::parse("x1^0.5").is_err());
}
