use proptest::prelude::*;

use foliage_core::diffgroup::{CompactDiffeo, VectorField};
use foliage_core::holonomy::*;
use foliage_core::{BoxRegion, Expr};

fn swirl(cx: f64, cy: f64, amp: f64) -> VectorField {
    let bm = format!("bump(((x1-({cx}))^2+(x2-({cy}))^2)/0.64)");
    VectorField::parse(
        &[&format!("{amp}*(-(x2-({cy})))*{bm}"), &format!("{amp}*(x1-({cx}))*{bm}")],
        BoxRegion::centered(&[cx, cy], 0.8),
    )
    .unwrap()
}

fn rotation(amp: f64) -> PeriodicPath {
    PeriodicPath::rotation(2, &Expr::parse(&format!("{amp}*bump(x1/0.9)")).unwrap()).unwrap()
}

fn grid() -> Vec<Vec<f64>> {
    BoxRegion::cube(2, -1.6, 1.6).grid(7)
}

fn path() -> impl Strategy<Value = PeriodicPath> {
    prop_oneof![
        (-0.4..0.4f64).prop_map(rotation),
        (-0.3..0.3f64, -0.3..0.3f64, -1.0..1.0f64, 0.2..1.0f64)
            .prop_map(|(x, y, a, t)| PeriodicPath::flow(&swirl(x, y, a), t).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cocycle_law(w in path(), t in 0.0..1.0f64, m in -2i64..=2) {
        let lhs = periodic_extend(&w, t + m as f64).unwrap();
        let rhs = w.eval(t).unwrap().compose(&w.eval(1.0).unwrap().pow(m));
        prop_assert!(lhs.sup_distance(&rhs, &grid()).unwrap() < 1e-9);
    }

    #[test]
    fn concatenation_endpoint(w1 in path(), w2 in path()) {
        let c = concat(&w1, &w2).unwrap();
        let want = w2.eval(1.0).unwrap().compose(&w1.eval(1.0).unwrap());
        prop_assert!(c.eval(1.0).unwrap().sup_distance(&want, &grid()).unwrap() < 1e-9);
        prop_assert!(c.eval(0.0).unwrap().sup_distance(&CompactDiffeo::identity(2), &grid()).unwrap() < 1e-12);
    }

    #[test]
    fn subdivision_telescopes(w in path(), q in 1i64..6) {
        let parts = subdivide(&w, q).unwrap();
        prop_assert_eq!(parts.len(), q as usize);
        let ends: Vec<_> = parts.iter().map(|p| p.eval(1.0).unwrap()).collect();
        let prod = CompactDiffeo::compose_all(2, ends.iter().rev());
        prop_assert!(prod.sup_distance(&w.eval(1.0).unwrap(), &grid()).unwrap() < 1e-9);
    }

    #[test]
    fn adjusted_paths_are_horizontal_near_the_ends(w in path(), s in 0.0..HORIZONTAL) {
        let w = w.adjust();
        let pts = grid();
        let id = CompactDiffeo::identity(2);
        prop_assert!(w.eval(s).unwrap().sup_distance(&id, &pts).unwrap() < 1e-12);
        let end = w.eval(1.0).unwrap();
        prop_assert!(w.eval(1.0 - s).unwrap().sup_distance(&end, &pts).unwrap() < 1e-12);
    }

    #[test]
    fn conjugation_conjugates_the_endpoint(w in path(), a in -0.5..0.5f64) {
        let g = PeriodicPath::flow(&swirl(0.2, -0.1, a), 1.0).unwrap().eval(1.0).unwrap();
        let c = conjugate(&g, &w).unwrap();
        let want = CompactDiffeo::conjugate(&g, &w.eval(1.0).unwrap()).unwrap();
        prop_assert!(c.eval(1.0).unwrap().sup_distance(&want, &grid()).unwrap() < 1e-9);
    }
}

#[test]
fn adjust_is_a_smooth_reparametrization() {
    assert_eq!(adjust(0.0), 0.0);
    assert_eq!(adjust(HORIZONTAL), 0.0);
    assert_eq!(adjust(1.0 - HORIZONTAL), 1.0);
    assert_eq!(adjust(1.0), 1.0);
    let mut prev = 0.0;
    for i in 0..=1000 {
        let a = adjust(i as f64 / 1000.0);
        assert!(a >= prev);
        prev = a;
    }
}

#[test]
fn path_specs_round_trip() {
    let text = r#"{"k": 2, "segments": [
        {"generator": {"kind": "rotation", "profile": "0.3*bump(x1/0.9)"}, "profile": "t^2"},
        {"generator": {"kind": "flow", "field": ["-x2*bump((x1^2+x2^2)/0.64)", "x1*bump((x1^2+x2^2)/0.64)"],
                       "support": {"lo": [-0.8, -0.8], "hi": [0.8, 0.8]}}, "profile": "sin(t)"}]}"#;
    let spec: PathSpec = serde_json::from_str(text).unwrap();
    assert!(spec.adjusted);
    let again: PathSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(spec, again);
    let (a, b) = (spec.build().unwrap(), again.build().unwrap());
    assert_eq!(a.eval(0.7).unwrap().sup_distance(&b.eval(0.7).unwrap(), &grid()).unwrap(), 0.0);
}

#[test]
fn leaves_follow_the_path() {
    let w = rotation(0.3);
    let pts = leaf(&w, &[0.4, 0.1], -1.0, 2.0, 30).unwrap();
    assert_eq!(pts.len(), 31);
    // the leaf returns to the same fibre after one turn, moved by the holonomy
    let h = w.eval(1.0).unwrap();
    for (a, b) in pts.iter().zip(&pts[10..]) {
        assert!((a.angle - b.angle).abs() < 1e-12);
        let hb = h.eval(&a.x).unwrap();
        assert!((hb[0] - b.x[0]).abs() < 1e-9 && (hb[1] - b.x[1]).abs() < 1e-9);
    }
    assert!(leaf_csv(&pts).starts_with("t,angle,x1,x2\n"));
}
