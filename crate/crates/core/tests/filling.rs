use std::f64::consts::TAU;

use proptest::prelude::*;

use foliage_core::diffgroup::{h_f, ConjugateFactor, ConjugateWord, Core, CompactDiffeo, VectorField, flow_with_steps};
use foliage_core::filling::*;
use foliage_core::{BoxRegion, Expr};

fn e(s: &str) -> Expr {
    Expr::parse(s).unwrap()
}

fn slope(amp: f64) -> Expr {
    standard_slope_and_cutoff(2, amp).0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn homotopy_keeps_partition_of_unity(s in 0.0..=1.0f64, r in 0.0..=1.0f64, x in -1.0..1.0f64, phi in 0.0..1.0f64) {
        let form = FillingForm::standard(2).unwrap();
        let c = transversality_homotopy(&form, s).coefficients(r, phi, &[x]);
        prop_assert!((c.p + c.q - 1.0).abs() <= 1e-12);
        prop_assert!(c.p.abs().max(c.q.abs()) >= 0.5);
    }

    #[test]
    fn admissible_amplitudes_are_integrable(amp in -1.0..=1.0f64, adjusted in any::<bool>()) {
        let (f, g) = standard_slope_and_cutoff(2, amp);
        let mut form = explicit_form(2, &f, &g, &PartitionProfiles::standard()).unwrap();
        if adjusted {
            form = form.adjusted();
        }
        prop_assert!(max_residual(&form, 48) < 1e-9);
    }

    #[test]
    fn cartesian_wedge_vanishes(amp in -1.0..=1.0f64, u in -0.95..0.95f64, v in -0.95..0.95f64, x in -0.8..0.8f64) {
        prop_assume!(u.hypot(v) > 0.05 && u.hypot(v) < 0.99);
        let (f, g) = standard_slope_and_cutoff(2, amp);
        let form = explicit_form(2, &f, &g, &PartitionProfiles::standard()).unwrap();
        // second-order differences shrink by 4 when h halves
        let a = fd_wedge(&form, u, v, &[x], 2e-3).abs();
        let b = fd_wedge(&form, u, v, &[x], 1e-3).abs();
        prop_assert!(b <= a / 3.0 + 1e-10, "{a} {b}");
    }

    #[test]
    fn band_leaves_keep_their_radius(r in 0.9..0.99f64, phi in 0.0..1.0f64, theta in 0.0..1.0f64, x in -0.6..0.6f64) {
        let form = FillingForm::standard(2).unwrap();
        let leaf = leaf_trace(&form, [r, phi, theta], &[x], 0.5, 0.01, LeafDirection::Angular).unwrap();
        for s in &leaf {
            prop_assert!((s.r - r).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_form_has_inverse_holonomy(amp in 0.1..0.9f64, y in -0.9..0.9f64, theta in 0.0..1.0f64) {
        let (f, g) = standard_slope_and_cutoff(2, amp);
        let form = explicit_form(2, &f, &g, &PartitionProfiles::standard()).unwrap();
        let there = Filling::reeb(form.clone());
        let back = Filling::reeb(form.inverse());
        let a = TAU * theta;
        let p = vec![(1.0 + y / 2.0) * a.cos(), (1.0 + y / 2.0) * a.sin()];
        let q = there.boundary_holonomy(&p).unwrap();
        let p2 = back.boundary_holonomy(&q).unwrap();
        prop_assert!((p2[0] - p[0]).abs() < 1e-9 && (p2[1] - p[1]).abs() < 1e-9);
    }
}

#[test]
fn holonomy_is_the_time_one_rotation() {
    for amp in [-0.8, 0.3, 1.0] {
        let form = explicit_form(2, &slope(amp), &standard_slope_and_cutoff(2, amp).1, &PartitionProfiles::standard())
            .unwrap();
        let h = h_f(2, form.f(), 1.0).unwrap();
        let err = holonomy_error(&Filling::reeb(form), &h, &tube_samples(2, 40)).unwrap();
        assert!(err < 1e-6, "amp {amp}: {err}");
    }
}

#[test]
fn higher_codimension_form_is_integrable() {
    let form = FillingForm::standard(3).unwrap();
    assert!(max_residual(&form, 24) < 1e-9);
    assert!(boundary_band_check(&form, 24).is_ok());
    let pts = tube_samples(3, 20);
    let h = h_f(3, form.f(), 1.0).unwrap();
    assert!(holonomy_error(&Filling::reeb(form), &h, &pts).unwrap() < 1e-6);
}

#[test]
fn product_check_fails_only_where_p_is_small() {
    let form = FillingForm::standard(2).unwrap();
    for (s, expect_pass) in [(0.0, false), (1.0, true)] {
        let filling = Filling::reeb(transversality_homotopy(&form, s));
        let field = filling.plane_field(&tube_box(2));
        let rep = product_structure_check(&field, &tube_box(2), 8, 1e-3);
        assert!(rep.projection_outside.pass());
        assert!(rep.boundary_transverse.pass());
        assert!(rep.line_field_transverse.pass());
        assert_eq!(rep.fibre_transverse.pass(), expect_pass, "s = {s}");
        for w in &rep.fibre_transverse.witnesses {
            let rho = w[0].hypot(w[1]);
            let psi = (w[1].atan2(w[0]) / TAU).rem_euclid(1.0);
            let c = filling.disk_coefficients(rho, psi, &w[2..]).unwrap();
            assert!(c.p.abs() < 1e-3, "fibre failure at {w:?} with P = {}", c.p);
        }
    }
}

#[test]
fn conjugate_word_filling_realizes_the_product() {
    let form = FillingForm::standard(2).unwrap();
    let h = h_f(2, form.f(), 1.0).unwrap();
    let bm = "bump(((x1-1)^2+x2^2)/0.09)";
    let swirl = VectorField::parse(
        &[&format!("-0.5*x2*{bm}"), &format!("0.5*(x1-1)*{bm}")],
        BoxRegion::centered(&[1.0, 0.0], 0.3),
    )
    .unwrap();
    let g = flow_with_steps(&swirl, 1.0, 64);
    let word = ConjugateWord {
        h: h.clone(),
        factors: vec![
            ConjugateFactor { conjugator: CompactDiffeo::identity(2), core: Core::H },
            ConjugateFactor { conjugator: g.clone(), core: Core::HInv },
            ConjugateFactor { conjugator: g.inverse(), core: Core::H },
        ],
        claimed: CompactDiffeo::identity(2),
    };
    let filling = conjugate_word_filling(&word, &form).unwrap();
    let target = word.product().unwrap();
    let err = holonomy_error(&filling, &target, &tube_samples(2, 30)).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn glued_seams_are_horizontal() {
    let a = Filling::reeb(FillingForm::standard(2).unwrap().adjusted());
    let b = Filling::reeb(FillingForm::standard(2).unwrap().inverse().adjusted());
    let glued = glue_all(&[a.clone(), b.clone(), a]).unwrap();
    let Filling::Glued(top) = &glued else { panic!("expected a glued filling") };
    let rep = top.seam_check(&tube_samples(2, 10), 32).unwrap();
    assert!(rep.exact, "{:?}", rep.witnesses);
    // h ∘ h⁻¹ ∘ h
    let h = h_f(2, FillingForm::standard(2).unwrap().f(), 1.0).unwrap();
    assert!(holonomy_error(&glued, &h, &tube_samples(2, 20)).unwrap() < 1e-6);
}

#[test]
fn negative_control_is_detected() {
    let bad = FillingForm::from_parts(2, e("bump(x1)"), e("0.5"), PartitionProfiles::standard(), false);
    assert!(max_residual(&bad, 64) > 1e-3);
    assert!(explicit_form(2, &e("bump(x1)"), &e("0.5"), &PartitionProfiles::standard()).is_err());
}

#[test]
fn form_spec_serde_round_trip() {
    let spec = FormSpec {
        adjusted: true,
        lambda_half: Some(e("smoothstep((r-0.25)/0.15)-smoothstep((r-0.6)/0.15)")),
        ..FormSpec::standard(2)
    };
    let text = serde_json::to_string(&spec).unwrap();
    let back: FormSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back.build().unwrap(), spec.build().unwrap());
}
