use proptest::prelude::*;

use foliage_core::civilize::*;
use foliage_core::planefield::Catalog;
use foliage_core::{AffineSimplex, BoxRegion};

fn tilt() -> foliage_core::PlaneField {
    Catalog::LinearTilt { u: 0.4 }.field(BoxRegion::cube(4, -2.0, 3.0)).unwrap()
}

fn edge() -> AffineSimplex {
    AffineSimplex::new(vec![vec![0.1, 0.0, 0.0, 0.0], vec![0.2, 0.3, 1.0, 0.4]]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn locate_inverts_fibre_points(s in 0.05..0.95f64, b0 in -0.03..0.03f64, b1 in -0.03..0.03f64, e0 in -0.015..0.015f64) {
        let f = tilt();
        let tube = TubularNbhd::for_simplex(edge(), &f, 0.05, 0.02);
        let x = edge().point(&[1.0 - s, s]);
        let p = tube.fiber(&x).unwrap().point(&[b0, b1], &[e0]);
        let c = tube.locate(&p).unwrap().unwrap();
        prop_assert!(foliage_core::linalg::dist(&c.base, &x) < 1e-10);
        prop_assert!((c.b[0] - b0).abs() < 1e-10 && (c.b[1] - b1).abs() < 1e-10 && (c.e[0] - e0).abs() < 1e-10, "{:?} {:?}", c, (b0, b1, e0));
    }

    #[test]
    fn flattening_starts_at_the_field_and_stays_outside(t in 0.0..=1.0f64, x in proptest::collection::vec(1.2..2.5f64, 4)) {
        let f = tilt();
        let h = case1_flatten(&f, &edge(), 0.05, 0.03, 0.1, 0.06).unwrap();
        let z = [0.15, 0.1, 0.5, 0.2];
        prop_assert!((h.frame(&z, 0.0).unwrap() - f.frame(&z).unwrap()).abs().max() < 1e-12);
        prop_assert!((h.frame(&x, t).unwrap() - f.frame(&x).unwrap()).abs().max() < 1e-12);
    }
}

#[test]
fn flattening_makes_the_inner_tube_constant() {
    let f = tilt();
    let before = TubularNbhd::for_simplex(edge(), &f, 0.05, 0.03);
    assert!(!check_constancy(&f, &before, 3, CONSTANCY_TOL).unwrap().pass);
    let h = case1_flatten(&f, &edge(), 0.05, 0.03, 0.1, 0.06).unwrap();
    let after = h.at(1.0);
    let tube = TubularNbhd::for_simplex(edge(), &after, 0.05, 0.03);
    assert!(check_constancy(&after, &tube, 3, CONSTANCY_TOL).unwrap().pass);
}
