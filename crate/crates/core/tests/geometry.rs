use proptest::prelude::*;

use foliage_core::geometry::*;
use foliage_core::planefield::Catalog;
use foliage_core::{BoxRegion, IntBox};

fn field() -> foliage_core::PlaneField {
    Catalog::LinearTilt { u: 0.3 }.field(BoxRegion::cube(4, -1.0, 2.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn barycentric_coordinates_invert_points(raw in proptest::collection::vec(0.01..1.0f64, 5), seed in 0usize..24) {
        let t = standard_triangulation(1, IntBox::cube(4, 0, 1)).unwrap();
        let s = t.simplex(seed);
        let total: f64 = raw.iter().sum();
        let bary: Vec<f64> = raw.iter().map(|b| b / total).collect();
        let back = s.barycentric(&s.point(&bary));
        for (a, b) in bary.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_volume_is_the_box_volume(l in 1u32..3, w in 1i64..3) {
        let t = standard_triangulation(l, IntBox::new(vec![0, 0, 0, 0], vec![w, 1, 1, 1])).unwrap();
        prop_assert_eq!(t.simplices().len(), 24 * (l as usize).pow(4) * w as usize);
        prop_assert!((t.total_volume() - w as f64).abs() < 1e-12);
        prop_assert!(t.verify().is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn jiggling_is_small_certified_and_seeded(seed in 0u64..1000) {
        let t = standard_triangulation(1, IntBox::cube(4, 0, 1)).unwrap();
        let k = BoxRegion::cube(4, 0.0, 1.0);
        let params = JiggleParams::new(0.05, seed);
        let a = jiggle(&t, &field(), &k, &params).unwrap();
        prop_assert!(a.max_displacement < 0.05);
        for id in 0..a.triangulation.vertex_count() {
            let d: f64 = a.triangulation.offset(id).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(d < 0.05);
        }
        let rep = certify(&a.triangulation, &field(), &k, params.samples, params.min_margin).unwrap();
        prop_assert!(rep.pass);
        let b = jiggle(&t, &field(), &k, &params).unwrap();
        prop_assert_eq!(&a, &b);
        let json = serde_json::to_string(&a.triangulation).unwrap();
        let back: LatticeTriangulation = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back.rebuild().simplex(7), a.triangulation.simplex(7));
    }
}

#[test]
fn unjiggled_lattice_is_degenerate_for_the_constant_field() {
    let t = standard_triangulation(1, IntBox::cube(4, 0, 1)).unwrap();
    let f = Catalog::Horizontal.field(BoxRegion::cube(4, -1.0, 2.0)).unwrap();
    let rep = certify(&t, &f, &BoxRegion::cube(4, 0.0, 1.0), 3, 1e-3).unwrap();
    assert!(!rep.pass);
    assert!(rep.min_margin < 1e-12);
}
