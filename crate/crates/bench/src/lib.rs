//! Shared fixtures for the benchmarks.

use foliage_core::diffgroup::{exp, flow_with_steps, CompactDiffeo, VectorField};
use foliage_core::BoxRegion;

/// Bump-supported shear around `c` with radius `s`.
pub fn shear(c: [f64; 2], s: f64, a: f64, b: f64) -> CompactDiffeo {
    let bm = format!("bump(((x1-({}))^2+(x2-({}))^2)/{})", c[0], c[1], s * s);
    let field = VectorField::parse(
        &[&format!("{a}*(x2-({}))*{bm}", c[1]), &format!("{b}*(x1-({}))*{bm}", c[0])],
        BoxRegion::centered(&c, s),
    )
    .expect("valid shear");
    exp(&field)
}

/// Unit translation in `x1` on `[-2, 2]²`, cut off smoothly on `[-3, 3]²`.
pub fn translation() -> CompactDiffeo {
    let pl = (1..=2)
        .map(|i| format!("smoothstep((x{i}+3)/1)*smoothstep((3-x{i})/1)"))
        .collect::<Vec<_>>()
        .join("*");
    let field = VectorField::parse(&[&pl, "0"], BoxRegion::cube(2, -3.0, 3.0)).expect("valid plateau");
    flow_with_steps(&field, 1.0, 16)
}
