//! Periodic paths `w: [0,1] → Diff_c(ℝᵏ)` and the foliated products over S¹
//! they suspend to.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgroup::{image_box, CompactDiffeo, DiffError, OneParameter, VectorField};
use crate::expr::{smoothstep, Env, Expr, ExprError, SmoothFn, Var};
use crate::linalg::BoxRegion;

/// Length of the default horizontal intervals `[0, 1/16]` and `[15/16, 1]`.
pub const HORIZONTAL: f64 = 1.0 / 16.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HolonomyError {
    #[error("path is not horizontal near its endpoints")]
    NotAdjusted,
    #[error("segment {0} does not start at the identity")]
    NotBasedAtIdentity(usize),
    #[error("subdivision count must be positive, got {0}")]
    InvalidSubdivision(i64),
    #[error("time {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// The reparametrization `[0,1] → [0,1]`, constant near both ends.
pub fn adjust(t: f64) -> f64 {
    smoothstep((t - HORIZONTAL) / (1.0 - 2.0 * HORIZONTAL))
}

/// `t ↦ g_{p(t)}` for a one-parameter subgroup `g` and a time profile `p`
/// with `p(0) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub generator: OneParameter,
    pub profile: SmoothFn,
}

impl Segment {
    pub fn new(generator: OneParameter, profile: &Expr) -> Self {
        Segment {
            generator,
            profile: SmoothFn::new(profile.clone(), &[Var::T]),
        }
    }

    pub fn at(&self, t: f64) -> CompactDiffeo {
        self.generator.at(self.profile.eval(&Env::new().with(Var::T, t)))
    }
}

#[derive(Clone, Debug)]
enum Node {
    /// `s₁(t) ∘ … ∘ s_m(t)`.
    Segments(Vec<Segment>),
    /// `w(adjust(t))`.
    Adjusted(Arc<PeriodicPath>),
    Concat(Arc<PeriodicPath>, Arc<PeriodicPath>),
    /// `g ∘ w(t) ∘ g⁻¹`, with the image support box.
    Conjugate(CompactDiffeo, Arc<PeriodicPath>),
    /// `w((i + adjust(t))/q) ∘ w(i/q)⁻¹`.
    Piece { base: Arc<PeriodicPath>, i: usize, q: usize },
}

/// A path in `Diff_c(ℝᵏ)` with `w(0) = id`, declared horizontal intervals and
/// a support box outside which every `w(t)` is the identity.
#[derive(Clone, Debug)]
pub struct PeriodicPath {
    k: usize,
    node: Node,
    horizontal: Vec<(f64, f64)>,
    support: BoxRegion,
}

fn default_horizontal() -> Vec<(f64, f64)> {
    vec![(0.0, HORIZONTAL), (1.0 - HORIZONTAL, 1.0)]
}

impl PeriodicPath {
    /// The raw product of segments, without horizontal intervals.
    pub fn unadjusted(k: usize, segments: Vec<Segment>) -> Result<Self, HolonomyError> {
        let mut support: Option<BoxRegion> = None;
        for (i, s) in segments.iter().enumerate() {
            if s.generator.k() != k {
                return Err(HolonomyError::Dimension(format!("segment {i} acts on ℝ^{}", s.generator.k())));
            }
            if s.profile.eval(&Env::new()) != 0.0 {
                return Err(HolonomyError::NotBasedAtIdentity(i));
            }
            let b = s.generator.support();
            support = Some(support.map_or(b.clone(), |u| u.union(&b)));
        }
        Ok(PeriodicPath {
            k,
            node: Node::Segments(segments),
            horizontal: Vec::new(),
            support: support.unwrap_or_else(|| BoxRegion::cube(k, 0.0, 0.0)),
        })
    }

    /// The product of segments reparametrized by [`adjust`].
    pub fn adjusted(k: usize, segments: Vec<Segment>) -> Result<Self, HolonomyError> {
        Ok(Self::unadjusted(k, segments)?.adjust())
    }

    /// The constant path at the identity.
    pub fn trivial(k: usize) -> Self {
        PeriodicPath {
            k,
            node: Node::Segments(Vec::new()),
            horizontal: vec![(0.0, 1.0)],
            support: BoxRegion::cube(k, 0.0, 0.0),
        }
    }

    /// `t ↦ h_f(t)`, adjusted.
    pub fn rotation(k: usize, profile: &Expr) -> Result<Self, HolonomyError> {
        let g = OneParameter::rotation(k, profile)?;
        Self::adjusted(k, vec![Segment::new(g, &Expr::var(Var::T))])
    }

    /// `t ↦ φ^X_{τ t}`, adjusted.
    pub fn flow(field: &VectorField, time: f64) -> Result<Self, HolonomyError> {
        let g = OneParameter::flow(field.clone());
        Self::adjusted(field.k(), vec![Segment::new(g, &(Expr::constant(time) * Expr::var(Var::T)))])
    }

    /// Reparametrizes by [`adjust`]; the endpoint is unchanged.
    pub fn adjust(self) -> Self {
        PeriodicPath {
            k: self.k,
            support: self.support.clone(),
            horizontal: default_horizontal(),
            node: Node::Adjusted(Arc::new(self)),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn support(&self) -> &BoxRegion {
        &self.support
    }

    pub fn horizontal_intervals(&self) -> &[(f64, f64)] {
        &self.horizontal
    }

    /// Horizontal on an interval `[0, a]` and on an interval `[b, 1]`,
    /// `a > 0`, `b < 1`.
    pub fn is_adjusted(&self) -> bool {
        self.horizontal.iter().any(|&(a, b)| a == 0.0 && b > 0.0)
            && self.horizontal.iter().any(|&(a, b)| b == 1.0 && a < 1.0)
    }

    pub fn eval(&self, t: f64) -> Result<CompactDiffeo, HolonomyError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(HolonomyError::OutOfRange(t));
        }
        let k = self.k;
        Ok(match &self.node {
            Node::Segments(segs) => {
                let parts: Vec<CompactDiffeo> = segs.iter().map(|s| s.at(t)).collect();
                CompactDiffeo::compose_all(k, &parts)
            }
            Node::Adjusted(w) => w.eval(adjust(t))?,
            Node::Concat(w1, w2) => {
                if t <= 0.5 {
                    w1.eval(2.0 * t)?
                } else {
                    w2.eval(2.0 * t - 1.0)?.compose(&w1.eval(1.0)?)
                }
            }
            Node::Conjugate(g, w) => {
                let inner = w.eval(t)?;
                if inner.is_empty() {
                    inner
                } else {
                    CompactDiffeo::compose_all(k, [g, &inner, &g.inverse()]).with_support(self.support.clone())
                }
            }
            Node::Piece { base, i, q } => {
                let a = adjust(t);
                if a == 0.0 {
                    return Ok(CompactDiffeo::identity(k));
                }
                let q = *q as f64;
                let s = ((*i as f64 + a) / q).min(1.0);
                base.eval(s)?.compose(&base.eval(*i as f64 / q)?.inverse())
            }
        })
    }

    pub fn apply(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, HolonomyError> {
        Ok(self.eval(t)?.eval(x)?)
    }

    /// Largest displacement of `w(t)(x)` from `w(a)(x)` over sampled `t` in
    /// each horizontal interval `[a, b]`.
    pub fn horizontal_defect(&self, points: &[Vec<f64>], samples: usize) -> Result<f64, HolonomyError> {
        let mut worst = 0.0f64;
        for &(a, b) in &self.horizontal {
            let base = self.eval(a)?;
            for j in 1..=samples {
                let w = self.eval(a + (b - a) * j as f64 / samples as f64)?;
                for p in points {
                    worst = worst.max(crate::linalg::dist(&w.eval(p)?, &base.eval(p)?));
                }
            }
        }
        Ok(worst)
    }
}

/// `w(m + s) = w(s) ∘ w(1)^m` for integer `m` and `s ∈ [0, 1)`.
pub fn periodic_extend(w: &PeriodicPath, t: f64) -> Result<CompactDiffeo, HolonomyError> {
    if (0.0..=1.0).contains(&t) {
        return w.eval(t);
    }
    let m = t.floor();
    let s = t - m;
    Ok(w.eval(s)?.compose(&w.eval(1.0)?.pow(m as i64)))
}

/// A sample `(t, e^{2πit}, w(t)(y))` of a leaf, the angle in turns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafPoint {
    pub t: f64,
    pub angle: f64,
    pub x: Vec<f64>,
}

/// The leaf `{(e^{2πit}, w(t)(y))}` sampled at `samples + 1` times in `[t0, t1]`.
pub fn leaf(w: &PeriodicPath, y: &[f64], t0: f64, t1: f64, samples: usize) -> Result<Vec<LeafPoint>, HolonomyError> {
    let n = samples.max(1);
    (0..=n)
        .map(|j| {
            let t = t0 + (t1 - t0) * j as f64 / n as f64;
            Ok(LeafPoint {
                t,
                angle: t.rem_euclid(1.0),
                x: periodic_extend(w, t)?.eval(y)?,
            })
        })
        .collect()
}

/// CSV with header `t,angle,x1,…,xk`.
pub fn leaf_csv(points: &[LeafPoint]) -> String {
    let k = points.first().map_or(0, |p| p.x.len());
    let mut out = String::from("t,angle");
    for i in 1..=k {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for p in points {
        out.push_str(&format!("{:.12},{:.12}", p.t, p.angle));
        for v in &p.x {
            out.push_str(&format!(",{v:.12}"));
        }
        out.push('\n');
    }
    out
}

/// `w₁ ∗ w₂`: `w₁(2t)` then `w₂(2t − 1) ∘ w₁(1)`.
pub fn concat(w1: &PeriodicPath, w2: &PeriodicPath) -> Result<PeriodicPath, HolonomyError> {
    if !w1.is_adjusted() || !w2.is_adjusted() {
        return Err(HolonomyError::NotAdjusted);
    }
    if w1.k != w2.k {
        return Err(HolonomyError::Dimension("paths act on different ℝᵏ".into()));
    }
    let first = |w: &PeriodicPath| w.horizontal.iter().filter(|i| i.0 == 0.0).map(|i| i.1).fold(0.0, f64::max);
    let last = |w: &PeriodicPath| w.horizontal.iter().filter(|i| i.1 == 1.0).map(|i| i.0).fold(1.0, f64::min);
    let mut horizontal = vec![(0.0, 0.5 * first(w1)), (0.5 * last(w1), 0.5 * (1.0 + first(w2))), (0.5 * (1.0 + last(w2)), 1.0)];
    horizontal.dedup();
    Ok(PeriodicPath {
        k: w1.k,
        support: w1.support.union(&w2.support),
        horizontal,
        node: Node::Concat(Arc::new(w1.clone()), Arc::new(w2.clone())),
    })
}

/// `t ↦ g ∘ w(t) ∘ g⁻¹`.
pub fn conjugate(g: &CompactDiffeo, w: &PeriodicPath) -> Result<PeriodicPath, HolonomyError> {
    let support = if g.is_empty() { w.support.clone() } else { image_box(g, &w.support)? };
    Ok(PeriodicPath {
        k: w.k,
        support,
        horizontal: w.horizontal.clone(),
        node: Node::Conjugate(g.clone(), Arc::new(w.clone())),
    })
}

/// `w_i(t) = w((i + adjust(t))/q) ∘ w(i/q)⁻¹` for `i < q`; each piece starts at
/// the identity and is horizontal near its ends.
pub fn subdivide(w: &PeriodicPath, q: i64) -> Result<Vec<PeriodicPath>, HolonomyError> {
    if q <= 0 {
        return Err(HolonomyError::InvalidSubdivision(q));
    }
    if q == 1 {
        return Ok(vec![w.clone()]);
    }
    let base = Arc::new(w.clone());
    Ok((0..q as usize)
        .map(|i| PeriodicPath {
            k: w.k,
            support: w.support.clone(),
            horizontal: default_horizontal(),
            node: Node::Piece {
                base: base.clone(),
                i,
                q: q as usize,
            },
        })
        .collect())
}

/// JSON form: segments composed pointwise, adjusted unless `adjusted` is false.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub k: usize,
    pub segments: Vec<SegmentSpec>,
    #[serde(default = "yes")]
    pub adjusted: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub generator: GeneratorSpec,
    /// Time profile in `t`, vanishing at `t = 0`.
    pub profile: Expr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Rotation {
        profile: Expr,
    },
    Flow {
        field: Vec<Expr>,
        support: BoxRegion,
        #[serde(default = "default_steps")]
        steps_per_unit: usize,
    },
}

fn default_steps() -> usize {
    crate::diffgroup::STEPS_PER_UNIT
}

impl PathSpec {
    pub fn build(&self) -> Result<PeriodicPath, HolonomyError> {
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let generator = match &s.generator {
                    GeneratorSpec::Rotation { profile } => OneParameter::rotation(self.k, profile)?,
                    GeneratorSpec::Flow {
                        field,
                        support,
                        steps_per_unit,
                    } => OneParameter::Flow {
                        field: VectorField::new(field.clone(), support.clone())?,
                        steps_per_unit: (*steps_per_unit).max(1),
                    },
                };
                Ok(Segment::new(generator, &s.profile))
            })
            .collect::<Result<Vec<_>, HolonomyError>>()?;
        if self.adjusted {
            PeriodicPath::adjusted(self.k, segments)
        } else {
            PeriodicPath::unadjusted(self.k, segments)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgroup::{flow, h_f};

    fn profile() -> Expr {
        Expr::parse("0.4*bump(x1/0.9)").unwrap()
    }

    fn swirl() -> VectorField {
        VectorField::parse(
            &["-(x2-0.2)*bump(((x1-0.1)^2+(x2-0.2)^2)/0.64)", "(x1-0.1)*bump(((x1-0.1)^2+(x2-0.2)^2)/0.64)"],
            BoxRegion::centered(&[0.1, 0.2], 0.8),
        )
        .unwrap()
    }

    fn mixed() -> PeriodicPath {
        let segs = vec![
            Segment::new(OneParameter::rotation(2, &profile()).unwrap(), &Expr::parse("t^2").unwrap()),
            Segment::new(OneParameter::flow(swirl()), &Expr::parse("2*sin(t)").unwrap()),
        ];
        PeriodicPath::adjusted(2, segs).unwrap()
    }

    fn grid() -> Vec<Vec<f64>> {
        BoxRegion::cube(2, -1.6, 1.6).grid(17)
    }

    #[test]
    fn starts_at_identity_exactly() {
        let w = mixed();
        for p in grid() {
            assert_eq!(w.apply(0.0, &p).unwrap(), p);
        }
        let bad = Segment::new(OneParameter::flow(swirl()), &Expr::parse("t+1").unwrap());
        assert_eq!(PeriodicPath::unadjusted(2, vec![bad]).unwrap_err(), HolonomyError::NotBasedAtIdentity(0));
    }

    #[test]
    fn adjusted_paths_are_horizontal_near_ends() {
        let w = mixed();
        assert!(w.is_adjusted());
        assert_eq!(w.horizontal_defect(&grid(), 8).unwrap(), 0.0);
    }

    #[test]
    fn periodic_extension_cocycle() {
        let w = mixed();
        let pts = grid();
        let lhs = periodic_extend(&w, 1.5).unwrap();
        let rhs = w.eval(0.5).unwrap().compose(&w.eval(1.0).unwrap());
        assert!(lhs.sup_distance(&rhs, &pts).unwrap() < 1e-10);
        let neg = periodic_extend(&w, -1.0).unwrap();
        assert!(neg.sup_distance(&w.eval(1.0).unwrap().inverse(), &pts).unwrap() < 1e-12);
    }

    #[test]
    fn leaf_outside_support_is_horizontal() {
        let w = mixed();
        let y = vec![4.0, -3.0];
        for p in leaf(&w, &y, -1.0, 2.0, 30).unwrap() {
            assert_eq!(p.x, y);
        }
    }

    #[test]
    fn core_leaf_winds_with_slope_one() {
        // f(0) = 1 on the core circle
        let f = Expr::parse("exp(1)*bump(x1/0.9)").unwrap();
        let w = PeriodicPath::unadjusted(2, vec![Segment::new(OneParameter::rotation(2, &f).unwrap(), &Expr::var(Var::T))]).unwrap();
        for p in leaf(&w, &[1.0, 0.0], 0.0, 1.0, 40).unwrap() {
            let turns = p.x[1].atan2(p.x[0]).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
            let d = (turns - p.angle).rem_euclid(1.0);
            assert!(d.min(1.0 - d) < 1e-12, "{} {}", p.t, turns);
        }
        let csv = leaf_csv(&leaf(&w, &[1.0, 0.0], 0.0, 1.0, 4).unwrap());
        assert!(csv.starts_with("t,angle,x1,x2\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn concat_endpoint_laws() {
        let r = PeriodicPath::rotation(2, &profile()).unwrap();
        let rr = concat(&r, &r).unwrap();
        let h2 = h_f(2, &profile(), 2.0).unwrap();
        let pts = grid();
        assert!(rr.eval(1.0).unwrap().sup_distance(&h2, &pts).unwrap() < 1e-10);
        let w = mixed();
        let tw = concat(&PeriodicPath::trivial(2), &w).unwrap();
        assert!(tw.eval(1.0).unwrap().sup_distance(&w.eval(1.0).unwrap(), &pts).unwrap() < 1e-12);
        let wr = concat(&w, &r).unwrap();
        let law = r.eval(1.0).unwrap().compose(&w.eval(1.0).unwrap());
        assert!(wr.eval(1.0).unwrap().sup_distance(&law, &pts).unwrap() < 1e-12);
        assert!(wr.is_adjusted());
        assert_eq!(wr.horizontal_defect(&pts, 4).unwrap(), 0.0);
    }

    #[test]
    fn concat_rejects_unadjusted() {
        let raw = PeriodicPath::unadjusted(2, vec![Segment::new(OneParameter::flow(swirl()), &Expr::var(Var::T))]).unwrap();
        assert_eq!(concat(&raw, &mixed()).unwrap_err(), HolonomyError::NotAdjusted);
    }

    #[test]
    fn conjugate_endpoint_and_leaves() {
        let w = mixed();
        let g = flow(&swirl(), 0.7);
        let cw = conjugate(&g, &w).unwrap();
        let pts = grid();
        let expect = CompactDiffeo::compose_all(2, [&g, &w.eval(1.0).unwrap(), &g.inverse()]);
        assert!(cw.eval(1.0).unwrap().sup_distance(&expect, &pts).unwrap() < 1e-12);
        let y = vec![0.3, 0.1];
        let gy = g.eval(&y).unwrap();
        let l = leaf(&w, &y, 0.0, 1.0, 10).unwrap();
        let lc = leaf(&cw, &gy, 0.0, 1.0, 10).unwrap();
        for (a, b) in l.iter().zip(&lc) {
            assert!(crate::linalg::dist(&g.eval(&a.x).unwrap(), &b.x) < 1e-10);
        }
        let same = conjugate(&CompactDiffeo::identity(2), &w).unwrap();
        assert!(same.eval(0.6).unwrap().sup_distance(&w.eval(0.6).unwrap(), &pts).unwrap() < 1e-15);
    }

    #[test]
    fn subdivision_telescopes() {
        let w = mixed();
        assert!(matches!(subdivide(&w, 0), Err(HolonomyError::InvalidSubdivision(0))));
        assert_eq!(subdivide(&w, 1).unwrap().len(), 1);
        let pieces = subdivide(&w, 5).unwrap();
        let pts = grid();
        for p in &pieces {
            assert!(p.is_adjusted());
            for x in &pts {
                assert_eq!(&p.apply(0.0, x).unwrap(), x);
            }
        }
        let ends: Vec<CompactDiffeo> = pieces.iter().rev().map(|p| p.eval(1.0).unwrap()).collect();
        let prod = CompactDiffeo::compose_all(2, &ends);
        assert!(prod.sup_distance(&w.eval(1.0).unwrap(), &pts).unwrap() < 1e-9);
    }

    #[test]
    fn spec_builds_the_same_path() {
        let json = r#"{"k":2,"segments":[{"generator":{"kind":"rotation","profile":"0.4*bump(x1/0.9)"},"profile":"t"}]}"#;
        let spec: PathSpec = serde_json::from_str(json).unwrap();
        let w = spec.build().unwrap();
        let r = PeriodicPath::rotation(2, &profile()).unwrap();
        assert!(w.eval(0.3).unwrap().sup_distance(&r.eval(0.3).unwrap(), &grid()).unwrap() == 0.0);
    }
}
