//! Tubular neighbourhoods of simplices adapted to a plane field, sampled
//! verification of the civilization conditions, the radius search, and the
//! radially damped flattening homotopy.
//!
//! Condition ids used in certificates:
//!
//! | id     | predicate |
//! |--------|-----------|
//! | `3.4`  | fibres `B_x(δ)×E_x(η)` form a tube; (n−2)-simplices through σ leave it through `B̊×∂E` |
//! | `3.5`  | the field is constant on each fibre |
//! | `3.6`  | `N(σ)∩N(σ′) ⊂ N(σ∩σ′)` and fibre slices nest in face tubes |
//! | `3.7`  | `N(σ)` misses higher simplices not having σ as a face |
//! | `3.8`  | tubes of simplices inside U stay in U |
//! | `3.9`  | K, the tubes and simplices inside U lie in the declared integrable region |
//! | `3.13`–`3.15` | the segment-fibre analogues for (n−1)-simplices |

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::smoothstep;
use crate::geometry::{combinations, AffineSimplex, GeometryError, LatticeTriangulation};
use crate::linalg::{complement, nullspace, orth, polar_orthonormalize, sigma_min, subspace_distance, BoxRegion, Mat};
use crate::planefield::{graph_map_between, FieldError, FieldHomotopy, PlaneField};

pub const CONSTANCY_TOL: f64 = 1e-8;
const LOCATE_TOL: f64 = 1e-12;
const MIN_RADIUS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CivilizeError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("τ(x) + T_σ drops dimension at {x:?}")]
    GeneralPosition { x: Vec<f64> },
    #[error("fibre at {x:?} leaves the field domain")]
    Boundary { x: Vec<f64> },
    #[error("radii not nested: {0}")]
    RadiiNotNested(String),
    #[error("no admissible radii above {MIN_RADIUS:e} for dimension {dim}: {reason}")]
    NoAdmissibleRadii { dim: usize, reason: String },
    #[error("graph precondition fails at {z:?}")]
    Graph { z: Vec<f64> },
}

/// Shape of the fibres of a tube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FiberShape {
    /// `B_x(δ) × E_x(η)` for simplices of dimension ≤ n−2.
    Disk { delta: f64, eta: f64 },
    /// The segment `F_x(δ)` for (n−1)-simplices.
    Segment { delta: f64 },
}

impl FiberShape {
    pub fn delta(&self) -> f64 {
        match self {
            FiberShape::Disk { delta, .. } | FiberShape::Segment { delta } => *delta,
        }
    }

    pub fn eta(&self) -> f64 {
        match self {
            FiberShape::Disk { eta, .. } => *eta,
            FiberShape::Segment { .. } => 0.0,
        }
    }

}

/// Orthonormal bases of the fibre directions at a point of σ.
#[derive(Clone, Debug)]
pub struct Fiber {
    pub base: Vec<f64>,
    /// Plane-direction basis (τ(x), or the line F_x for segment fibres).
    pub b: Mat,
    /// Complementary directions `E_x` (empty for segment fibres).
    pub e: Mat,
    pub shape: FiberShape,
}

impl Fiber {
    pub fn point(&self, bc: &[f64], ec: &[f64]) -> Vec<f64> {
        let mut p = self.base.clone();
        for (i, pi) in p.iter_mut().enumerate() {
            for (j, c) in bc.iter().enumerate() {
                *pi += self.b[(i, j)] * c;
            }
            for (j, c) in ec.iter().enumerate() {
                *pi += self.e[(i, j)] * c;
            }
        }
        p
    }
}

fn tangent_basis(simplex: &AffineSimplex) -> Mat {
    if simplex.dim() == 0 {
        Mat::zeros(simplex.n(), 0)
    } else {
        orth(&simplex.edge_matrix(), 1e-12)
    }
}

/// Fibre bases of the tube around `simplex` at `x`.
pub fn normal_fiber(
    simplex: &AffineSimplex,
    field: &PlaneField,
    x: &[f64],
    delta: f64,
    eta: f64,
) -> Result<Fiber, CivilizeError> {
    TubularNbhd::new(simplex.clone(), field, FiberShape::Disk { delta, eta }).fiber(x)
}

fn fiber_at(
    simplex: &AffineSimplex,
    t: &Mat,
    field: &PlaneField,
    x: &[f64],
    shape: FiberShape,
    reference: Option<&Mat>,
) -> Result<Fiber, CivilizeError> {
    let n = simplex.n();
    let b = field.frame(x)?;
    match shape {
        FiberShape::Disk { .. } => {
            let span = Mat::from_fn(n, t.ncols() + 2, |r, c| {
                if c < 2 {
                    b[(r, c)]
                } else {
                    t[(r, c - 2)]
                }
            });
            if t.ncols() + 2 > n || sigma_min(&span) < 1e-9 {
                return Err(CivilizeError::GeneralPosition { x: x.to_vec() });
            }
            let e = if t.ncols() + 2 == n {
                Mat::zeros(n, 0)
            } else {
                let q = complement(&span);
                // transport the reference frame so E_x varies continuously in x
                reference
                    .and_then(|r| polar_orthonormalize(&(&q * (q.transpose() * r))))
                    .unwrap_or(q)
            };
            Ok(Fiber {
                base: x.to_vec(),
                b,
                e,
                shape,
            })
        }
        FiberShape::Segment { .. } => {
            if t.ncols() + 1 != n {
                return Err(CivilizeError::GeneralPosition { x: x.to_vec() });
            }
            // line = T_σ ∩ τ(x); F_x = its orthogonal complement in τ(x)
            let stacked = Mat::from_fn(n, n + 1, |r, c| if c < n - 1 { t[(r, c)] } else { -b[(r, c - (n - 1))] });
            let ker = nullspace(&stacked);
            let coeff = [ker[(n - 1, 0)], ker[(n, 0)]];
            let f = [-coeff[1], coeff[0]];
            let nrm = (f[0] * f[0] + f[1] * f[1]).sqrt();
            if nrm < 1e-12 {
                return Err(CivilizeError::GeneralPosition { x: x.to_vec() });
            }
            let line = Mat::from_fn(n, 1, |r, _| (b[(r, 0)] * f[0] + b[(r, 1)] * f[1]) / nrm);
            let check = Mat::from_fn(n, n, |r, c| if c < n - 1 { t[(r, c)] } else { line[(r, 0)] });
            if sigma_min(&check) < 1e-9 {
                return Err(CivilizeError::GeneralPosition { x: x.to_vec() });
            }
            Ok(Fiber {
                base: x.to_vec(),
                b: line,
                e: Mat::zeros(n, 0),
                shape,
            })
        }
    }
}

/// A point of a tube in fibre coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeCoords {
    pub base: Vec<f64>,
    pub bary: Vec<f64>,
    pub b: Vec<f64>,
    pub e: Vec<f64>,
}

impl TubeCoords {
    pub fn b_norm(&self) -> f64 {
        crate::linalg::norm(&self.b)
    }

    pub fn e_norm(&self) -> f64 {
        crate::linalg::norm(&self.e)
    }

    pub fn base_in_simplex(&self, tol: f64) -> bool {
        self.bary.iter().all(|w| *w >= -tol)
    }
}

/// The tube `N(σ)` with fibres over all points of σ.
#[derive(Clone, Debug)]
pub struct TubularNbhd {
    pub simplex: AffineSimplex,
    /// Vertex ids of σ in the ambient triangulation (may be empty).
    pub ids: Vec<usize>,
    pub shape: FiberShape,
    field: PlaneField,
    tangent: Mat,
    reference: Option<Mat>,
}

impl TubularNbhd {
    pub fn new(simplex: AffineSimplex, field: &PlaneField, shape: FiberShape) -> Self {
        let tangent = tangent_basis(&simplex);
        let reference = fiber_at(&simplex, &tangent, field, &simplex.centroid(), shape, None)
            .ok()
            .map(|f| f.e)
            .filter(|e| e.ncols() > 0);
        TubularNbhd {
            simplex,
            ids: Vec::new(),
            shape,
            field: field.clone(),
            tangent,
            reference,
        }
    }

    /// Disk-fibre tube for simplices of dimension ≤ n−2, segment tube for
    /// (n−1)-simplices.
    pub fn for_simplex(simplex: AffineSimplex, field: &PlaneField, delta: f64, eta: f64) -> Self {
        let shape = if simplex.dim() + 1 == simplex.n() {
            FiberShape::Segment { delta }
        } else {
            FiberShape::Disk { delta, eta }
        };
        Self::new(simplex, field, shape)
    }

    pub fn with_ids(mut self, ids: Vec<usize>) -> Self {
        self.ids = ids;
        self
    }

    pub fn with_shape(&self, shape: FiberShape) -> Self {
        let mut t = self.clone();
        t.shape = shape;
        t
    }

    pub fn dim(&self) -> usize {
        self.simplex.dim()
    }

    pub fn field(&self) -> &PlaneField {
        &self.field
    }

    pub fn fiber(&self, x: &[f64]) -> Result<Fiber, CivilizeError> {
        fiber_at(&self.simplex, &self.tangent, &self.field, x, self.shape, self.reference.as_ref())
    }

    /// Fibre coordinates of `p`: solves `p = x + B b + E e` with `x` in the
    /// affine hull of σ by fixed-point iteration on `x`.
    pub fn locate(&self, p: &[f64]) -> Result<Option<TubeCoords>, CivilizeError> {
        let n = self.simplex.n();
        let v0 = &self.simplex.vertices[0];
        let t = &self.tangent;
        // start from the orthogonal projection onto the affine hull
        let mut x: Vec<f64> = v0.clone();
        for c in 0..t.ncols() {
            let d: f64 = (0..n).map(|r| t[(r, c)] * (p[r] - v0[r])).sum();
            for r in 0..n {
                x[r] += d * t[(r, c)];
            }
        }
        let scale = 1.0 + crate::linalg::norm(p);
        for _ in 0..60 {
            if !self.field.domain().contains(&x) {
                return Ok(None);
            }
            let fib = self.fiber(&x)?;
            let (nb, ne, nt) = (fib.b.ncols(), fib.e.ncols(), t.ncols());
            let m = Mat::from_fn(n, n, |r, c| {
                if c < nt {
                    t[(r, c)]
                } else if c < nt + nb {
                    fib.b[(r, c - nt)]
                } else {
                    fib.e[(r, c - nt - nb)]
                }
            });
            let rhs = Mat::from_fn(n, 1, |r, _| p[r] - x[r]);
            let Some(sol) = m.lu().solve(&rhs) else {
                return Ok(None);
            };
            let step: f64 = (0..nt).map(|c| sol[c].abs()).fold(0.0, f64::max);
            for c in 0..nt {
                for r in 0..n {
                    x[r] += sol[c] * t[(r, c)];
                }
            }
            if step <= 1e-14 * scale || nt == 0 {
                let fib = if nt == 0 { fib } else { self.fiber(&x)? };
                let m = Mat::from_fn(n, nb + ne, |r, c| {
                    if c < nb {
                        fib.b[(r, c)]
                    } else {
                        fib.e[(r, c - nb)]
                    }
                });
                let rhs = Mat::from_fn(n, 1, |r, _| p[r] - x[r]);
                let coords = m.transpose() * rhs;
                let bary = if self.simplex.dim() == 0 {
                    vec![1.0]
                } else {
                    self.simplex.barycentric(&x)
                };
                return Ok(Some(TubeCoords {
                    base: x,
                    bary,
                    b: coords.iter().take(nb).copied().collect(),
                    e: coords.iter().skip(nb).copied().collect(),
                }));
            }
        }
        Ok(None)
    }

    /// Membership in the closed tube (with a relative tolerance `slack`).
    pub fn contains(&self, p: &[f64], slack: f64) -> Result<bool, CivilizeError> {
        if !self.bounding_box().expand(1e-9).contains(p) {
            return Ok(false);
        }
        Ok(match self.locate(p)? {
            Some(c) => self.coords_inside(&c, slack),
            None => false,
        })
    }

    fn coords_inside(&self, c: &TubeCoords, slack: f64) -> bool {
        c.base_in_simplex(LOCATE_TOL)
            && c.b_norm() <= self.shape.delta() * (1.0 + slack) + LOCATE_TOL
            && c.e_norm() <= self.shape.eta() * (1.0 + slack) + LOCATE_TOL
    }


    /// Sampled fibre points `(x, b, e)` over barycentric samples of σ.
    pub fn sample_points(&self, m: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>, CivilizeError> {
        let mut out = Vec::new();
        for x in self.simplex.barycentric_samples(m) {
            let fib = self.fiber(&x)?;
            for (bc, ec) in fiber_coordinate_samples(&fib, m.max(1)) {
                out.push((x.clone(), fib.point(&bc, &ec)));
            }
        }
        Ok(out)
    }

    /// Box containing the tube: the simplex box padded by `δ + η`.
    pub fn bounding_box(&self) -> BoxRegion {
        let r = self.shape.delta() + self.shape.eta();
        self.simplex.bounding_box().expand(r)
    }
}

fn disk_samples(dim: usize, radius: f64, m: usize) -> Vec<Vec<f64>> {
    match dim {
        0 => vec![vec![]],
        1 => (0..=2 * m)
            .map(|i| vec![radius * (i as f64 / m as f64 - 1.0)])
            .collect(),
        _ => crate::linalg::Ball::new(vec![0.0; dim], radius).samples(m),
    }
}

fn sphere_samples(dim: usize, radius: f64, m: usize) -> Vec<Vec<f64>> {
    match dim {
        0 => vec![],
        1 => vec![vec![-radius], vec![radius]],
        2 => (0..12 * m)
            .map(|j| {
                let a = std::f64::consts::TAU * j as f64 / (12 * m) as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect(),
        _ => disk_samples(dim, 1.0, m)
            .into_iter()
            .filter(|v| crate::linalg::norm(v) > 1e-12)
            .map(|v| {
                let r = crate::linalg::norm(&v);
                v.into_iter().map(|c| c * radius / r).collect()
            })
            .collect(),
    }
}

/// Fibre coordinate samples including the fibre boundary.
fn fiber_coordinate_samples(fib: &Fiber, m: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (nb, ne) = (fib.b.ncols(), fib.e.ncols());
    let bs = disk_samples(nb, fib.shape.delta(), m);
    let es = disk_samples(ne, fib.shape.eta(), m);
    let mut out = Vec::with_capacity(bs.len() * es.len());
    for b in &bs {
        for e in &es {
            out.push((b.clone(), e.clone()));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub pass: bool,
    /// Worst value of the checked quantity (a distance or a slack; the sign
    /// convention is documented per check).
    pub worst: f64,
    pub witness: Option<Vec<f64>>,
    pub samples: usize,
}

impl CheckResult {
    fn passing(samples: usize, worst: f64) -> Self {
        CheckResult {
            pass: true,
            worst,
            witness: None,
            samples,
        }
    }
}

/// Max projector distance between τ at fibre points and τ at the fibre base
/// (condition 3.5 / 3.14). Passes when below `tol`.
pub fn check_constancy(
    field: &PlaneField,
    tube: &TubularNbhd,
    samples: usize,
    tol: f64,
) -> Result<CheckResult, CivilizeError> {
    let pts = tube.sample_points(samples)?;
    let mut worst: f64 = 0.0;
    let mut witness = None;
    let mut base_cache: BTreeMap<Vec<u64>, Mat> = BTreeMap::new();
    for (x, p) in &pts {
        if !field.domain().contains(p) {
            return Err(CivilizeError::Boundary { x: p.clone() });
        }
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        let fx = match base_cache.get(&key) {
            Some(f) => f.clone(),
            None => {
                let f = field.frame(x)?;
                base_cache.insert(key, f.clone());
                f
            }
        };
        let d = subspace_distance(&fx, &field.frame(p)?);
        if d > worst {
            worst = d;
            witness = Some(p.clone());
        }
    }
    Ok(CheckResult {
        pass: worst < tol,
        worst,
        witness: if worst < tol { None } else { witness },
        samples: pts.len(),
    })
}

/// Condition 3.4: fibre dimensions, tube injectivity on samples (the
/// retraction recovers the base point, the tube map has nonsingular
/// differential) and, for each (n−2)-simplex `rho` through σ, that points of
/// ρ in the tube satisfy `|b| < δ`. `worst` is the smallest slack found.
pub fn check_tube(
    tube: &TubularNbhd,
    through: &[AffineSimplex],
    samples: usize,
) -> Result<CheckResult, CivilizeError> {
    let n = tube.simplex.n();
    let i = tube.dim();
    let scale = tube.shape.delta().max(tube.shape.eta()).max(1e-300);
    let mut worst = f64::INFINITY;
    let mut count = 0;
    let fail = |worst: f64, w: Vec<f64>, count: usize| CheckResult {
        pass: false,
        worst,
        witness: Some(w),
        samples: count,
    };
    for x in tube.simplex.barycentric_samples(samples) {
        let fib = tube.fiber(&x)?;
        let expected = match tube.shape {
            FiberShape::Disk { .. } => n - 2 - i,
            FiberShape::Segment { .. } => 0,
        };
        if fib.e.ncols() != expected {
            return Ok(fail(0.0, x, count));
        }
        // differential of (x, b, e) ↦ x + B(x) b + E(x) e at the fibre corners
        let jac_ok = tube_jacobian_margin(tube, &fib, &x)?;
        worst = worst.min(jac_ok);
        if jac_ok <= 1e-9 {
            return Ok(fail(jac_ok, x, count));
        }
        for (bc, ec) in fiber_coordinate_samples(&fib, samples.max(1)) {
            let p = fib.point(&bc, &ec);
            count += 1;
            if !tube.field.domain().contains(&p) {
                return Err(CivilizeError::Boundary { x: p });
            }
            match tube.locate(&p)? {
                Some(c) => {
                    let err = crate::linalg::dist(&c.base, &x);
                    if err > 1e-9 * (1.0 + scale) {
                        return Ok(fail(-err, p, count));
                    }
                }
                None => return Ok(fail(f64::NEG_INFINITY, p, count)),
            }
        }
    }
    if let FiberShape::Disk { delta, .. } = tube.shape {
        for rho in through {
            for p in points_approaching(rho, &tube.simplex, samples) {
                count += 1;
                let Some(c) = tube.locate(&p)? else { continue };
                if !c.base_in_simplex(1e-9) || c.e_norm() > tube.shape.eta() {
                    continue;
                }
                let slack = (delta - c.b_norm()) / delta;
                worst = worst.min(slack);
                if slack <= 0.0 {
                    return Ok(fail(slack, p, count));
                }
            }
        }
    }
    Ok(CheckResult::passing(count, worst))
}

fn tube_jacobian_margin(tube: &TubularNbhd, fib: &Fiber, x: &[f64]) -> Result<f64, CivilizeError> {
    let n = tube.simplex.n();
    let t = &tube.tangent;
    let (nb, ne, nt) = (fib.b.ncols(), fib.e.ncols(), t.ncols());
    let d = tube.shape.delta();
    let eta = tube.shape.eta();
    let corner_b: Vec<f64> = (0..nb).map(|j| if j == 0 { d } else { 0.0 }).collect();
    let corner_e: Vec<f64> = (0..ne).map(|j| if j == 0 { eta } else { 0.0 }).collect();
    let h = 1e-6 * (1.0 + tube.simplex.edge_matrix().norm());
    let mut cols = Mat::zeros(n, n);
    for c in 0..nt {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        for r in 0..n {
            xp[r] += h * t[(r, c)];
            xm[r] -= h * t[(r, c)];
        }
        let fp = tube.fiber(&xp)?.point(&corner_b, &corner_e);
        let fm = tube.fiber(&xm)?.point(&corner_b, &corner_e);
        for r in 0..n {
            cols[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    for c in 0..nb {
        for r in 0..n {
            cols[(r, nt + c)] = fib.b[(r, c)];
        }
    }
    for c in 0..ne {
        for r in 0..n {
            cols[(r, nt + nb + c)] = fib.e[(r, c)];
        }
    }
    Ok(sigma_min(&cols))
}

/// Points of `rho` marching towards its face `sigma` geometrically.
fn points_approaching(rho: &AffineSimplex, sigma: &AffineSimplex, m: usize) -> Vec<Vec<f64>> {
    let on_sigma: Vec<bool> = rho
        .vertices
        .iter()
        .map(|v| sigma.vertices.iter().any(|w| crate::linalg::dist(v, w) < 1e-12))
        .collect();
    let mut out = Vec::new();
    let grid = rho.barycentric_samples(m.max(2));
    for q in grid {
        let bq = rho.barycentric(&q);
        let mass: f64 = bq.iter().zip(&on_sigma).filter(|(_, s)| **s).map(|(w, _)| *w).sum();
        if mass <= 1e-12 {
            out.push(q);
            continue;
        }
        let w: Vec<f64> = bq
            .iter()
            .zip(&on_sigma)
            .map(|(w, s)| if *s { w / mass } else { 0.0 })
            .collect();
        let anchor = rho.point(&w);
        for k in 0..24 {
            let s = 0.5f64.powi(k);
            out.push(anchor.iter().zip(&q).map(|(a, b)| a + s * (b - a)).collect());
        }
    }
    out
}

/// Condition 3.6 for a pair of tubes: sampled points of `a` lying in `b`
/// must lie in `common` (the tube of `σ ∩ σ′`, `None` when disjoint);
/// when `b` is a proper face of `a`, fibre slices of `a` through `b` must
/// nest inside the `b`-slices with the same `e`.
pub fn check_compatibility(
    a: &TubularNbhd,
    b: &TubularNbhd,
    common: Option<&TubularNbhd>,
    samples: usize,
    seed: u64,
) -> Result<CheckResult, CivilizeError> {
    let mut pts = a.sample_points(samples)?;
    pts.extend(b.sample_points(samples)?);
    // seeded interior points of a's fibres
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bary_count = a.simplex.vertices.len();
    for _ in 0..8 * samples.max(1) {
        let mut w: Vec<f64> = (0..bary_count).map(|_| rng.gen_range(0.0..1.0f64)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let x = a.simplex.point(&w);
        let fib = a.fiber(&x)?;
        let bc: Vec<f64> = (0..fib.b.ncols()).map(|_| rng.gen_range(-1.0..1.0) * fib.shape.delta() / (fib.b.ncols() as f64).sqrt()).collect();
        let ec: Vec<f64> = (0..fib.e.ncols()).map(|_| rng.gen_range(-1.0..1.0) * fib.shape.eta() / (fib.e.ncols().max(1) as f64).sqrt()).collect();
        pts.push((x, fib.point(&bc, &ec)));
    }
    let mut worst = f64::INFINITY;
    for (_, p) in &pts {
        if !a.contains(p, 0.0)? || !b.contains(p, 0.0)? {
            continue;
        }
        let ok = match common {
            Some(c) => c.contains(p, 1e-9)?,
            None => false,
        };
        if !ok {
            return Ok(CheckResult {
                pass: false,
                worst: 0.0,
                witness: Some(p.clone()),
                samples: pts.len(),
            });
        }
    }
    let is_face = !b.ids.is_empty() && b.ids.iter().all(|v| a.ids.contains(v)) && b.ids.len() < a.ids.len()
        || b.ids.is_empty() && b.simplex.vertices.iter().all(|v| a.simplex.vertices.iter().any(|w| crate::linalg::dist(v, w) < 1e-12)) && b.dim() < a.dim();
    let mut count = pts.len();
    if is_face {
        if let FiberShape::Disk { delta: db, .. } = b.shape {
            let bbox = b.bounding_box().expand(1e-9);
            for x in a.simplex.barycentric_samples(samples.max(2)) {
                let fib = a.fiber(&x)?;
                let mut slice = sphere_samples(fib.b.ncols(), fib.shape.delta(), samples.max(1));
                slice.push(vec![0.0; fib.b.ncols()]);
                for ec in disk_samples(fib.e.ncols(), fib.shape.eta(), samples.max(1)) {
                    // the slice B_x(δ_a) × {e} either misses N(b) or sits in one open b-slice
                    let pts: Vec<Vec<f64>> = slice.iter().map(|bq| fib.point(bq, &ec)).collect();
                    let mut located = Vec::with_capacity(pts.len());
                    for q in &pts {
                        let c = if bbox.contains(q) { b.locate(q)? } else { None };
                        located.push(c);
                    }
                    let Some(level) = located.iter().flatten().find(|c| b.coords_inside(c, 0.0)).cloned() else {
                        continue;
                    };
                    for (q, cq) in pts.into_iter().zip(located) {
                        count += 1;
                        let Some(cq) = cq else {
                            return Ok(fail_at(q, count));
                        };
                        let same_level = crate::linalg::dist(&cq.e, &level.e) <= 1e-9 * (1.0 + db)
                            && crate::linalg::dist(&cq.base, &level.base) <= 1e-9 * (1.0 + db);
                        let slack = (db - cq.b_norm()) / db;
                        worst = worst.min(slack);
                        if !same_level || slack <= 0.0 {
                            return Ok(fail_at(q, count));
                        }
                    }
                }
            }
        }
    }
    Ok(CheckResult::passing(count, worst))
}

fn fail_at(q: Vec<f64>, count: usize) -> CheckResult {
    CheckResult {
        pass: false,
        worst: 0.0,
        witness: Some(q),
        samples: count,
    }
}

/// Condition 3.7: fibres over points of σ outside the tubes of its proper
/// faces miss `other` (a simplex not having σ as a face).
pub fn check_separation(
    tube: &TubularNbhd,
    face_tubes: &[&TubularNbhd],
    other: &AffineSimplex,
    samples: usize,
) -> Result<CheckResult, CivilizeError> {
    let mut count = 0;
    let mut worst = f64::INFINITY;
    let pts = points_approaching(other, &tube.simplex, samples);
    let mut all = other.barycentric_samples(samples.max(2) * 2);
    all.extend(pts);
    'pts: for p in all {
        count += 1;
        let Some(c) = tube.locate(&p)? else { continue };
        if !c.base_in_simplex(LOCATE_TOL) {
            continue;
        }
        for f in face_tubes {
            if f.contains(&c.base, 0.0)? {
                continue 'pts;
            }
        }
        let eta_slack = if c.e.is_empty() {
            f64::NEG_INFINITY
        } else {
            c.e_norm() / tube.shape.eta() - 1.0
        };
        let slack = (c.b_norm() / tube.shape.delta() - 1.0).max(eta_slack);
        worst = worst.min(slack);
        if slack <= 0.0 {
            return Ok(CheckResult {
                pass: false,
                worst: slack,
                witness: Some(p),
                samples: count,
            });
        }
    }
    Ok(CheckResult::passing(count, worst))
}

/// Conditions 3.8/3.9 style containment of sampled tube points in a box.
pub fn check_tube_in(tube: &TubularNbhd, region: &BoxRegion, samples: usize) -> Result<CheckResult, CivilizeError> {
    let pts = tube.sample_points(samples)?;
    let mut worst = f64::INFINITY;
    for (_, p) in &pts {
        let d = region.depth(p);
        worst = worst.min(d);
        if d < 0.0 {
            return Ok(CheckResult {
                pass: false,
                worst: d,
                witness: Some(p.clone()),
                samples: pts.len(),
            });
        }
    }
    Ok(CheckResult::passing(pts.len(), worst))
}

/// Simplices of a triangulation near a region, grouped by dimension.
#[derive(Clone, Debug)]
pub struct CivilContext {
    pub n: usize,
    pub field: PlaneField,
    /// Vertex positions keyed by vertex id.
    pub positions: BTreeMap<usize, Vec<f64>>,
    /// Faces (sorted vertex ids) by dimension; `faces[n]` are the top simplices.
    pub faces: Vec<Vec<Vec<usize>>>,
    /// Faces of top simplices not contained in U (those triggering deformations).
    pub active: Vec<BTreeSet<Vec<usize>>>,
    pub k: Option<BoxRegion>,
    pub u: Option<BoxRegion>,
    pub samples: usize,
    pub seed: u64,
}

impl CivilContext {
    /// All faces of the top simplices of `t` meeting `region`.
    pub fn from_triangulation(
        t: &LatticeTriangulation,
        field: &PlaneField,
        region: &BoxRegion,
        k: Option<BoxRegion>,
        u: Option<BoxRegion>,
    ) -> Self {
        let n = t.n();
        let tops: Vec<Vec<usize>> = t
            .meeting(region)
            .into_iter()
            .map(|id| {
                let mut s = t.simplices()[id].clone();
                s.sort_unstable();
                s
            })
            .collect();
        let mut positions = BTreeMap::new();
        for s in &tops {
            for &v in s {
                positions.entry(v).or_insert_with(|| t.vertex(v));
            }
        }
        Self::from_tops(n, field, positions, tops, k, u)
    }

    pub fn from_tops(
        n: usize,
        field: &PlaneField,
        positions: BTreeMap<usize, Vec<f64>>,
        tops: Vec<Vec<usize>>,
        k: Option<BoxRegion>,
        u: Option<BoxRegion>,
    ) -> Self {
        let mut faces: Vec<BTreeSet<Vec<usize>>> = vec![BTreeSet::new(); n + 1];
        let mut active: Vec<BTreeSet<Vec<usize>>> = vec![BTreeSet::new(); n + 1];
        for s in &tops {
            let inside_u = u
                .as_ref()
                .map(|u| s.iter().all(|v| u.contains(&positions[v])))
                .unwrap_or(false);
            for d in 0..=n {
                for c in combinations(s.len(), d + 1) {
                    let f: Vec<usize> = c.iter().map(|&i| s[i]).collect();
                    faces[d].insert(f.clone());
                    if !inside_u {
                        active[d].insert(f);
                    }
                }
            }
        }
        CivilContext {
            n,
            field: field.clone(),
            positions,
            faces: faces.into_iter().map(|s| s.into_iter().collect()).collect(),
            active,
            k,
            u,
            samples: 2,
            seed: 0,
        }
    }

    pub fn simplex(&self, ids: &[usize]) -> AffineSimplex {
        AffineSimplex {
            vertices: ids.iter().map(|v| self.positions[v].clone()).collect(),
        }
    }

    pub fn tube(&self, ids: &[usize], radii: &[(f64, f64)]) -> TubularNbhd {
        let d = ids.len() - 1;
        let (delta, eta) = radii[d];
        TubularNbhd::for_simplex(self.simplex(ids), &self.field, delta, eta).with_ids(ids.to_vec())
    }

    fn inside_u(&self, ids: &[usize]) -> bool {
        self.u
            .as_ref()
            .map(|u| ids.iter().all(|v| u.contains(&self.positions[v])))
            .unwrap_or(false)
    }

    fn near(&self, a: &[usize], b: &[usize], pad: f64) -> bool {
        self.simplex(a)
            .bounding_box()
            .expand(pad)
            .intersects(&self.simplex(b).bounding_box())
    }
}

fn intersect_ids(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|v| b.contains(v)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateEntry {
    pub condition: String,
    /// Vertex ids of the simplex (or simplex pair) checked.
    pub simplices: Vec<Vec<usize>>,
    pub pass: bool,
    pub worst: f64,
    pub witness: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CivilizationCertificate {
    pub entries: Vec<CertificateEntry>,
    pub samples: usize,
    pub seed: u64,
    pub pass: bool,
}

impl CivilizationCertificate {
    pub fn failures(&self) -> impl Iterator<Item = &CertificateEntry> {
        self.entries.iter().filter(|e| !e.pass)
    }
}

fn entry(cond: &str, simplices: Vec<Vec<usize>>, r: CheckResult) -> CertificateEntry {
    CertificateEntry {
        condition: cond.into(),
        simplices,
        pass: r.pass,
        worst: r.worst,
        witness: r.witness,
    }
}

/// Runs the sampled civilization checks for all active simplices of
/// dimension ≤ `top_dim` with the given radii (`radii[i] = (δ_i, η_i)`).
/// With `include_constancy = false`, condition 3.5/3.14 is skipped.
pub fn certify(
    ctx: &CivilContext,
    radii: &[(f64, f64)],
    top_dim: usize,
    include_constancy: bool,
) -> Result<CivilizationCertificate, CivilizeError> {
    certify_dims(ctx, radii, 0, top_dim, include_constancy, true, false)
}

fn certify_dims(
    ctx: &CivilContext,
    radii: &[(f64, f64)],
    from_dim: usize,
    top_dim: usize,
    include_constancy: bool,
    containment: bool,
    fail_fast: bool,
) -> Result<CivilizationCertificate, CivilizeError> {
    let n = ctx.n;
    if top_dim >= n || radii.len() <= top_dim {
        return Err(CivilizeError::RadiiNotNested("radii table shorter than the checked skeleton".into()));
    }
    for i in 1..=top_dim {
        if !(radii[i].0 < radii[i - 1].0) || (i < n - 1 && !(radii[i].1 < radii[i - 1].1)) {
            return Err(CivilizeError::RadiiNotNested(format!("dimension {i}")));
        }
    }
    let m = ctx.samples;
    let mut tasks: Vec<(usize, Vec<usize>)> = Vec::new();
    for d in from_dim..=top_dim {
        for s in &ctx.active[d] {
            tasks.push((d, s.clone()));
        }
    }
    let failed = AtomicBool::new(false);
    let per_simplex: Vec<Vec<CertificateEntry>> = tasks
        .par_iter()
        .map(|(d, s)| -> Result<Vec<CertificateEntry>, CivilizeError> {
            let d = *d;
            let mut out = Vec::new();
            if failed.load(Ordering::Relaxed) {
                return Ok(out);
            }
            macro_rules! record {
                ($e:expr) => {{
                    let e = $e;
                    let bad = !e.pass;
                    out.push(e);
                    if bad && fail_fast {
                        failed.store(true, Ordering::Relaxed);
                        return Ok(out);
                    }
                }};
            }
            let tube = ctx.tube(s, radii);
            let segment = d == n - 1;
            let (c_tube, c_const, c_compat) = if segment { ("3.13", "3.14", "3.15") } else { ("3.4", "3.5", "3.6") };
            let through: Vec<AffineSimplex> = if segment {
                Vec::new()
            } else {
                ctx.faces[n - 2]
                    .iter()
                    .filter(|r| s.iter().all(|v| r.contains(v)) && r.len() > s.len())
                    .map(|r| ctx.simplex(r))
                    .collect()
            };
            record!(entry(c_tube, vec![s.clone()], check_tube(&tube, &through, m)?));
            if include_constancy {
                record!(entry(c_const, vec![s.clone()], check_constancy(&ctx.field, &tube, m, CONSTANCY_TOL)?));
            }
            for d2 in 0..=d {
                for s2 in &ctx.active[d2] {
                    if s2 == s || (d2 == d && s2 < s) || !ctx.near(s, s2, 2.0 * (radii[0].0 + radii[0].1)) {
                        continue;
                    }
                    let t2 = ctx.tube(s2, radii);
                    let common_ids = intersect_ids(s, s2);
                    let common = (!common_ids.is_empty()).then(|| ctx.tube(&common_ids, radii));
                    let r = check_compatibility(&tube, &t2, common.as_ref(), m, ctx.seed)?;
                    record!(entry(c_compat, vec![s.clone(), s2.clone()], r));
                }
            }
            let face_tubes: Vec<TubularNbhd> = (0..d)
                .flat_map(|fd| combinations(s.len(), fd + 1))
                .map(|c| ctx.tube(&c.iter().map(|&i| s[i]).collect::<Vec<_>>(), radii))
                .collect();
            let face_refs: Vec<&TubularNbhd> = face_tubes.iter().collect();
            let higher_from = if segment { n } else { top_dim + 1 };
            for hd in higher_from..=n {
                for other in &ctx.faces[hd] {
                    if s.iter().all(|v| other.contains(v)) || !ctx.near(s, other, radii[d].0 + radii[d].1) {
                        continue;
                    }
                    let r = check_separation(&tube, &face_refs, &ctx.simplex(other), m)?;
                    record!(entry(if segment { "3.15" } else { "3.7" }, vec![s.clone(), other.clone()], r));
                }
            }
            if ctx.inside_u(s) {
                if let Some(u) = &ctx.u {
                    record!(entry("3.8", vec![s.clone()], check_tube_in(&tube, u, m)?));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut entries: Vec<CertificateEntry> = per_simplex.into_iter().flatten().collect();
    if let (Some(u), true) = (&ctx.u, containment) {
        let mut ok = true;
        let mut witness = None;
        if let Some(k) = &ctx.k {
            if !u.contains_box(k) {
                ok = false;
                witness = Some(k.center());
            }
        }
        for d in 0..=n {
            for s in &ctx.faces[d] {
                if ctx.inside_u(s) && d <= top_dim && ctx.active[d].contains(s) {
                    let r = check_tube_in(&ctx.tube(s, radii), u, m)?;
                    if !r.pass {
                        ok = false;
                        witness = r.witness;
                    }
                }
            }
        }
        entries.push(CertificateEntry {
            condition: "3.9".into(),
            simplices: Vec::new(),
            pass: ok,
            worst: if ok { 0.0 } else { -1.0 },
            witness,
        });
    }
    let pass = entries.iter().all(|e| e.pass);
    Ok(CivilizationCertificate {
        entries,
        samples: m,
        seed: ctx.seed,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusSearchOptions {
    /// Initial cap on η/δ, halved when condition 3.4 fails.
    pub initial_cap: f64,
    pub min_cap: f64,
    pub bisection_steps: usize,
}

impl Default for RadiusSearchOptions {
    fn default() -> Self {
        RadiusSearchOptions {
            initial_cap: 0.5,
            min_cap: 1.0 / 1048576.0,
            bisection_steps: 30,
        }
    }
}

/// Largest `δ_p` (bisection) and `η_p = cap·δ_p` such that conditions 3.4,
/// 3.6–3.8 and domain containment hold for all active `p`-simplices, with
/// radii strictly below the predecessors.
pub fn radius_search(
    ctx: &CivilContext,
    p: usize,
    predecessors: &[(f64, f64)],
    opts: &RadiusSearchOptions,
) -> Result<(f64, f64), CivilizeError> {
    if predecessors.len() != p || p >= ctx.n {
        return Err(CivilizeError::RadiiNotNested("expected radii for every lower dimension".into()));
    }
    let simplices: Vec<Vec<usize>> = ctx.active[p].iter().cloned().collect();
    if simplices.is_empty() {
        return Err(CivilizeError::NoAdmissibleRadii {
            dim: p,
            reason: "no active simplices".into(),
        });
    }
    let domain = ctx.field.domain();
    let depth = simplices
        .iter()
        .flat_map(|s| s.iter().map(|v| domain.depth(&ctx.positions[v])))
        .fold(f64::INFINITY, f64::min);
    let mut upper = depth;
    if let Some(&(d, _)) = predecessors.last() {
        upper = upper.min(0.99 * d);
    }
    let eta_upper = predecessors.last().map(|&(_, e)| 0.99 * e).unwrap_or(f64::INFINITY);
    let admissible = |delta: f64, cap: f64| -> Result<bool, CivilizeError> {
        let eta = (cap * delta).min(eta_upper);
        let mut radii = predecessors.to_vec();
        radii.push((delta, eta));
        for s in &simplices {
            let tube = ctx.tube(s, &radii);
            if !tube_in_domain(&tube, ctx.samples)? {
                return Ok(false);
            }
        }
        let cert = match certify_dims(ctx, &radii, p, p, false, false, true) {
            Ok(c) => c,
            Err(CivilizeError::Boundary { .. }) | Err(CivilizeError::Field(FieldError::OutOfDomain { .. })) => return Ok(false),
            Err(e) => return Err(e),
        };
        Ok(cert.pass)
    };
    let mut cap = opts.initial_cap;
    let mut last_reason = String::from("no cap admissible");
    while cap >= opts.min_cap {
        if admissible(MIN_RADIUS, cap)? {
            let (mut lo, mut hi) = (MIN_RADIUS, upper);
            if admissible(hi, cap)? {
                lo = hi;
            } else {
                for _ in 0..opts.bisection_steps {
                    let mid = (lo * hi).sqrt();
                    if admissible(mid, cap)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
            }
            return Ok((lo, (cap * lo).min(eta_upper)));
        }
        last_reason = format!("smallest radius fails with cap {cap}");
        cap *= 0.5;
    }
    Err(CivilizeError::NoAdmissibleRadii {
        dim: p,
        reason: last_reason,
    })
}

fn tube_in_domain(tube: &TubularNbhd, m: usize) -> Result<bool, CivilizeError> {
    let dom = tube.field().domain();
    for x in tube.simplex.barycentric_samples(m) {
        let fib = match tube.fiber(&x) {
            Ok(f) => f,
            Err(CivilizeError::Field(FieldError::OutOfDomain { .. })) => return Ok(false),
            Err(e) => return Err(e),
        };
        let bs = sphere_samples(fib.b.ncols(), fib.shape.delta(), m.max(1));
        let es = sphere_samples(fib.e.ncols(), fib.shape.eta(), m.max(1));
        let es = if es.is_empty() { vec![vec![]] } else { es };
        for b in &bs {
            for e in &es {
                if !dom.contains(&fib.point(b, e)) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Radial damping weight: 1 on the tube with radii `(δ, η)`, 0 outside
/// `(δ̄, η̄)`.
fn damping(c: &TubeCoords, inner: FiberShape, outer: FiberShape) -> f64 {
    let ub = (c.b_norm() - inner.delta()) / (outer.delta() - inner.delta());
    let wb = 1.0 - smoothstep(ub);
    let we = if outer.eta() > inner.eta() {
        1.0 - smoothstep((c.e_norm() - inner.eta()) / (outer.eta() - inner.eta()))
    } else {
        1.0
    };
    wb * we
}

/// Homotopy flattening `field` along the fibres of `N(σ)`: at `(z, t)` the
/// plane is the graph over `τ(x)` of `(1 − w(z)·t)·f_{zx}`, where `x` is the
/// fibre base of `z` in `N̄(σ)` and `w` the radial damping between the radii
/// `(δ, η)` and `(δ̄, η̄)`.
pub fn case1_flatten(
    field: &PlaneField,
    simplex: &AffineSimplex,
    delta: f64,
    eta: f64,
    delta_bar: f64,
    eta_bar: f64,
) -> Result<FieldHomotopy, CivilizeError> {
    let segment = simplex.dim() + 1 == simplex.n();
    if !(delta_bar > delta && delta > 0.0) || (!segment && !(eta_bar > eta && eta > 0.0)) {
        return Err(CivilizeError::RadiiNotNested("need δ̄ > δ > 0 and η̄ > η > 0".into()));
    }
    let outer_tube = TubularNbhd::for_simplex(simplex.clone(), field, delta_bar, eta_bar);
    let inner = if segment {
        FiberShape::Segment { delta }
    } else {
        FiberShape::Disk { delta, eta }
    };
    let outer = outer_tube.shape;
    // graph precondition on the enlarged fibres
    for (x, z) in outer_tube.sample_points(3)? {
        let g = graph_map_between(&field.frame(&x)?, &field.frame(&z)?);
        if !matches!(g, Some(ref g) if g.norm < 1.0 - crate::planefield::GRAPH_SLACK) {
            return Err(CivilizeError::Graph { z });
        }
    }
    let f = field.clone();
    let support = outer_tube.bounding_box();
    Ok(FieldHomotopy::new(field.domain().clone(), Some(support), move |z, t| {
        let original = f.frame(z)?;
        if t == 0.0 {
            return Ok(original);
        }
        let c = match outer_tube.locate(z) {
            Ok(Some(c)) if outer_tube.coords_inside(&c, 0.0) => c,
            _ => return Ok(original),
        };
        let w = damping(&c, inner, outer);
        if w == 0.0 {
            return Ok(original);
        }
        let base = f.frame(&c.base)?;
        let g = graph_map_between(&base, &original).ok_or_else(|| FieldError::NotAGraph {
            x: c.base.clone(),
            y: z.to_vec(),
            sigma_min: 0.0,
        })?;
        let s = 1.0 - w * t;
        if s == 0.0 {
            return Ok(base);
        }
        Ok(g.scaled_plane(s))
    }))
}

/// Largest graph norm `‖L_y(plane)‖` over the given planes and reference
/// points, used to track the graph condition along a homotopy.
pub fn max_graph_norm(refs: &[Mat], planes: &[Mat]) -> Option<f64> {
    let mut worst: f64 = 0.0;
    for r in refs {
        for p in planes {
            worst = worst.max(graph_map_between(r, p)?.norm);
        }
    }
    Some(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planefield::Catalog;

    fn horizontal() -> PlaneField {
        PlaneField::coordinate(BoxRegion::cube(4, -2.0, 3.0), 0, 1)
    }

    #[test]
    fn fiber_dimensions_follow_simplex_dimension() {
        let f = horizontal();
        let v = AffineSimplex::new(vec![vec![0.0; 4]]).unwrap();
        assert_eq!(normal_fiber(&v, &f, &[0.0; 4], 0.1, 0.05).unwrap().e.ncols(), 2);
        let edge = AffineSimplex::new(vec![vec![0.0; 4], vec![0.1, 0.2, 1.0, 0.3]]).unwrap();
        let fib = normal_fiber(&edge, &f, &edge.centroid(), 0.1, 0.05).unwrap();
        assert_eq!(fib.e.ncols(), 1);
        let tri = AffineSimplex::new(vec![vec![0.0; 4], vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(normal_fiber(&tri, &f, &tri.centroid(), 0.1, 0.05).unwrap().e.ncols(), 0);
        let flat = AffineSimplex::new(vec![vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            normal_fiber(&flat, &f, &[0.5, 0.0, 0.0, 0.0], 0.1, 0.05),
            Err(CivilizeError::GeneralPosition { .. })
        ));
    }

    #[test]
    fn locate_inverts_fiber_points() {
        let f = Catalog::LinearTilt { u: 0.4 }.field(BoxRegion::cube(4, -2.0, 3.0)).unwrap();
        let edge = AffineSimplex::new(vec![vec![0.1, 0.0, 0.0, 0.0], vec![0.2, 0.3, 1.0, 0.4]]).unwrap();
        let tube = TubularNbhd::for_simplex(edge.clone(), &f, 0.05, 0.02);
        let x = edge.point(&[0.3, 0.7]);
        let fib = tube.fiber(&x).unwrap();
        let p = fib.point(&[0.02, -0.01], &[0.015]);
        let c = tube.locate(&p).unwrap().unwrap();
        assert!(crate::linalg::dist(&c.base, &x) < 1e-12);
        assert!((c.b[0] - 0.02).abs() < 1e-12 && (c.e[0] - 0.015).abs() < 1e-12);
    }

    #[test]
    fn constant_field_is_constant_on_fibres() {
        let f = horizontal();
        let v = AffineSimplex::new(vec![vec![0.5; 4]]).unwrap();
        let tube = TubularNbhd::for_simplex(v, &f, 0.2, 0.1);
        let r = check_constancy(&f, &tube, 3, CONSTANCY_TOL).unwrap();
        assert!(r.pass);
        assert_eq!(r.worst, 0.0);
    }

    #[test]
    fn segment_fibre_lies_in_plane_and_off_the_simplex() {
        let f = horizontal();
        let tri = AffineSimplex::new(vec![
            vec![0.0; 4],
            vec![1.0, 0.2, 0.1, 0.0],
            vec![0.1, 0.0, 1.0, 0.2],
            vec![0.0, 0.3, 0.1, 1.0],
        ])
        .unwrap();
        let tube = TubularNbhd::for_simplex(tri.clone(), &f, 0.05, 0.0);
        let fib = tube.fiber(&tri.centroid()).unwrap();
        assert_eq!(fib.b.ncols(), 1);
        assert!(fib.b[(2, 0)].abs() < 1e-12 && fib.b[(3, 0)].abs() < 1e-12);
    }

    fn single_simplex_context() -> CivilContext {
        let f = PlaneField::coordinate(BoxRegion::cube(4, -3.0, 4.0), 0, 2);
        let verts = [
            [0.0, 0.0, 0.0, 0.0],
            [1.0, 0.13, 0.07, 0.02],
            [1.05, 1.0, 0.11, 0.03],
            [0.96, 1.07, 1.0, 0.09],
            [1.02, 0.95, 1.04, 1.0],
        ];
        let positions = verts.iter().enumerate().map(|(i, v)| (i, v.to_vec())).collect();
        CivilContext::from_tops(4, &f, positions, vec![vec![0, 1, 2, 3, 4]], None, None)
    }

    #[test]
    fn radius_search_nests_radii() {
        let ctx = single_simplex_context();
        let opts = RadiusSearchOptions { bisection_steps: 12, ..Default::default() };
        let r0 = radius_search(&ctx, 0, &[], &opts).unwrap();
        let r1 = radius_search(&ctx, 1, &[r0], &opts).unwrap();
        assert!(r1.0 < r0.0 && r1.1 < r0.1, "{r0:?} {r1:?}");
        let cert = certify(&ctx, &[r0, r1], 1, false).unwrap();
        assert!(cert.pass, "{:?}", cert.failures().next());
    }

    #[test]
    fn doubled_radii_break_compatibility() {
        let ctx = single_simplex_context();
        let opts = RadiusSearchOptions { bisection_steps: 12, ..Default::default() };
        let r0 = radius_search(&ctx, 0, &[], &opts).unwrap();
        let a = ctx.tube(&[0, 1], &[r0, (0.9 * r0.0, 0.9 * r0.1)]);
        let v = ctx.tube(&[0], &[r0]);
        assert!(check_compatibility(&a, &v, Some(&v), 3, 1).unwrap().pass);
        let big = a.with_shape(FiberShape::Disk { delta: 2.5 * r0.0, eta: 2.5 * r0.1 });
        let r = check_compatibility(&big, &v, Some(&v), 3, 1).unwrap();
        assert!(!r.pass && r.witness.is_some());
    }

    #[test]
    fn flatten_makes_field_fibre_constant() {
        let f = Catalog::LinearTilt { u: 0.4 }.field(BoxRegion::cube(4, -2.0, 3.0)).unwrap();
        let edge = AffineSimplex::new(vec![vec![0.1, 0.0, 0.0, 0.0], vec![0.2, 0.3, 1.0, 0.4]]).unwrap();
        let before = TubularNbhd::for_simplex(edge.clone(), &f, 0.05, 0.03);
        assert!(!check_constancy(&f, &before, 3, CONSTANCY_TOL).unwrap().pass);
        let h = case1_flatten(&f, &edge, 0.05, 0.03, 0.1, 0.06).unwrap();
        let after = h.at(1.0);
        let tube = TubularNbhd::for_simplex(edge, &after, 0.05, 0.03);
        let r = check_constancy(&after, &tube, 3, CONSTANCY_TOL).unwrap();
        assert!(r.pass, "{}", r.worst);
        let far = [2.5, 2.5, -1.5, 2.5];
        assert_eq!(h.frame(&far, 0.7).unwrap(), f.frame(&far).unwrap());
    }

    #[test]
    fn flatten_rejects_unnested_radii() {
        let f = horizontal();
        let v = AffineSimplex::new(vec![vec![0.0; 4]]).unwrap();
        assert!(matches!(
            case1_flatten(&f, &v, 0.1, 0.05, 0.1, 0.2),
            Err(CivilizeError::RadiiNotNested(_))
        ));
    }

    fn locally_constant_field() -> PlaneField {
        PlaneField::from_fn(BoxRegion::cube(4, -2.0, 2.0), |z| {
            let r = crate::linalg::norm(z);
            let a = 0.5 * smoothstep((r - 0.1) / 0.1);
            let c = 1.0 / (1.0 + a * a).sqrt();
            Mat::from_column_slice(4, 2, &[c, 0.0, a * c, 0.0, 0.0, 1.0, 0.0, 0.0])
        })
    }

    #[test]
    fn constancy_fails_outside_flat_core() {
        let f = locally_constant_field();
        let v = AffineSimplex::new(vec![vec![0.0; 4]]).unwrap();
        let small = TubularNbhd::for_simplex(v.clone(), &f, 0.06, 0.06);
        assert!(check_constancy(&f, &small, 3, CONSTANCY_TOL).unwrap().pass);
        let big = TubularNbhd::for_simplex(v, &f, 0.2, 0.2);
        let r = check_constancy(&f, &big, 3, CONSTANCY_TOL).unwrap();
        assert!(!r.pass);
        let w = r.witness.unwrap();
        assert!(crate::linalg::norm(&w) > 0.1);
    }

    #[test]
    fn constancy_margin_shrinks_with_radii() {
        let f = locally_constant_field();
        let v = AffineSimplex::new(vec![vec![0.0; 4]]).unwrap();
        let mut last = f64::INFINITY;
        for r in [0.3, 0.2, 0.15, 0.1, 0.05] {
            let tube = TubularNbhd::for_simplex(v.clone(), &f, r, r);
            let w = check_constancy(&f, &tube, 3, CONSTANCY_TOL).unwrap().worst;
            assert!(w <= last + 1e-15);
            last = w;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn fiber_constant_field_gives_constant_homotopy() {
        let f = horizontal();
        let edge = AffineSimplex::new(vec![vec![0.0; 4], vec![0.1, 0.2, 1.0, 0.3]]).unwrap();
        let h = case1_flatten(&f, &edge, 0.05, 0.03, 0.1, 0.06).unwrap();
        let z = edge.point(&[0.4, 0.6]);
        let z: Vec<f64> = z.iter().zip([0.01, -0.02, 0.0, 0.01]).map(|(a, b)| a + b).collect();
        for t in [0.0, 0.3, 1.0] {
            assert!(subspace_distance(&h.frame(&z, t).unwrap(), &f.frame(&z).unwrap()) < 1e-14);
        }
    }
}
