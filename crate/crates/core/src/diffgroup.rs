//! Words over compactly supported diffeomorphisms of ℝᵏ.
//!
//! Two primitive families: profile rotations `h_f(t)` on the annulus model of
//! `S¹ × D^{k−1}` and time-`τ` flows of compactly supported vector fields
//! (classical RK4, exact step inverses). Words evaluate right to left.

use std::f64::consts::{LN_2, TAU};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Env, Expr, ExprError, SmoothFn, Var};
use crate::linalg::{op_norm, Ball, BoxRegion, Mat};

pub const STEPS_PER_UNIT: usize = 256;
/// V₀ membership requires the estimated `‖de‖` below `V0_SAFETY · ε`.
pub const V0_SAFETY: f64 = 0.99;
pub(crate) const MAXK: usize = 8;
const FIXED_POINT_ITERS: usize = 12;
const NEWTON_ITERS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("flow left its safety box at {x:?}")]
    Divergence { x: Vec<f64> },
    #[error("profile does not vanish near the boundary: f({at:?}) = {value}")]
    Smoothness { at: Vec<f64>, value: f64 },
    #[error("vector field does not vanish on its support boundary at {at:?}")]
    Support { at: Vec<f64> },
    #[error("U ∩ h(U) ≠ ∅: h({witness:?}) lands in U")]
    Disjointness { witness: Vec<f64> },
    #[error("containment test failed for item {index} at {witness:?}")]
    Containment { index: usize, witness: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// A compactly supported vector field on ℝᵏ given by expressions in
/// `x1..xk`, vanishing outside `support`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    k: usize,
    components: Vec<SmoothFn>,
    support: BoxRegion,
}

impl VectorField {
    pub fn new(components: Vec<Expr>, support: BoxRegion) -> Result<Self, DiffError> {
        let k = components.len();
        if !(2..=MAXK).contains(&k) || support.dim() != k {
            return Err(DiffError::Dimension(format!("{k} components on a {}-box", support.dim())));
        }
        let vars: Vec<Var> = (1..=k as u8).map(Var::X).collect();
        let components: Vec<SmoothFn> = components.into_iter().map(|e| SmoothFn::new(e, &vars)).collect();
        let field = VectorField { k, components, support };
        // boundary faces of the support box
        for face in 0..2 * k {
            let (axis, hi) = (face / 2, face % 2 == 1);
            for mut p in field.support.grid(9) {
                p[axis] = if hi { field.support.hi[axis] } else { field.support.lo[axis] };
                let mut v = [0.0; MAXK];
                field.eval(&p, &mut v);
                if v[..k].iter().any(|c| c.abs() > 1e-12) {
                    return Err(DiffError::Support { at: p });
                }
            }
        }
        Ok(field)
    }

    pub fn parse(components: &[&str], support: BoxRegion) -> Result<Self, DiffError> {
        let exprs = components.iter().map(|c| Expr::parse(c)).collect::<Result<Vec<_>, _>>()?;
        Self::new(exprs, support)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn support(&self) -> &BoxRegion {
        &self.support
    }

    pub fn exprs(&self) -> Vec<Expr> {
        self.components.iter().map(|c| c.expr().clone()).collect()
    }

    #[inline]
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let env = Env::from_x(&x[..self.k]);
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(&env);
        }
    }

    fn jacobian_flat(&self, x: &[f64]) -> Flat {
        let k = self.k;
        let env = Env::from_x(&x[..k]);
        let mut out = [0.0; MAXK * MAXK];
        for i in 0..k {
            for j in 0..k {
                out[i * k + j] = self.components[i].partial(Var::X(j as u8 + 1), &env);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `h_f(turns)`: `(θ, y) ↦ (θ + turns·f(y), y)` on the annulus model,
    /// with θ in turns.
    Rotation { k: usize, profile: SmoothFn, turns: f64 },
    /// Time-`time` map of `field`, `steps` RK4 steps.
    Flow { field: VectorField, time: f64, steps: usize },
}

/// Support box of the annulus model of `S¹ × D^{k−1}` in ℝᵏ: the unit circle
/// in the `(x1, x2)`-plane with tube radius 1/2.
pub fn annulus_box(k: usize) -> BoxRegion {
    let mut lo = vec![-1.5, -1.5];
    let mut hi = vec![1.5, 1.5];
    lo.resize(k, -0.5);
    hi.resize(k, 0.5);
    BoxRegion::new(lo, hi)
}

/// Tube coordinates `y ∈ D^{k−1}` of a point of the annulus model
/// (`None` outside the open tube).
pub fn annulus_coords(x: &[f64]) -> Option<(f64, Vec<f64>)> {
    let rho = x[0].hypot(x[1]);
    let mut y = Vec::with_capacity(x.len() - 1);
    y.push(2.0 * (rho - 1.0));
    y.extend(x[2..].iter().map(|v| 2.0 * v));
    (y.iter().map(|v| v * v).sum::<f64>() < 1.0).then_some((rho, y))
}

impl Primitive {
    pub fn k(&self) -> usize {
        match self {
            Primitive::Rotation { k, .. } => *k,
            Primitive::Flow { field, .. } => field.k,
        }
    }

    pub fn support(&self) -> BoxRegion {
        match self {
            Primitive::Rotation { k, .. } => annulus_box(*k),
            Primitive::Flow { field, .. } => field.support.clone(),
        }
    }

    fn apply(&self, x: &mut [f64], inverse: bool) -> Result<(), DiffError> {
        match self {
            Primitive::Rotation { profile, turns, .. } => {
                let Some((_, y)) = annulus_coords(x) else { return Ok(()) };
                let f = profile.eval(&Env::from_x(&y));
                let angle = TAU * turns * f * if inverse { -1.0 } else { 1.0 };
                if angle == 0.0 {
                    return Ok(());
                }
                let (s, c) = angle.sin_cos();
                let (a, b) = (x[0], x[1]);
                x[0] = c * a - s * b;
                x[1] = s * a + c * b;
                Ok(())
            }
            Primitive::Flow { field, time, steps } => {
                if !field.support.contains(x) {
                    return Ok(());
                }
                let h = time / *steps as f64;
                let safety = field.support.expand(field.support.widths().iter().fold(0.0, |a: f64, b| a.max(*b)));
                for _ in 0..*steps {
                    if inverse {
                        rk4_inverse_step(field, x, h)?;
                    } else {
                        rk4_step(field, x, h);
                    }
                    if !safety.contains(x) || x.iter().any(|v| !v.is_finite()) {
                        return Err(DiffError::Divergence { x: x.to_vec() });
                    }
                }
                Ok(())
            }
        }
    }

    /// Applies the primitive and returns its Jacobian at the input point.
    fn apply_jac(&self, x: &mut [f64], inverse: bool) -> Result<Mat, DiffError> {
        let k = self.k();
        match self {
            Primitive::Rotation { profile, turns, .. } => {
                let Some((rho, y)) = annulus_coords(x) else { return Ok(Mat::identity(k, k)) };
                let env = Env::from_x(&y);
                let sign = if inverse { -1.0 } else { 1.0 };
                let angle = TAU * turns * profile.eval(&env) * sign;
                // dα/dx through y1 = 2(ρ − 1), y_j = 2 x_{j+1}
                let mut grad = vec![0.0; k];
                for j in 0..k - 1 {
                    let df = TAU * turns * sign * profile.partial(Var::X(j as u8 + 1), &env);
                    if j == 0 {
                        if rho > 0.0 {
                            grad[0] += df * 2.0 * x[0] / rho;
                            grad[1] += df * 2.0 * x[1] / rho;
                        }
                    } else {
                        grad[j + 1] += df * 2.0;
                    }
                }
                let (s, c) = angle.sin_cos();
                let (a, b) = (x[0], x[1]);
                let mut jac = Mat::identity(k, k);
                jac[(0, 0)] = c;
                jac[(0, 1)] = -s;
                jac[(1, 0)] = s;
                jac[(1, 1)] = c;
                // d/dα of the rotated point
                let (da, db) = (-s * a - c * b, c * a - s * b);
                for j in 0..k {
                    jac[(0, j)] += da * grad[j];
                    jac[(1, j)] += db * grad[j];
                }
                if angle != 0.0 {
                    x[0] = c * a - s * b;
                    x[1] = s * a + c * b;
                }
                Ok(jac)
            }
            Primitive::Flow { field, time, steps } => {
                if !field.support.contains(x) {
                    return Ok(Mat::identity(k, k));
                }
                let h = time / *steps as f64;
                // product of forward step Jacobians along the forward orbit
                let mut acc = identity_flat(k);
                for _ in 0..*steps {
                    if inverse {
                        rk4_inverse_step(field, x, h)?;
                        acc = mat_mul(k, &acc, &rk4_step_jacobian(field, x, h));
                    } else {
                        let j = rk4_step_jacobian(field, x, h);
                        rk4_step(field, x, h);
                        acc = mat_mul(k, &j, &acc);
                    }
                }
                let jac = Mat::from_fn(k, k, |i, j| acc[i * k + j]);
                if inverse {
                    jac.try_inverse().ok_or_else(|| DiffError::Divergence { x: x.to_vec() })
                } else {
                    Ok(jac)
                }
            }
        }
    }
}

fn rk4_step(field: &VectorField, x: &mut [f64], h: f64) {
    let k = field.k;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = ([0.0; MAXK], [0.0; MAXK], [0.0; MAXK], [0.0; MAXK], [0.0; MAXK]);
    field.eval(x, &mut k1[..k]);
    for i in 0..k {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    field.eval(&tmp[..k], &mut k2[..k]);
    for i in 0..k {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    field.eval(&tmp[..k], &mut k3[..k]);
    for i in 0..k {
        tmp[i] = x[i] + h * k3[i];
    }
    field.eval(&tmp[..k], &mut k4[..k]);
    for i in 0..k {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

type Flat = [f64; MAXK * MAXK];

fn identity_flat(k: usize) -> Flat {
    let mut m = [0.0; MAXK * MAXK];
    for i in 0..k {
        m[i * k + i] = 1.0;
    }
    m
}

fn mat_mul(k: usize, a: &Flat, b: &Flat) -> Flat {
    let mut out = [0.0; MAXK * MAXK];
    for i in 0..k {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail != 0.0 {
                for j in 0..k {
                    out[i * k + j] += ail * b[l * k + j];
                }
            }
        }
    }
    out
}

/// `Jf(x) (I + c Jprev)`.
fn stage_jacobian(field: &VectorField, x: &[f64], c: f64, prev: Option<&Flat>) -> Flat {
    let k = field.k;
    let jf = field.jacobian_flat(x);
    match prev {
        None => jf,
        Some(p) => {
            let mut m = identity_flat(k);
            for i in 0..k * k {
                m[i] += c * p[i];
            }
            mat_mul(k, &jf, &m)
        }
    }
}

fn rk4_step_jacobian(field: &VectorField, x: &[f64], h: f64) -> Flat {
    let k = field.k;
    let (mut k1, mut k2, mut k3, mut tmp) = ([0.0; MAXK], [0.0; MAXK], [0.0; MAXK], [0.0; MAXK]);
    field.eval(x, &mut k1[..k]);
    let j1 = stage_jacobian(field, x, 0.0, None);
    for i in 0..k {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    field.eval(&tmp[..k], &mut k2[..k]);
    let j2 = stage_jacobian(field, &tmp[..k], 0.5 * h, Some(&j1));
    for i in 0..k {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    field.eval(&tmp[..k], &mut k3[..k]);
    let j3 = stage_jacobian(field, &tmp[..k], 0.5 * h, Some(&j2));
    for i in 0..k {
        tmp[i] = x[i] + h * k3[i];
    }
    let j4 = stage_jacobian(field, &tmp[..k], h, Some(&j3));
    let mut out = identity_flat(k);
    for i in 0..k * k {
        out[i] += h / 6.0 * (j1[i] + 2.0 * j2[i] + 2.0 * j3[i] + j4[i]);
    }
    out
}

/// Solves `Φ_h(y) = x` for the RK4 step map: the fixed-point iteration
/// `y ← x − (Φ_h(y) − y)` from `Φ_{−h}(x)`, then Newton if that stalls.
fn rk4_inverse_step(field: &VectorField, x: &mut [f64], h: f64) -> Result<(), DiffError> {
    let k = field.k;
    let mut target = [0.0; MAXK];
    target[..k].copy_from_slice(&x[..k]);
    let tol = |i: usize| f64::EPSILON * (1.0 + target[i].abs());
    let residual = |y: &[f64; MAXK]| {
        let mut fy = *y;
        rk4_step(field, &mut fy[..k], h);
        let mut r = [0.0; MAXK];
        for i in 0..k {
            r[i] = fy[i] - target[i];
        }
        r
    };
    let converged = |r: &[f64; MAXK]| (0..k).all(|i| r[i].abs() <= tol(i));
    let size = |r: &[f64; MAXK]| r[..k].iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut y = target;
    rk4_step(field, &mut y[..k], -h);
    let mut r = residual(&y);
    let mut last = f64::INFINITY;
    for _ in 0..FIXED_POINT_ITERS {
        if converged(&r) {
            x[..k].copy_from_slice(&y[..k]);
            return Ok(());
        }
        let n = size(&r);
        if !(n < 0.5 * last) && last.is_finite() {
            break;
        }
        last = n;
        for i in 0..k {
            y[i] -= r[i];
        }
        r = residual(&y);
    }
    for _ in 0..NEWTON_ITERS {
        if converged(&r) {
            x[..k].copy_from_slice(&y[..k]);
            return Ok(());
        }
        let j = rk4_step_jacobian(field, &y[..k], h);
        let jac = Mat::from_fn(k, k, |a, b| j[a * k + b]);
        let rhs = Mat::from_fn(k, 1, |a, _| r[a]);
        let delta = jac.lu().solve(&rhs).ok_or_else(|| DiffError::Divergence { x: y[..k].to_vec() })?;
        for i in 0..k {
            y[i] -= delta[i];
        }
        if y[..k].iter().any(|v| !v.is_finite()) {
            break;
        }
        r = residual(&y);
    }
    // accept a final residual within a few ulps
    if (0..k).all(|i| r[i].abs() <= 16.0 * tol(i)) {
        x[..k].copy_from_slice(&y[..k]);
        return Ok(());
    }
    Err(DiffError::Divergence { x: target[..k].to_vec() })
}

/// One letter of a word: a primitive or a nested word (which keeps its own
/// support box), possibly inverted.
#[derive(Clone, Debug, PartialEq)]
pub enum Letter {
    Primitive { primitive: Arc<Primitive>, inverse: bool },
    Word { word: Arc<CompactDiffeo>, inverse: bool },
}

impl Letter {
    fn inverted(&self) -> Letter {
        match self {
            Letter::Primitive { primitive, inverse } => Letter::Primitive {
                primitive: primitive.clone(),
                inverse: !inverse,
            },
            Letter::Word { word, inverse } => Letter::Word {
                word: word.clone(),
                inverse: !inverse,
            },
        }
    }

    fn apply(&self, y: &mut [f64], flip: bool) -> Result<(), DiffError> {
        match self {
            Letter::Primitive { primitive, inverse } => primitive.apply(y, inverse ^ flip),
            Letter::Word { word, inverse } => word.apply(y, inverse ^ flip),
        }
    }

    fn apply_jac(&self, y: &mut [f64], flip: bool) -> Result<Mat, DiffError> {
        match self {
            Letter::Primitive { primitive, inverse } => primitive.apply_jac(y, inverse ^ flip),
            Letter::Word { word, inverse } => word.apply_jac(y, inverse ^ flip),
        }
    }

    fn primitive_count(&self) -> usize {
        match self {
            Letter::Primitive { .. } => 1,
            Letter::Word { word, .. } => word.len(),
        }
    }
}

/// A compactly supported diffeomorphism of ℝᵏ as a word in primitives.
/// `eval` is exactly the identity outside `support`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "DiffeoSpec", try_from = "DiffeoSpec")]
pub struct CompactDiffeo {
    k: usize,
    /// Applied right to left.
    letters: Vec<Letter>,
    support: Option<BoxRegion>,
}

impl CompactDiffeo {
    pub fn identity(k: usize) -> Self {
        CompactDiffeo {
            k,
            letters: Vec::new(),
            support: None,
        }
    }

    pub fn primitive(p: Primitive) -> Self {
        let support = Some(p.support());
        CompactDiffeo {
            k: p.k(),
            letters: vec![Letter::Primitive {
                primitive: Arc::new(p),
                inverse: false,
            }],
            support,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn letters(&self) -> &[Letter] {
        &self.letters
    }

    /// Number of primitive letters.
    pub fn len(&self) -> usize {
        self.letters.iter().map(Letter::primitive_count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    /// Declared support box (`None` for the empty word).
    pub fn support(&self) -> Option<&BoxRegion> {
        self.support.as_ref()
    }

    /// Replaces the declared support; callers must ensure the word is the
    /// identity outside `support`.
    pub fn with_support(mut self, support: BoxRegion) -> Self {
        self.support = Some(support);
        self
    }

    /// `self ∘ other`. Operands with a smaller support box are kept as nested
    /// words so evaluation can skip them.
    pub fn compose(&self, other: &CompactDiffeo) -> CompactDiffeo {
        let support = match (&self.support, &other.support) {
            (Some(a), Some(b)) => Some(a.union(b)),
            (a, b) => a.clone().or_else(|| b.clone()),
        };
        let mut letters = Vec::with_capacity(self.letters.len() + other.letters.len());
        for d in [self, other] {
            if d.letters.len() <= 1 || d.support == support {
                letters.extend(d.letters.iter().cloned());
            } else {
                letters.push(Letter::Word {
                    word: Arc::new(d.clone()),
                    inverse: false,
                });
            }
        }
        CompactDiffeo {
            k: self.k,
            letters,
            support,
        }
    }

    /// `d₁ ∘ d₂ ∘ … ∘ d_r`.
    pub fn compose_all<'a>(k: usize, ds: impl IntoIterator<Item = &'a CompactDiffeo>) -> CompactDiffeo {
        ds.into_iter().fold(CompactDiffeo::identity(k), |acc, d| acc.compose(d))
    }

    pub fn inverse(&self) -> CompactDiffeo {
        CompactDiffeo {
            k: self.k,
            letters: self.letters.iter().rev().map(Letter::inverted).collect(),
            support: self.support.clone(),
        }
    }

    pub fn pow(&self, m: i64) -> CompactDiffeo {
        let base = if m < 0 { self.inverse() } else { self.clone() };
        (0..m.unsigned_abs()).fold(CompactDiffeo::identity(self.k), |acc, _| acc.compose(&base))
    }

    /// `a ∘ b ∘ a⁻¹ ∘ b⁻¹`.
    pub fn commutator(a: &CompactDiffeo, b: &CompactDiffeo) -> CompactDiffeo {
        CompactDiffeo::compose_all(a.k, [a, b, &a.inverse(), &b.inverse()])
    }

    /// `g ∘ p ∘ g⁻¹` with support box estimated as the padded bounding box of
    /// `g` applied to the boundary of `p`'s support box.
    pub fn conjugate(g: &CompactDiffeo, p: &CompactDiffeo) -> Result<CompactDiffeo, DiffError> {
        let word = CompactDiffeo::compose_all(g.k, [g, p, &g.inverse()]);
        let Some(ps) = &p.support else {
            return Ok(CompactDiffeo::identity(g.k));
        };
        let image = image_box(g, ps)?;
        Ok(word.with_support(image))
    }

    fn apply(&self, y: &mut [f64], inverse: bool) -> Result<(), DiffError> {
        match &self.support {
            Some(s) if s.contains(y) => {}
            _ => return Ok(()),
        }
        if inverse {
            for l in &self.letters {
                l.apply(y, true)?;
            }
        } else {
            for l in self.letters.iter().rev() {
                l.apply(y, false)?;
            }
        }
        Ok(())
    }

    fn apply_jac(&self, y: &mut [f64], inverse: bool) -> Result<Mat, DiffError> {
        let mut jac = Mat::identity(self.k, self.k);
        match &self.support {
            Some(s) if s.contains(y) => {}
            _ => return Ok(jac),
        }
        if inverse {
            for l in &self.letters {
                jac = l.apply_jac(y, true)? * jac;
            }
        } else {
            for l in self.letters.iter().rev() {
                jac = l.apply_jac(y, false)? * jac;
            }
        }
        Ok(jac)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, DiffError> {
        if x.len() != self.k {
            return Err(DiffError::Dimension(format!("point of length {} for k = {}", x.len(), self.k)));
        }
        let mut y = x.to_vec();
        self.apply(&mut y, false)?;
        Ok(y)
    }

    /// Value and Jacobian by the chain rule of the primitive Jacobians (exact
    /// for the discrete RK4 maps).
    pub fn eval_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Mat), DiffError> {
        if x.len() != self.k {
            return Err(DiffError::Dimension(format!("point of length {} for k = {}", x.len(), self.k)));
        }
        let mut y = x.to_vec();
        let jac = self.apply_jac(&mut y, false)?;
        Ok((y, jac))
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<Mat, DiffError> {
        Ok(self.eval_jacobian(x)?.1)
    }

    /// Central-difference Jacobian.
    pub fn jacobian_fd(&self, x: &[f64], step: f64) -> Result<Mat, DiffError> {
        let mut jac = Mat::zeros(self.k, self.k);
        for j in 0..self.k {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += step;
            xm[j] -= step;
            let (fp, fm) = (self.eval(&xp)?, self.eval(&xm)?);
            for i in 0..self.k {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        Ok(jac)
    }

    /// Largest Euclidean distance between `self` and `other` over `points`.
    pub fn sup_distance(&self, other: &CompactDiffeo, points: &[Vec<f64>]) -> Result<f64, DiffError> {
        points
            .par_iter()
            .map(|p| Ok(crate::linalg::dist(&self.eval(p)?, &other.eval(p)?)))
            .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
    }
}

/// Padded bounding box of `g` applied to the boundary of `b`.
pub fn image_box(g: &CompactDiffeo, b: &BoxRegion) -> Result<BoxRegion, DiffError> {
    let k = b.dim();
    let m = if k <= 2 { 33 } else { 9 };
    let mut pts = Vec::new();
    for face in 0..2 * k {
        let (axis, hi) = (face / 2, face % 2 == 1);
        for mut p in b.grid(m) {
            p[axis] = if hi { b.hi[axis] } else { b.lo[axis] };
            pts.push(g.eval(&p)?);
        }
    }
    let bb = BoxRegion::bounding(&pts);
    let pad = 0.05 * bb.widths().iter().fold(0.0f64, |a, w| a.max(*w));
    Ok(bb.expand(pad))
}

/// The rotation `h_f(t)`. `profile` is an expression in `x1..x_{k−1}`, the
/// coordinates of `D^{k−1}`; it must vanish for `|y| ≥ 0.95`.
pub fn h_f(k: usize, profile: &Expr, t: f64) -> Result<CompactDiffeo, DiffError> {
    if !(2..=MAXK).contains(&k) {
        return Err(DiffError::Dimension(format!("k = {k}")));
    }
    let vars: Vec<Var> = (1..k as u8).map(Var::X).collect();
    let f = SmoothFn::new(profile.clone(), &vars);
    for y in shell_samples(k - 1) {
        let v = f.eval(&Env::from_x(&y));
        if v.abs() > 1e-12 {
            return Err(DiffError::Smoothness { at: y, value: v });
        }
    }
    Ok(CompactDiffeo::primitive(Primitive::Rotation { k, profile: f, turns: t }))
}

/// Sample points of the shell `0.95 ≤ |y| ≤ 1` in `D^d`.
fn shell_samples(d: usize) -> Vec<Vec<f64>> {
    let dirs: Vec<Vec<f64>> = match d {
        1 => vec![vec![1.0], vec![-1.0]],
        _ => BoxRegion::cube(d, -1.0, 1.0)
            .grid(7)
            .into_iter()
            .filter(|p| crate::linalg::norm(p) > 1e-9)
            .map(|p| {
                let n = crate::linalg::norm(&p);
                p.into_iter().map(|v| v / n).collect()
            })
            .collect(),
    };
    let mut out = Vec::new();
    for dir in dirs {
        for i in 0..=10 {
            let r = 0.95 + 0.05 * i as f64 / 10.0;
            out.push(dir.iter().map(|v| v * r).collect());
        }
    }
    out
}

/// Time-`time` flow of `field` with `STEPS_PER_UNIT` steps per unit time.
pub fn flow(field: &VectorField, time: f64) -> CompactDiffeo {
    flow_with_steps(field, time, STEPS_PER_UNIT)
}

pub fn flow_with_steps(field: &VectorField, time: f64, steps_per_unit: usize) -> CompactDiffeo {
    let steps = ((time.abs() * steps_per_unit as f64).ceil() as usize).max(1);
    CompactDiffeo::primitive(Primitive::Flow {
        field: field.clone(),
        time,
        steps,
    })
}

/// A one-parameter subgroup `s ↦ g_s`: rotations `h_f(s)` or flows `φ^X_s`.
#[derive(Clone, Debug, PartialEq)]
pub enum OneParameter {
    Rotation { k: usize, profile: SmoothFn },
    Flow { field: VectorField, steps_per_unit: usize },
}

impl OneParameter {
    /// Validates the profile as in [`h_f`].
    pub fn rotation(k: usize, profile: &Expr) -> Result<Self, DiffError> {
        let d = h_f(k, profile, 1.0)?;
        match d.letters[0].clone() {
            Letter::Primitive { primitive, .. } => match primitive.as_ref() {
                Primitive::Rotation { profile, .. } => Ok(OneParameter::Rotation {
                    k,
                    profile: profile.clone(),
                }),
                Primitive::Flow { .. } => unreachable!(),
            },
            Letter::Word { .. } => unreachable!(),
        }
    }

    pub fn flow(field: VectorField) -> Self {
        OneParameter::Flow {
            field,
            steps_per_unit: STEPS_PER_UNIT,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            OneParameter::Rotation { k, .. } => *k,
            OneParameter::Flow { field, .. } => field.k,
        }
    }

    pub fn support(&self) -> BoxRegion {
        match self {
            OneParameter::Rotation { k, .. } => annulus_box(*k),
            OneParameter::Flow { field, .. } => field.support.clone(),
        }
    }

    /// `g_s`; exactly the empty word at `s = 0`.
    pub fn at(&self, s: f64) -> CompactDiffeo {
        if s == 0.0 {
            return CompactDiffeo::identity(self.k());
        }
        match self {
            OneParameter::Rotation { k, profile } => CompactDiffeo::primitive(Primitive::Rotation {
                k: *k,
                profile: profile.clone(),
                turns: s,
            }),
            OneParameter::Flow { field, steps_per_unit } => flow_with_steps(field, s, *steps_per_unit),
        }
    }
}

/// `exp X`, the time-1 map.
pub fn exp(field: &VectorField) -> CompactDiffeo {
    flow(field, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffNorms {
    /// `sup |d(x) − x|` over the grid.
    pub sup_displacement: f64,
    /// `max ‖d(d)_x − I‖` over the coarse grid.
    pub jacobian_deviation: f64,
    /// The same over the refined grid.
    pub refined_deviation: f64,
    /// Half-diagonal of the region.
    pub support_radius: f64,
    pub resolution: usize,
    pub refined_resolution: usize,
}

impl DiffNorms {
    pub fn deviation(&self) -> f64 {
        self.jacobian_deviation.max(self.refined_deviation)
    }

    pub fn in_v(&self) -> bool {
        self.deviation() < 1.0
    }

    pub fn in_v0(&self, eps: f64) -> bool {
        self.deviation() < eps
    }

    /// V₀ membership with the safety factor applied to `ε`.
    pub fn certifies_v0(&self, eps: f64) -> bool {
        self.deviation() < V0_SAFETY * eps
    }
}

/// `‖de‖` over the declared support box (identity gives zeros).
pub fn norm_de(d: &CompactDiffeo, resolution: usize) -> Result<DiffNorms, DiffError> {
    match d.support() {
        Some(s) => norm_de_on(d, std::slice::from_ref(s), resolution),
        None => Ok(DiffNorms {
            sup_displacement: 0.0,
            jacobian_deviation: 0.0,
            refined_deviation: 0.0,
            support_radius: 0.0,
            resolution,
            refined_resolution: 2 * resolution - 1,
        }),
    }
}

/// `‖de‖` over grids on each region, refined once (`2m − 1` points per axis).
pub fn norm_de_on(d: &CompactDiffeo, regions: &[BoxRegion], resolution: usize) -> Result<DiffNorms, DiffError> {
    let m = resolution.max(2);
    let stats = |m: usize| -> Result<(f64, f64), DiffError> {
        let pts: Vec<Vec<f64>> = regions.iter().flat_map(|r| r.grid(m)).collect();
        pts.par_iter()
            .map(|p| {
                let (y, j) = d.eval_jacobian(p)?;
                let dev = op_norm(&(j - Mat::identity(d.k, d.k)));
                Ok((crate::linalg::dist(&y, p), dev))
            })
            .try_reduce(|| (0.0, 0.0), |a, b| Ok((a.0.max(b.0), a.1.max(b.1))))
    };
    let (disp, dev) = stats(m)?;
    let (disp2, dev2) = stats(2 * m - 1)?;
    let radius = regions
        .iter()
        .map(|r| 0.5 * crate::linalg::norm(&r.widths()))
        .fold(0.0, f64::max);
    Ok(DiffNorms {
        sup_displacement: disp.max(disp2),
        jacobian_deviation: dev,
        refined_deviation: dev2,
        support_radius: radius,
        resolution: m,
        refined_resolution: 2 * m - 1,
    })
}

/// `(1 + ε)^r − 1`, the bound on `‖d(comp) − I‖` for `r` factors in `V₀(ε)`.
pub fn composition_bound(eps: f64, r: u32) -> f64 {
    (r as f64 * eps.ln_1p()).exp_m1()
}

/// `ε` with `(1 + ε)^r = 2`.
pub fn v0_for(r: u32) -> f64 {
    (LN_2 / r as f64).exp_m1()
}

pub fn v0_for_72() -> f64 {
    v0_for(72)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Core {
    H,
    HInv,
}

/// `conjugator ∘ h^{±1} ∘ conjugator⁻¹`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugateFactor {
    pub conjugator: CompactDiffeo,
    pub core: Core,
}

/// A product of conjugates of `h^{±1}` claimed to equal `claimed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugateWord {
    pub h: CompactDiffeo,
    pub factors: Vec<ConjugateFactor>,
    pub claimed: CompactDiffeo,
}

impl ConjugateWord {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn factor(&self, i: usize) -> Result<CompactDiffeo, DiffError> {
        let f = &self.factors[i];
        let core = match f.core {
            Core::H => self.h.clone(),
            Core::HInv => self.h.inverse(),
        };
        if f.conjugator.is_empty() {
            return Ok(core);
        }
        CompactDiffeo::conjugate(&f.conjugator, &core)
    }

    /// The factors composed in order (first factor outermost).
    pub fn product(&self) -> Result<CompactDiffeo, DiffError> {
        let fs = (0..self.len()).map(|i| self.factor(i)).collect::<Result<Vec<_>, _>>()?;
        Ok(CompactDiffeo::compose_all(self.h.k, &fs))
    }

    /// Sup distance between the product and the claimed element on `points`.
    pub fn sup_error(&self, points: &[Vec<f64>]) -> Result<f64, DiffError> {
        self.product()?.sup_distance(&self.claimed, points)
    }

    fn conjugated_by(mut self, g: &CompactDiffeo) -> Self {
        for f in &mut self.factors {
            f.conjugator = g.compose(&f.conjugator);
        }
        self
    }
}

fn box_in_ball(b: &BoxRegion, ball: &Ball) -> bool {
    let far: Vec<f64> = (0..b.dim())
        .map(|i| (b.lo[i] - ball.center[i]).abs().max((b.hi[i] - ball.center[i]).abs()))
        .collect();
    crate::linalg::norm(&far) <= ball.radius
}

/// Sampled test of `U ∩ h(U) = ∅`.
pub fn check_disjoint(h: &CompactDiffeo, u: &Ball) -> Result<(), DiffError> {
    for p in u.samples(8).into_iter().chain(ball_boundary(u, 64)) {
        if u.contains(&h.eval(&p)?) {
            return Err(DiffError::Disjointness { witness: p });
        }
    }
    Ok(())
}

fn ball_boundary(b: &Ball, m: usize) -> Vec<Vec<f64>> {
    let k = b.center.len();
    let dirs: Vec<Vec<f64>> = if k == 2 {
        (0..m)
            .map(|j| {
                let a = TAU * j as f64 / m as f64;
                vec![a.cos(), a.sin()]
            })
            .collect()
    } else {
        BoxRegion::cube(k, -1.0, 1.0)
            .grid(5)
            .into_iter()
            .filter(|p| crate::linalg::norm(p) > 1e-9)
            .map(|p| {
                let n = crate::linalg::norm(&p);
                p.into_iter().map(|v| v / n).collect()
            })
            .collect()
    };
    dirs.into_iter()
        .map(|d| b.center.iter().zip(d).map(|(c, v)| c + b.radius * v).collect())
        .collect()
}

/// Sampled test of `g(inner) ⊂ outer`.
fn check_maps_into(g: &CompactDiffeo, inner: &Ball, outer: &Ball, index: usize) -> Result<(), DiffError> {
    for p in inner.samples(6).into_iter().chain(ball_boundary(inner, 64)) {
        if !outer.contains(&g.eval(&p)?) {
            return Err(DiffError::Containment { index, witness: p });
        }
    }
    Ok(())
}

fn four_conjugates_unchecked(a: &CompactDiffeo, b: &CompactDiffeo, h: &CompactDiffeo) -> Result<ConjugateWord, DiffError> {
    let k = h.k;
    let c = CompactDiffeo::conjugate(&h.inverse(), a)?;
    let factors = vec![
        ConjugateFactor {
            conjugator: CompactDiffeo::identity(k),
            core: Core::H,
        },
        ConjugateFactor {
            conjugator: c.clone(),
            core: Core::HInv,
        },
        ConjugateFactor {
            conjugator: b.compose(&c),
            core: Core::H,
        },
        ConjugateFactor {
            conjugator: b.clone(),
            core: Core::HInv,
        },
    ];
    Ok(ConjugateWord {
        h: h.clone(),
        factors,
        claimed: CompactDiffeo::commutator(a, b),
    })
}

/// `[a, b] = h · (c h⁻¹ c⁻¹) · (b c h c⁻¹ b⁻¹) · (b h⁻¹ b⁻¹)` with `c = h⁻¹ a h`,
/// for `a`, `b` supported in `U` and `U ∩ h(U) = ∅`.
pub fn four_conjugates(a: &CompactDiffeo, b: &CompactDiffeo, h: &CompactDiffeo, u: &Ball) -> Result<ConjugateWord, DiffError> {
    for (i, d) in [a, b].into_iter().enumerate() {
        if let Some(s) = d.support() {
            if !box_in_ball(s, u) {
                return Err(DiffError::Containment { index: i, witness: s.center() });
            }
        }
    }
    check_disjoint(h, u)?;
    four_conjugates_unchecked(a, b, h)
}

/// One commutator `[a_i, b_i]` with `a_i`, `b_i` supported in the ball `U_i`.
#[derive(Clone, Debug)]
pub struct CommutatorPair {
    pub a: CompactDiffeo,
    pub b: CompactDiffeo,
    pub ball: Ball,
}

/// `∏ [a_i, b_i]` as `4r` conjugates of `h^{±1}`, using movers `g_i` with
/// `g_i(U_i) ⊂ U`.
pub fn four_r_conjugates(
    pairs: &[CommutatorPair],
    h: &CompactDiffeo,
    u: &Ball,
    movers: &[CompactDiffeo],
) -> Result<ConjugateWord, DiffError> {
    if pairs.len() != movers.len() {
        return Err(DiffError::Dimension(format!("{} pairs, {} movers", pairs.len(), movers.len())));
    }
    check_disjoint(h, u)?;
    let k = h.k;
    let mut factors = Vec::with_capacity(4 * pairs.len());
    let mut claimed = CompactDiffeo::identity(k);
    for (i, (pair, g)) in pairs.iter().zip(movers).enumerate() {
        for d in [&pair.a, &pair.b] {
            if let Some(s) = d.support() {
                if !box_in_ball(s, &pair.ball) {
                    return Err(DiffError::Containment { index: i, witness: s.center() });
                }
            }
        }
        check_maps_into(g, &pair.ball, u, i)?;
        let a = CompactDiffeo::conjugate(g, &pair.a)?;
        let b = CompactDiffeo::conjugate(g, &pair.b)?;
        let word = four_conjugates_unchecked(&a, &b, h)?.conjugated_by(&g.inverse());
        factors.extend(word.factors);
        claimed = claimed.compose(&CompactDiffeo::commutator(&pair.a, &pair.b));
    }
    Ok(ConjugateWord {
        h: h.clone(),
        factors,
        claimed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwelveKind {
    H,
    HInv,
    /// `h⁻¹ g σa g⁻¹ h`
    C,
    CInv,
    /// `g exp(X) g⁻¹`
    E,
    EInv,
}

/// The twelve-factor rewriting of `g [σa, exp X] g⁻¹`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwelveFactorWord {
    pub factors: Vec<(TwelveKind, CompactDiffeo)>,
    pub claimed: CompactDiffeo,
}

pub const TWELVE_PATTERN: [TwelveKind; 12] = {
    use TwelveKind::*;
    [H, C, HInv, CInv, E, C, H, CInv, EInv, E, HInv, EInv]
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorMembership {
    pub index: usize,
    pub kind: TwelveKind,
    pub norms: DiffNorms,
    pub in_v0: bool,
}

impl TwelveFactorWord {
    pub fn product(&self) -> CompactDiffeo {
        let k = self.claimed.k;
        CompactDiffeo::compose_all(k, self.factors.iter().map(|(_, d)| d))
    }

    pub fn sup_error(&self, points: &[Vec<f64>]) -> Result<f64, DiffError> {
        self.product().sup_distance(&self.claimed, points)
    }

    /// `‖de‖ < 0.99 ε` for each factor over its declared support.
    pub fn v0_report(&self, eps: f64, resolution: usize) -> Result<Vec<FactorMembership>, DiffError> {
        let mut cache: Vec<(TwelveKind, DiffNorms)> = Vec::new();
        let mut out = Vec::with_capacity(self.factors.len());
        for (index, (kind, d)) in self.factors.iter().enumerate() {
            let norms = match cache.iter().find(|(k, _)| k == kind) {
                Some((_, n)) => n.clone(),
                None => {
                    let n = norm_de(d, resolution)?;
                    cache.push((*kind, n.clone()));
                    n
                }
            };
            out.push(FactorMembership {
                index,
                kind: *kind,
                in_v0: norms.certifies_v0(eps),
                norms,
            });
        }
        Ok(out)
    }

    /// Factor support boxes, overlapping ones merged.
    pub fn regions(&self) -> Vec<BoxRegion> {
        merge_regions(self.factors.iter().filter_map(|(_, d)| d.support().cloned()))
    }
}

/// Replaces intersecting boxes of comparable size by their bounding box, so
/// that small boxes inside large ones keep their own grids.
pub fn merge_regions(boxes: impl IntoIterator<Item = BoxRegion>) -> Vec<BoxRegion> {
    let span = |b: &BoxRegion| b.widths().iter().fold(0.0f64, |a, w| a.max(*w));
    let mut out: Vec<BoxRegion> = Vec::new();
    for b in boxes {
        let mut cur = b;
        while let Some(i) = out
            .iter()
            .position(|o| o.intersects(&cur) && span(&o.union(&cur)) <= 2.0 * span(o).min(span(&cur)))
        {
            cur = cur.union(&out.swap_remove(i));
        }
        out.push(cur);
    }
    out
}

/// Builds the twelve-factor word for `g [σa, exp X] g⁻¹` after checking
/// `supp σa ⊂ A`, `g(Ā) ⊂ U` and `U ∩ h(U) = ∅` on samples.
pub fn twelve_factor_expansion(
    sigma_a: &CompactDiffeo,
    x: &VectorField,
    g: &CompactDiffeo,
    h: &CompactDiffeo,
    a_ball: &Ball,
    u: &Ball,
) -> Result<TwelveFactorWord, DiffError> {
    if let Some(s) = sigma_a.support() {
        if !box_in_ball(s, a_ball) {
            return Err(DiffError::Containment { index: 0, witness: s.center() });
        }
    }
    if !box_in_ball(x.support(), a_ball) {
        return Err(DiffError::Containment { index: 1, witness: x.support().center() });
    }
    check_maps_into(g, a_ball, u, 2)?;
    check_disjoint(h, u)?;
    let k = h.k;
    let hinv = h.inverse();
    let gsg = CompactDiffeo::conjugate(g, sigma_a)?;
    let c = CompactDiffeo::conjugate(&hinv, &gsg)?;
    let cinv = c.inverse();
    let e = CompactDiffeo::conjugate(g, &exp(x))?;
    let einv = e.inverse();
    let factors = TWELVE_PATTERN
        .iter()
        .map(|kind| {
            let d = match kind {
                TwelveKind::H => h.clone(),
                TwelveKind::HInv => hinv.clone(),
                TwelveKind::C => c.clone(),
                TwelveKind::CInv => cinv.clone(),
                TwelveKind::E => e.clone(),
                TwelveKind::EInv => einv.clone(),
            };
            (*kind, d)
        })
        .collect();
    let comm = CompactDiffeo::commutator(sigma_a, &exp(x));
    let claimed = CompactDiffeo::compose_all(k, [g, &comm, &g.inverse()]);
    Ok(TwelveFactorWord { factors, claimed })
}

/// JSON form of a word: primitive specs and nested words with exponents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffeoSpec {
    pub k: usize,
    pub word: Vec<LetterSpec>,
    #[serde(default)]
    pub support: Option<BoxRegion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LetterSpec {
    Word {
        word: Box<DiffeoSpec>,
        exponent: i8,
    },
    Primitive {
        #[serde(flatten)]
        primitive: PrimitiveSpec,
        exponent: i8,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveSpec {
    Rotation { profile: Expr, turns: f64 },
    Flow {
        field: Vec<Expr>,
        support: BoxRegion,
        time: f64,
        steps: usize,
    },
}

fn exponent(inverse: bool) -> i8 {
    if inverse {
        -1
    } else {
        1
    }
}

impl From<CompactDiffeo> for DiffeoSpec {
    fn from(d: CompactDiffeo) -> Self {
        DiffeoSpec {
            k: d.k,
            word: d
                .letters
                .iter()
                .map(|l| match l {
                    Letter::Primitive { primitive, inverse } => LetterSpec::Primitive {
                        primitive: match primitive.as_ref() {
                            Primitive::Rotation { profile, turns, .. } => PrimitiveSpec::Rotation {
                                profile: profile.expr().clone(),
                                turns: *turns,
                            },
                            Primitive::Flow { field, time, steps } => PrimitiveSpec::Flow {
                                field: field.exprs(),
                                support: field.support.clone(),
                                time: *time,
                                steps: *steps,
                            },
                        },
                        exponent: exponent(*inverse),
                    },
                    Letter::Word { word, inverse } => LetterSpec::Word {
                        word: Box::new(DiffeoSpec::from(word.as_ref().clone())),
                        exponent: exponent(*inverse),
                    },
                })
                .collect(),
            support: d.support,
        }
    }
}

impl TryFrom<DiffeoSpec> for CompactDiffeo {
    type Error = DiffError;

    fn try_from(spec: DiffeoSpec) -> Result<Self, DiffError> {
        let mut letters = Vec::with_capacity(spec.word.len());
        let mut support: Option<BoxRegion> = None;
        for l in spec.word {
            let (sub, e) = match l {
                LetterSpec::Primitive { primitive, exponent } => {
                    let d = match primitive {
                        PrimitiveSpec::Rotation { profile, turns } => h_f(spec.k, &profile, turns)?,
                        PrimitiveSpec::Flow { field, support, time, steps } => {
                            let f = VectorField::new(field, support)?;
                            CompactDiffeo::primitive(Primitive::Flow { field: f, time, steps: steps.max(1) })
                        }
                    };
                    (d, exponent)
                }
                LetterSpec::Word { word, exponent } => (CompactDiffeo::try_from(*word)?, exponent),
            };
            if sub.k != spec.k {
                return Err(DiffError::Dimension("letter dimension differs from word".into()));
            }
            if !matches!(e, 1 | -1) {
                return Err(DiffError::Dimension(format!("exponent {e}")));
            }
            if let Some(s) = &sub.support {
                support = Some(support.map_or(s.clone(), |u| u.union(s)));
            }
            let letter = match sub.letters.as_slice() {
                [single @ Letter::Primitive { .. }] => single.clone(),
                _ => Letter::Word {
                    word: Arc::new(sub),
                    inverse: false,
                },
            };
            letters.push(if e == -1 { letter.inverted() } else { letter });
        }
        Ok(CompactDiffeo {
            k: spec.k,
            letters,
            support: spec.support.or(support),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(amp: f64) -> Expr {
        Expr::parse(&format!("{amp}*bump(x1/0.9)")).unwrap()
    }

    fn swirl(cx: f64, cy: f64, s: f64, amp: f64) -> VectorField {
        let b = format!("bump(((x1-{cx})^2+(x2-{cy})^2)/{})", s * s);
        VectorField::parse(
            &[&format!("{amp}*(-(x2-{cy}))*{b}"), &format!("{amp}*(x1-{cx})*{b}")],
            BoxRegion::centered(&[cx, cy], s),
        )
        .unwrap()
    }

    fn grid(b: &BoxRegion, m: usize) -> Vec<Vec<f64>> {
        b.grid(m)
    }

    #[test]
    fn empty_word_and_zero_profile_are_identity() {
        let id = CompactDiffeo::identity(2);
        assert_eq!(id.eval(&[0.3, -0.2]).unwrap(), vec![0.3, -0.2]);
        let h0 = h_f(2, &Expr::constant(0.0), 1.0).unwrap();
        for p in grid(&annulus_box(2), 11) {
            assert_eq!(h0.eval(&p).unwrap(), p);
        }
    }

    #[test]
    fn profile_must_vanish_near_boundary() {
        assert!(matches!(
            h_f(2, &Expr::parse("0.1*bump(x1/1.2)").unwrap(), 1.0),
            Err(DiffError::Smoothness { .. })
        ));
    }

    #[test]
    fn rotation_angles_add() {
        let f = profile(0.3);
        let (t1, t2) = (0.37, -0.81);
        let lhs = h_f(2, &f, t1).unwrap().compose(&h_f(2, &f, t2).unwrap());
        let rhs = h_f(2, &f, t1 + t2).unwrap();
        let err = lhs.sup_distance(&rhs, &grid(&annulus_box(2), 40)).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rotation_inverse_is_negated_profile() {
        let h = h_f(3, &Expr::parse("0.2*bump((x1^2+x2^2)/0.8)").unwrap(), 0.7).unwrap();
        let hm = h_f(3, &Expr::parse("-0.2*bump((x1^2+x2^2)/0.8)").unwrap(), 0.7).unwrap();
        let err = h.inverse().sup_distance(&hm, &grid(&annulus_box(3), 12)).unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn rotation_jacobian_matches_differences() {
        let h = h_f(2, &profile(0.4), 0.9).unwrap();
        for p in [[1.1, 0.2], [-0.3, 0.85], [0.2, -1.3]] {
            let a = h.jacobian(&p).unwrap();
            let n = h.jacobian_fd(&p, 1e-6).unwrap();
            assert!((a - n).norm() < 1e-7);
        }
    }

    #[test]
    fn flow_inverse_is_exact() {
        let x = swirl(0.1, -0.2, 0.8, 3.0);
        let d = flow(&x, 1.3);
        let id = d.compose(&d.inverse());
        let err = id.sup_distance(&CompactDiffeo::identity(2), &grid(&x.support().clone(), 60)).unwrap();
        assert!(err < 1e-13, "{err}");
    }

    #[test]
    fn flow_jacobian_matches_differences() {
        let x = swirl(0.0, 0.0, 1.0, 2.0);
        let d = flow(&x, 0.7).compose(&flow(&x, 0.4).inverse());
        for p in [[0.3, 0.1], [-0.2, 0.5]] {
            let a = d.jacobian(&p).unwrap();
            let n = d.jacobian_fd(&p, 1e-6).unwrap();
            let e = (a - n).norm();
            assert!(e < 1e-7, "{e}");
        }
    }

    #[test]
    fn identity_outside_support_is_exact() {
        let x = swirl(0.0, 0.0, 0.5, 4.0);
        let d = flow(&x, 1.0).compose(&h_f(2, &profile(0.2), 1.0).unwrap());
        for p in [[2.0, 0.0], [0.0, -1.6], [3.0, 3.0]] {
            assert_eq!(d.eval(&p).unwrap(), p.to_vec());
        }
    }

    #[test]
    fn localized_shear_norm_is_its_slope() {
        let u = 0.37;
        let plateau = "smoothstep((x1+2)/0.5)*smoothstep((2-x1)/0.5)*smoothstep((x2+2)/0.5)*smoothstep((2-x2)/0.5)";
        let x = VectorField::parse(&[&format!("{u}*x2*{plateau}"), "0"], BoxRegion::cube(2, -2.0, 2.0)).unwrap();
        let d = exp(&x);
        let n = norm_de_on(&d, &[BoxRegion::cube(2, -1.0, 1.0)], 9).unwrap();
        assert!((n.deviation() - u).abs() < 1e-12, "{}", n.deviation());
        assert!((d.eval(&[0.2, 0.5]).unwrap()[0] - (0.2 + u * 0.5)).abs() < 1e-14);
    }

    #[test]
    fn v0_threshold_solves_growth_equation() {
        let eps = v0_for_72();
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (1.0 + mid).powi(72) < 2.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((eps - lo).abs() < 1e-12);
        assert!((eps - 0.009673).abs() < 1e-6);
        assert!((composition_bound(eps, 72) - 1.0).abs() < 1e-12);
        assert_eq!(composition_bound(eps, 1), eps);
    }

    #[test]
    fn word_serialization_round_trips() {
        let d = flow(&swirl(0.1, 0.0, 0.5, 1.0), 0.5)
            .compose(&h_f(2, &profile(0.1), 0.3).unwrap().inverse());
        let json = serde_json::to_string(&d).unwrap();
        let back: CompactDiffeo = serde_json::from_str(&json).unwrap();
        let p = [0.95, 0.1];
        assert_eq!(d.eval(&p).unwrap(), back.eval(&p).unwrap());
    }

    #[test]
    fn commutator_with_trivial_a_is_identity() {
        let h = flow(
            &VectorField::parse(
                &["smoothstep((x1+3)/0.5)*smoothstep((3-x1)/0.5)*smoothstep((x2+3)/0.5)*smoothstep((3-x2)/0.5)", "0"],
                BoxRegion::cube(2, -3.5, 3.5),
            )
            .unwrap(),
            1.0,
        );
        let b = flow(&swirl(0.0, 0.0, 0.2, 2.0), 1.0);
        let u = Ball::new(vec![0.0, 0.0], 0.3);
        let w = four_conjugates(&CompactDiffeo::identity(2), &b, &h, &u).unwrap();
        assert_eq!(w.len(), 4);
        let pts = grid(&BoxRegion::cube(2, -1.0, 2.0), 30);
        assert!(w.product().unwrap().sup_distance(&CompactDiffeo::identity(2), &pts).unwrap() < 1e-12);
    }
}
