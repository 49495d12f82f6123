//! Smooth 2-plane fields on boxes in ℝⁿ, their annihilating coframes, the
//! Frobenius residual, graph maps between planes and graph-line homotopies.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Env, Expr, SmoothFn, Var};
use crate::geometry::AffineSimplex;
use crate::linalg::{
    complement, nullspace, op_norm, polar_orthonormalize, sigma_min, subspace_distance, BoxRegion,
    Mat,
};

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Graph maps with norm at or above `1 - GRAPH_SLACK` count as violations.
pub const GRAPH_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("point {x:?} lies outside the field domain")]
    OutOfDomain { x: Vec<f64> },
    #[error("finite-difference stencil of step {h} at {x:?} leaves the domain")]
    Boundary { x: Vec<f64>, h: f64 },
    #[error("coframe rows are dependent at {x:?}")]
    Degenerate { x: Vec<f64> },
    #[error("plane at {y:?} is not a graph over the plane at {x:?} (sigma_min = {sigma_min:e})")]
    NotAGraph {
        x: Vec<f64>,
        y: Vec<f64>,
        sigma_min: f64,
    },
    #[error("graph condition violated between {x:?} and {y:?}: norm {norm}")]
    GraphCondition { x: Vec<f64>, y: Vec<f64>, norm: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    Expr(#[from] crate::expr::ExprError),
}

type FrameFn = Arc<dyn Fn(&[f64]) -> Mat + Send + Sync>;
type CoframeFn = Arc<dyn Fn(&[f64]) -> Mat + Send + Sync>;

#[derive(Clone)]
enum CoframeKind {
    /// `rows[i][j]` is the coefficient of `dx_{j+1}` in ω_i.
    Exprs(Vec<Vec<SmoothFn>>),
    /// Returns the `k × n` coefficient matrix.
    Numeric(CoframeFn),
}

/// `k = n - 2` one-forms annihilating a plane field.
#[derive(Clone)]
pub struct NormalCoframe {
    n: usize,
    domain: BoxRegion,
    h: f64,
    kind: CoframeKind,
}

impl fmt::Debug for NormalCoframe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            CoframeKind::Exprs(rows) => rows
                .iter()
                .map(|r| r.iter().map(|e| e.expr().to_string()).collect::<Vec<_>>().join(", "))
                .collect::<Vec<_>>()
                .join(" | "),
            CoframeKind::Numeric(_) => "<numeric>".into(),
        };
        write!(f, "NormalCoframe(n={}, [{kind}])", self.n)
    }
}

impl NormalCoframe {
    /// Coframe from `k` rows of `n` expressions in `x1..xn`.
    pub fn from_exprs(domain: BoxRegion, rows: Vec<Vec<Expr>>) -> Result<Self, FieldError> {
        let n = domain.dim();
        if n < 4 || n > crate::expr::MAX_X as usize {
            return Err(FieldError::Dimension(format!("ambient dimension {n} unsupported")));
        }
        if rows.len() != n - 2 || rows.iter().any(|r| r.len() != n) {
            return Err(FieldError::Dimension(format!(
                "expected {} rows of {n} coefficients",
                n - 2
            )));
        }
        let vars: Vec<Var> = (1..=n as u8).map(Var::X).collect();
        let rows = rows
            .into_iter()
            .map(|r| r.into_iter().map(|e| SmoothFn::new(e, &vars)).collect())
            .collect();
        Ok(NormalCoframe {
            n,
            domain,
            h: DEFAULT_FD_STEP,
            kind: CoframeKind::Exprs(rows),
        })
    }

    /// Parses rows of expression strings.
    pub fn parse(domain: BoxRegion, rows: &[Vec<String>]) -> Result<Self, FieldError> {
        let parsed = rows
            .iter()
            .map(|r| r.iter().map(|t| Expr::parse(t)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_exprs(domain, parsed)
    }

    pub fn from_fn(
        domain: BoxRegion,
        f: impl Fn(&[f64]) -> Mat + Send + Sync + 'static,
    ) -> Self {
        NormalCoframe {
            n: domain.dim(),
            domain,
            h: DEFAULT_FD_STEP,
            kind: CoframeKind::Numeric(Arc::new(f)),
        }
    }

    pub fn with_step(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.n - 2
    }

    pub fn domain(&self) -> &BoxRegion {
        &self.domain
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        matches!(self.kind, CoframeKind::Exprs(_))
    }

    fn raw(&self, x: &[f64]) -> Mat {
        match &self.kind {
            CoframeKind::Exprs(rows) => {
                let env = Env::from_x(x);
                Mat::from_fn(rows.len(), self.n, |i, j| rows[i][j].eval(&env))
            }
            CoframeKind::Numeric(f) => f(x),
        }
    }

    /// The `k × n` coefficient matrix at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<Mat, FieldError> {
        if !self.domain.contains(x) {
            return Err(FieldError::OutOfDomain { x: x.to_vec() });
        }
        Ok(self.raw(x))
    }

    /// `∂_j` of the coefficient matrix, one matrix per coordinate.
    fn derivatives(&self, x: &[f64], mode: Derivatives) -> Result<Vec<Mat>, FieldError> {
        match (&self.kind, mode) {
            (CoframeKind::Exprs(rows), Derivatives::Auto) => {
                let env = Env::from_x(x);
                Ok((0..self.n)
                    .map(|d| {
                        Mat::from_fn(rows.len(), self.n, |i, j| {
                            rows[i][j].partial(Var::X(d as u8 + 1), &env)
                        })
                    })
                    .collect())
            }
            (_, mode) => {
                let h = match mode {
                    Derivatives::FiniteDifference(h) => h,
                    Derivatives::Auto => self.h,
                };
                (0..self.n)
                    .map(|d| {
                        let mut p = x.to_vec();
                        let mut m = x.to_vec();
                        p[d] += h;
                        m[d] -= h;
                        if !self.domain.contains(&p) || !self.domain.contains(&m) {
                            return Err(FieldError::Boundary { x: x.to_vec(), h });
                        }
                        Ok((self.raw(&p) - self.raw(&m)) / (2.0 * h))
                    })
                    .collect()
            }
        }
    }

    /// Converts to the plane field `ker ω`.
    pub fn to_field(&self) -> PlaneField {
        coframe_to_frame(self)
    }
}

/// How derivatives of coframe coefficients are obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Derivatives {
    /// Symbolic when the coframe comes from expressions, else central
    /// differences with the coframe's own step.
    Auto,
    /// Central differences with the given step.
    FiniteDifference(f64),
}

#[derive(Clone)]
enum FrameKind {
    /// Frame and normal basis.
    Constant(Mat, Mat),
    Kernel(NormalCoframe),
    Numeric(FrameFn),
}

/// A smooth field of 2-planes on a box in ℝⁿ.
#[derive(Clone)]
pub struct PlaneField {
    n: usize,
    domain: BoxRegion,
    h: f64,
    kind: FrameKind,
    /// Fixed reference frame used to select continuous orthonormal bases.
    reference: Mat,
}

impl fmt::Debug for PlaneField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            FrameKind::Constant(m, _) => write!(f, "PlaneField::Constant({m:?})"),
            FrameKind::Kernel(c) => write!(f, "PlaneField::Kernel({c:?})"),
            FrameKind::Numeric(_) => write!(f, "PlaneField::Numeric(n={})", self.n),
        }
    }
}

/// Orthonormal frame of the span of `m` closest to `reference`.
fn aligned_frame(span: &Mat, reference: &Mat) -> Mat {
    let onb = crate::linalg::orth(span, 1e-10);
    let p = &onb * onb.transpose();
    polar_orthonormalize(&(p * reference)).unwrap_or(onb)
}

impl PlaneField {
    /// The constant field spanned by the columns of `frame` (n×2).
    pub fn constant(domain: BoxRegion, frame: Mat) -> Self {
        let q = polar_orthonormalize(&frame).expect("constant frame must have rank 2");
        PlaneField {
            n: domain.dim(),
            domain,
            h: DEFAULT_FD_STEP,
            reference: q.clone(),
            kind: FrameKind::Constant(q.clone(), complement(&q)),
        }
    }

    /// `span(e_i, e_j)` (0-based indices).
    pub fn coordinate(domain: BoxRegion, i: usize, j: usize) -> Self {
        let n = domain.dim();
        let mut m = Mat::zeros(n, 2);
        m[(i, 0)] = 1.0;
        m[(j, 1)] = 1.0;
        Self::constant(domain, m)
    }

    /// Field given by an evaluator returning any spanning `n × 2` matrix.
    pub fn from_fn(domain: BoxRegion, f: impl Fn(&[f64]) -> Mat + Send + Sync + 'static) -> Self {
        let f: FrameFn = Arc::new(f);
        let c = domain.center();
        let reference = crate::linalg::orth(&f(&c), 1e-10);
        PlaneField {
            n: domain.dim(),
            domain,
            h: DEFAULT_FD_STEP,
            kind: FrameKind::Numeric(f),
            reference,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn domain(&self) -> &BoxRegion {
        &self.domain
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn with_domain(mut self, domain: BoxRegion) -> Self {
        if let FrameKind::Kernel(c) = &mut self.kind {
            c.domain = domain.clone();
        }
        self.domain = domain;
        self
    }

    /// The coframe this field was defined by, if any.
    pub fn defining_coframe(&self) -> Option<&NormalCoframe> {
        match &self.kind {
            FrameKind::Kernel(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, FrameKind::Constant(..))
    }

    /// Orthonormal frame (n×2) of τ(x).
    pub fn frame(&self, x: &[f64]) -> Result<Mat, FieldError> {
        if !self.domain.contains(x) {
            return Err(FieldError::OutOfDomain { x: x.to_vec() });
        }
        match &self.kind {
            FrameKind::Constant(m, _) => Ok(m.clone()),
            FrameKind::Numeric(f) => Ok(aligned_frame(&f(x), &self.reference)),
            FrameKind::Kernel(c) => {
                let a = c.raw(x);
                if sigma_min(&a.transpose()) < 1e-12 {
                    return Err(FieldError::Degenerate { x: x.to_vec() });
                }
                let ker = nullspace(&a);
                let p = &ker * ker.transpose();
                Ok(polar_orthonormalize(&(p * &self.reference)).unwrap_or(ker))
            }
        }
    }

    /// Orthonormal basis (n×(n−2)) of τ(x)^⊥.
    pub fn normal(&self, x: &[f64]) -> Result<Mat, FieldError> {
        if !self.domain.contains(x) {
            return Err(FieldError::OutOfDomain { x: x.to_vec() });
        }
        match &self.kind {
            FrameKind::Constant(_, c) => Ok(c.clone()),
            FrameKind::Kernel(c) => {
                gram_schmidt_rows(&c.raw(x)).ok_or_else(|| FieldError::Degenerate { x: x.to_vec() })
            }
            FrameKind::Numeric(_) => Ok(complement(&self.frame(x)?)),
        }
    }
}

/// Orthonormalized rows of `a`, returned as columns.
fn gram_schmidt_rows(a: &Mat) -> Option<Mat> {
    let mut q = a.transpose();
    let scale = a.norm().max(1e-300);
    for j in 0..q.ncols() {
        for i in 0..j {
            let d = q.column(i).dot(&q.column(j));
            let qi = q.column(i).into_owned();
            q.column_mut(j).axpy(-d, &qi, 1.0);
        }
        let nrm = q.column(j).norm();
        if nrm <= 1e-12 * scale {
            return None;
        }
        q.column_mut(j).unscale_mut(nrm);
    }
    Some(q)
}

/// Plane field `ker ω`, with frames aligned to the kernel at the domain centre.
pub fn coframe_to_frame(coframe: &NormalCoframe) -> PlaneField {
    let c = coframe.domain.center();
    let reference = nullspace(&coframe.raw(&c));
    PlaneField {
        n: coframe.n,
        domain: coframe.domain.clone(),
        h: coframe.h,
        kind: FrameKind::Kernel(coframe.clone()),
        reference,
    }
}

/// Orthonormal annihilating coframe of a plane field; rows are aligned to
/// the normal space at the domain centre.
pub fn frame_to_coframe(field: &PlaneField) -> NormalCoframe {
    let c = field.domain.center();
    let reference = field
        .normal(&c)
        .unwrap_or_else(|_| complement(&field.reference));
    let f = field.clone();
    NormalCoframe::from_fn(field.domain.clone(), move |x| {
        let frame = f.frame(x).expect("evaluation inside domain");
        aligned_frame(&complement(&frame), &reference).transpose()
    })
    .with_step(field.h)
}

fn permutation_sign(idx: &[usize]) -> f64 {
    let mut sign = 1.0;
    for i in 0..idx.len() {
        for j in i + 1..idx.len() {
            if idx[i] > idx[j] {
                sign = -sign;
            }
        }
    }
    sign
}

/// Max over `i` of the coefficients of `dω_i ∧ ω_1 ∧ … ∧ ω_k` at `x`.
pub fn integrability_residual(coframe: &NormalCoframe, x: &[f64]) -> Result<f64, FieldError> {
    integrability_residual_with(coframe, x, Derivatives::Auto)
}

pub fn integrability_residual_with(
    coframe: &NormalCoframe,
    x: &[f64],
    mode: Derivatives,
) -> Result<f64, FieldError> {
    let a = coframe.eval(x)?;
    let da = coframe.derivatives(x, mode)?;
    let n = coframe.n;
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        // dω_i = Σ_{j<l} (∂_j a_il − ∂_l a_ij) dx_j ∧ dx_l; wedge with the
        // top-degree remainder is a signed minor of the coefficient matrix.
        let mut coeff = 0.0;
        for j in 0..n {
            for l in j + 1..n {
                let d = da[j][(i, l)] - da[l][(i, j)];
                if d == 0.0 {
                    continue;
                }
                let rest: Vec<usize> = (0..n).filter(|&c| c != j && c != l).collect();
                let minor = Mat::from_fn(a.nrows(), rest.len(), |r, c| a[(r, rest[c])]);
                let mut order = vec![j, l];
                order.extend(&rest);
                coeff += d * permutation_sign(&order) * minor.determinant();
            }
        }
        worst = worst.max(coeff.abs());
    }
    Ok(worst)
}

/// `τ(y)` presented as the graph of `L: τ(x) → τ(x)^⊥`.
#[derive(Clone, Debug)]
pub struct GraphMap {
    pub base: Mat,
    pub normal: Mat,
    pub target: Mat,
    /// `(n−2) × 2` matrix in the bases `base`, `normal`.
    pub map: Mat,
    pub norm: f64,
}

impl GraphMap {
    /// Orthonormal frame of the graph of `scale · L`.
    pub fn scaled_plane(&self, scale: f64) -> Mat {
        graph_plane(&self.base, &self.normal, &(&self.map * scale))
    }
}

/// Orthonormal frame of `{v + C L v : v ∈ span B}` aligned with `B`.
pub fn graph_plane(base: &Mat, normal: &Mat, map: &Mat) -> Mat {
    let m = base + normal * map;
    polar_orthonormalize(&m).expect("graph of a linear map has full rank")
}

/// Graph map between two explicit planes.
pub fn graph_map_between(base: &Mat, target: &Mat) -> Option<GraphMap> {
    let normal = complement(base);
    let btd = base.transpose() * target;
    if sigma_min(&btd) < 1e-12 {
        return None;
    }
    let inv = btd.try_inverse()?;
    let map = (normal.transpose() * target) * inv;
    let norm = op_norm(&map);
    Some(GraphMap {
        base: base.clone(),
        normal,
        target: target.clone(),
        map,
        norm,
    })
}

pub fn graph_map(field: &PlaneField, x: &[f64], y: &[f64]) -> Result<GraphMap, FieldError> {
    let bx = field.frame(x)?;
    let by = field.frame(y)?;
    graph_map_between(&bx, &by).ok_or_else(|| FieldError::NotAGraph {
        x: x.to_vec(),
        y: y.to_vec(),
        sigma_min: sigma_min(&(bx.transpose() * &by)),
    })
}

/// Maximum graph norm over all pairs of barycentric samples of `simplex`.
/// Fails if any pair is not a graph or has norm `≥ 1 − 1e−9`.
pub fn check_graph_condition(
    field: &PlaneField,
    simplex: &AffineSimplex,
    samples: usize,
) -> Result<f64, FieldError> {
    let pts = simplex.barycentric_samples(samples);
    let frames = pts
        .iter()
        .map(|p| field.frame(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut worst: f64 = 0.0;
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            if i == j {
                continue;
            }
            let g = graph_map_between(&frames[i], &frames[j]).ok_or_else(|| {
                FieldError::NotAGraph {
                    x: pts[i].clone(),
                    y: pts[j].clone(),
                    sigma_min: sigma_min(&(frames[i].transpose() * &frames[j])),
                }
            })?;
            if g.norm >= 1.0 - GRAPH_SLACK {
                return Err(FieldError::GraphCondition {
                    x: pts[i].clone(),
                    y: pts[j].clone(),
                    norm: g.norm,
                });
            }
            worst = worst.max(g.norm);
        }
    }
    Ok(worst)
}

type HomotopyFn = Arc<dyn Fn(&[f64], f64) -> Result<Mat, FieldError> + Send + Sync>;

/// A one-parameter family of plane fields `t ∈ [0,1]`.
#[derive(Clone)]
pub struct FieldHomotopy {
    n: usize,
    domain: BoxRegion,
    support: Option<BoxRegion>,
    eval: HomotopyFn,
}

impl fmt::Debug for FieldHomotopy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FieldHomotopy(n={}, support={:?})", self.n, self.support)
    }
}

impl FieldHomotopy {
    pub fn new(
        domain: BoxRegion,
        support: Option<BoxRegion>,
        eval: impl Fn(&[f64], f64) -> Result<Mat, FieldError> + Send + Sync + 'static,
    ) -> Self {
        FieldHomotopy {
            n: domain.dim(),
            domain,
            support,
            eval: Arc::new(eval),
        }
    }

    pub fn constant(field: PlaneField) -> Self {
        let domain = field.domain.clone();
        FieldHomotopy::new(domain, None, move |z, _| field.frame(z))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn domain(&self) -> &BoxRegion {
        &self.domain
    }

    /// Region outside of which the family does not depend on `t`
    /// (`None` when it is constant everywhere).
    pub fn support(&self) -> Option<&BoxRegion> {
        self.support.as_ref()
    }

    pub fn frame(&self, z: &[f64], t: f64) -> Result<Mat, FieldError> {
        (self.eval)(z, t)
    }

    /// The field at time `t`.
    pub fn at(&self, t: f64) -> PlaneField {
        let h = self.clone();
        PlaneField::from_fn(self.domain.clone(), move |z| {
            h.frame(z, t).expect("evaluation inside domain")
        })
    }
}

/// The family whose plane at `(z, t)` is the graph of `(1 − t)·L_z`, where
/// `L_z` presents `field(z)` as a graph over `target(z)`; constant outside
/// `region`.
pub fn graph_line_homotopy(
    field: &PlaneField,
    target: &PlaneField,
    region: &BoxRegion,
) -> Result<FieldHomotopy, FieldError> {
    for z in region.grid(5) {
        let g = graph_map_between(&target.frame(&z)?, &field.frame(&z)?);
        match g {
            Some(g) if g.norm < 1.0 - GRAPH_SLACK => {}
            Some(g) => {
                return Err(FieldError::GraphCondition {
                    x: z.clone(),
                    y: z,
                    norm: g.norm,
                })
            }
            None => {
                return Err(FieldError::NotAGraph {
                    x: z.clone(),
                    y: z,
                    sigma_min: 0.0,
                })
            }
        }
    }
    let (field, target, reg) = (field.clone(), target.clone(), region.clone());
    Ok(FieldHomotopy::new(
        field.domain.clone(),
        Some(region.clone()),
        move |z, t| {
            if t == 0.0 || !reg.contains(z) {
                return field.frame(z);
            }
            let base = target.frame(z)?;
            if t == 1.0 {
                return Ok(base);
            }
            let plane = field.frame(z)?;
            let g = graph_map_between(&base, &plane).ok_or_else(|| FieldError::NotAGraph {
                x: z.to_vec(),
                y: z.to_vec(),
                sigma_min: 0.0,
            })?;
            Ok(g.scaled_plane(1.0 - t))
        },
    ))
}

/// The constant field tangent to the `D²` factor of `D² × ℝᵏ`, on the box
/// `[-2, 2]^{2+k}`.
pub fn kernel_field_of_projection(k: usize) -> PlaneField {
    PlaneField::coordinate(BoxRegion::cube(2 + k, -2.0, 2.0), 0, 1)
}

/// The coframe `{dy_1, …, dy_k}` of [`kernel_field_of_projection`].
pub fn projection_coframe(k: usize) -> NormalCoframe {
    let n = 2 + k;
    let rows = (0..k)
        .map(|i| {
            (0..n)
                .map(|j| Expr::Const(if j == i + 2 { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    NormalCoframe::from_exprs(BoxRegion::cube(n, -2.0, 2.0), rows).expect("valid projection rows")
}

/// Named benchmark fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Catalog {
    /// `{dx3, dx4, …}`: the constant field `span(e1, e2)`.
    Horizontal,
    /// `{dx3 − u·x1·dx2, dx4, …}`.
    LinearTilt { u: f64 },
    /// `{dx3 − x2·dx1, dx4, …}`: maximally non-integrable.
    Contact,
    /// `{d(x3 − a·sin(x1)·x2), d(x4 − b·x1²/2), …}`: integrable.
    IntegrableGraph { a: f64, b: f64 },
    /// `{−sin(α·x1)dx2 + cos(α·x1)dx3, dx4, …}`: rotates by α per unit x1.
    Twist { alpha: f64 },
}

impl Catalog {
    pub fn coframe_rows(&self, n: usize) -> Vec<Vec<String>> {
        let zero = || vec!["0".to_string(); n];
        let mut rows = Vec::new();
        let mut r1 = zero();
        let mut r2 = zero();
        r2[3] = "1".into();
        match self {
            Catalog::Horizontal => r1[2] = "1".into(),
            Catalog::LinearTilt { u } => {
                r1[1] = format!("-({u:?})*x1");
                r1[2] = "1".into();
            }
            Catalog::Contact => {
                r1[0] = "-x2".into();
                r1[2] = "1".into();
            }
            Catalog::IntegrableGraph { a, b } => {
                r1[0] = format!("-({a:?})*cos(x1)*x2");
                r1[1] = format!("-({a:?})*sin(x1)");
                r1[2] = "1".into();
                r2[0] = format!("-({b:?})*x1");
            }
            Catalog::Twist { alpha } => {
                r1[1] = format!("-sin(({alpha:?})*x1)");
                r1[2] = format!("cos(({alpha:?})*x1)");
            }
        }
        rows.push(r1);
        rows.push(r2);
        for j in 4..n {
            let mut r = zero();
            r[j] = "1".into();
            rows.push(r);
        }
        rows
    }

    pub fn coframe(&self, domain: BoxRegion) -> Result<NormalCoframe, FieldError> {
        let n = domain.dim();
        NormalCoframe::parse(domain, &self.coframe_rows(n))
    }

    pub fn field(&self, domain: BoxRegion) -> Result<PlaneField, FieldError> {
        Ok(self.coframe(domain)?.to_field())
    }
}

/// Projector distance between the planes of two fields at `x`.
pub fn plane_distance(a: &PlaneField, b: &PlaneField, x: &[f64]) -> Result<f64, FieldError> {
    Ok(subspace_distance(&a.frame(x)?, &b.frame(x)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit4() -> BoxRegion {
        BoxRegion::cube(4, -1.0, 1.0)
    }

    #[test]
    fn horizontal_coframe_is_dx3_dx4() {
        let f = PlaneField::coordinate(unit4(), 0, 1);
        let c = frame_to_coframe(&f);
        let a = c.eval(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let expected = Mat::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((a - expected).norm() < 1e-12);
    }

    #[test]
    fn contact_residual_is_one() {
        let c = Catalog::Contact.coframe(unit4()).unwrap();
        for x in [[0.0, 0.0, 0.0, 0.0], [0.3, -0.7, 0.2, 0.9]] {
            let r = integrability_residual(&c, &x).unwrap();
            assert!((r - 1.0).abs() < 1e-14, "{r}");
        }
    }

    #[test]
    fn horizontal_residual_is_zero() {
        let c = Catalog::Horizontal.coframe(unit4()).unwrap();
        assert_eq!(integrability_residual(&c, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 0.0);
    }

    #[test]
    fn stencil_leaving_domain_is_boundary_error() {
        let c = Catalog::Contact.coframe(unit4()).unwrap();
        let r = integrability_residual_with(&c, &[1.0, 0.0, 0.0, 0.0], Derivatives::FiniteDifference(1e-3));
        assert!(matches!(r, Err(FieldError::Boundary { .. })));
    }

    #[test]
    fn graph_map_of_tilted_plane_has_norm_u() {
        let u: f64 = 0.37;
        let base = Mat::from_column_slice(4, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let s = (1.0 + u * u).sqrt();
        let target = Mat::from_column_slice(4, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0 / s, u / s, 0.0]);
        let g = graph_map_between(&base, &target).unwrap();
        assert!((g.norm - u).abs() < 1e-12);
        let orth = Mat::from_column_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(graph_map_between(&base, &orth).is_none());
    }

    #[test]
    fn graph_plane_reconstructs_target() {
        let f = Catalog::LinearTilt { u: 0.8 }.field(unit4()).unwrap();
        let g = graph_map(&f, &[-0.5, 0.0, 0.0, 0.0], &[0.6, 0.1, 0.0, 0.2]).unwrap();
        assert!(subspace_distance(&g.scaled_plane(1.0), &g.target) < 1e-10);
        assert!(subspace_distance(&g.scaled_plane(0.0), &g.base) < 1e-12);
    }

    #[test]
    fn kernel_field_frame_is_orthonormal_and_annihilated() {
        let f = Catalog::Twist { alpha: 1.3 }.field(unit4()).unwrap();
        let c = f.defining_coframe().unwrap().clone();
        let x = [0.4, -0.2, 0.1, 0.3];
        let b = f.frame(&x).unwrap();
        assert!((b.transpose() * &b - Mat::identity(2, 2)).norm() < 1e-12);
        assert!((c.eval(&x).unwrap() * b).norm() < 1e-12);
    }

    #[test]
    fn projection_field_is_integrable() {
        let c = projection_coframe(2);
        assert_eq!(integrability_residual(&c, &[0.5, 0.1, -0.3, 0.2]).unwrap(), 0.0);
        let f = kernel_field_of_projection(2);
        let a = c.eval(&[0.0; 4]).unwrap();
        assert!((a * f.frame(&[0.0; 4]).unwrap()).norm() < 1e-15);
    }
}
