//! Reeb-type fillings of the solid torus `D² × (S¹ × D^{k−1})` and their
//! gluing along half-disks.
//!
//! A filling form is `ω = P dθ + Q dr + S dφ` on the tube, with `θ` and `φ`
//! measured in turns and `P, Q, S` depending on `(r, φ, x)`. Together with
//! `dx₁, …, dx_{k−1}` it defines a codimension-`k` plane field on
//! `D² × ℝᵏ` (via the annulus model of [`annulus_coords`]) that is
//! horizontal outside the tube.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgroup::{annulus_box, annulus_coords, CompactDiffeo, ConjugateWord, Core, DiffError};
use crate::expr::{Env, Expr, ExprError, SmoothFn, Var};
use crate::diffgroup::OneParameter;
use crate::holonomy::{self, HolonomyError, PeriodicPath, Segment, HORIZONTAL};
use crate::linalg::{sigma_min, BoxRegion, Mat};
use crate::planefield::{NormalCoframe, PlaneField};

/// Inner radius of the boundary band on which the form is `dθ − f dφ`.
pub const BOUNDARY_BAND: f64 = 0.9;

/// RK4 steps per turn for boundary line-field integration.
const TRANSPORT_STEPS: f64 = 256.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FillingError {
    #[error("partition of unity fails at r = {r}: {reason}")]
    Partition { r: f64, reason: String },
    #[error("support relation fails at x = {x:?}: {reason}")]
    SupportRelation { x: Vec<f64>, reason: String },
    #[error("boundary band mismatch at r = {r}, x = {x:?}")]
    BandMismatch { r: f64, x: Vec<f64> },
    #[error("boundary paths not horizontal on the band: margin {margin} < {needed}")]
    BandCondition { margin: f64, needed: f64 },
    #[error("leaf direction degenerates at {at:?}")]
    StepUnderflow { at: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Holonomy(#[from] HolonomyError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// `(λ₀, λ_{1/2}, λ₁)` on `[0, 1]`, functions of `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionProfiles {
    exprs: [Expr; 3],
}

impl PartitionProfiles {
    /// Checks the partition on a 2001-point grid: values in `[0, 1]`, sum 1,
    /// each `λ_i ≡ 1` near `i`, and disjoint supports of `λ₀` and `λ₁`.
    pub fn new(lambda0: Expr, lambda_half: Expr, lambda1: Expr) -> Result<Self, FillingError> {
        let p = PartitionProfiles {
            exprs: [lambda0, lambda_half, lambda1],
        };
        for e in &p.exprs {
            if let Some(v) = e.vars().into_iter().find(|v| *v != Var::R) {
                return Err(FillingError::Partition {
                    r: f64::NAN,
                    reason: format!("profile depends on {v}"),
                });
            }
        }
        let m = 2000;
        let tol = 1e-12;
        let vals: Vec<(f64, [f64; 3])> = (0..=m)
            .map(|i| {
                let r = i as f64 / m as f64;
                (r, p.eval(r))
            })
            .collect();
        let fail = |r: f64, reason: &str| FillingError::Partition {
            r,
            reason: reason.to_string(),
        };
        for &(r, l) in &vals {
            if l.iter().any(|v| !(-tol..=1.0 + tol).contains(v)) {
                return Err(fail(r, "value outside [0, 1]"));
            }
            if (l.iter().sum::<f64>() - 1.0).abs() > tol {
                return Err(fail(r, "values do not sum to 1"));
            }
            if l[0] > tol && l[2] > tol {
                return Err(fail(r, "supports of λ₀ and λ₁ meet"));
            }
        }
        let near = 10;
        for (i, centre) in [(0, 0usize), (1, m / 2), (2, m)] {
            let lo = centre.saturating_sub(near);
            let hi = (centre + near).min(m);
            if let Some(&(r, _)) = vals[lo..=hi].iter().find(|(_, l)| (l[i] - 1.0).abs() > tol) {
                return Err(fail(r, &format!("λ{} is not 1 near its point", ["0", "1/2", "1"][i])));
            }
        }
        Ok(p)
    }

    /// `λ₀ = 1` on `[0, 0.25]`, `λ₁ = 1` on `[0.75, 1]`, `λ_{1/2} = 1` on
    /// `[0.4, 0.6]`.
    pub fn standard() -> Self {
        let step = |a: f64| format!("smoothstep((r-{a})/0.15)");
        PartitionProfiles::new(
            Expr::parse(&format!("1-{}", step(0.25))).expect("valid profile"),
            Expr::parse(&format!("{}-{}", step(0.25), step(0.6))).expect("valid profile"),
            Expr::parse(&step(0.6)).expect("valid profile"),
        )
        .expect("standard partition")
    }

    pub fn lambda0(&self) -> &Expr {
        &self.exprs[0]
    }

    pub fn lambda_half(&self) -> &Expr {
        &self.exprs[1]
    }

    pub fn lambda1(&self) -> &Expr {
        &self.exprs[2]
    }

    pub fn eval(&self, r: f64) -> [f64; 3] {
        let env = Env::new().with(Var::R, r);
        [0, 1, 2].map(|i| self.exprs[i].eval(&env))
    }

    /// `λ_{1/2} → (1−s)λ_{1/2}`, `λ₀ → λ₀ + sλ_{1/2}`. Unchecked, since
    /// `λ_{1/2}` no longer equals 1 near `1/2` for `s > 0`.
    fn homotoped(&self, s: f64) -> Self {
        if s == 0.0 {
            return self.clone();
        }
        let [l0, lh, l1] = self.exprs.clone();
        PartitionProfiles {
            exprs: [
                l0 + Expr::constant(s) * lh.clone(),
                Expr::constant(1.0 - s) * lh,
                l1,
            ],
        }
    }
}

/// Values of the three coefficients of `ω`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub p: f64,
    pub q: f64,
    pub s: f64,
}

impl Coefficients {
    pub const HORIZONTAL: Coefficients = Coefficients { p: 1.0, q: 0.0, s: 0.0 };

    pub fn is_horizontal(&self) -> bool {
        self.p == 1.0 && self.q == 0.0 && self.s == 0.0
    }
}

/// The form `(1−gλ_{1/2}) dθ + gλ_{1/2} dr − gλ₁f dφ`, optionally with the
/// `dφ` term multiplied by `adjust′(φ)`.
#[derive(Clone, Debug)]
pub struct FillingForm {
    k: usize,
    f: Expr,
    g: Expr,
    profiles: PartitionProfiles,
    adjusted: bool,
    p: SmoothFn,
    q: SmoothFn,
    s: SmoothFn,
}

impl PartialEq for FillingForm {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.f == other.f
            && self.g == other.g
            && self.profiles == other.profiles
            && self.adjusted == other.adjusted
    }
}

/// `adjust(φ)` as an expression.
fn adjust_expr() -> Expr {
    Expr::parse(&format!(
        "smoothstep((phi-{})/{})",
        HORIZONTAL,
        1.0 - 2.0 * HORIZONTAL
    ))
    .expect("valid adjust expression")
}

/// Sample points of `D^d`: a cube grid restricted to the closed ball, plus the
/// boundary shell.
fn disk_samples(d: usize) -> Vec<Vec<f64>> {
    let m = match d {
        1 => 2001,
        2 => 61,
        3 => 19,
        _ => 9,
    };
    BoxRegion::cube(d, -1.0, 1.0)
        .grid(m)
        .into_iter()
        .filter(|x| crate::linalg::norm(x) <= 1.0)
        .collect()
}

/// Points with `0.95 ≤ |x| ≤ 1`.
fn shell(d: usize) -> Vec<Vec<f64>> {
    disk_samples(d)
        .into_iter()
        .filter(|x| crate::linalg::norm(x) >= 0.95)
        .chain(boundary_dirs(d))
        .collect()
}

fn boundary_dirs(d: usize) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        _ => BoxRegion::cube(d, -1.0, 1.0)
            .grid(9)
            .into_iter()
            .filter(|p| crate::linalg::norm(p) > 1e-9)
            .map(|p| {
                let n = crate::linalg::norm(&p);
                p.into_iter().map(|v| v / n).collect()
            })
            .collect(),
    }
}

fn check_x_only(e: &Expr, k: usize, name: &str) -> Result<(), FillingError> {
    if let Some(v) = e.vars().into_iter().find(|v| !matches!(v, Var::X(i) if (*i as usize) < k)) {
        return Err(FillingError::Dimension(format!("{name} depends on {v}")));
    }
    Ok(())
}

/// Builds the filling form after sampled checks of the support relations:
/// `|f| ≤ 1`, `0 ≤ g ≤ 1`, `f` and `g` vanish on the shell `0.95 ≤ |x| ≤ 1`
/// of `D^{k−1}`, and `g = 1` wherever `f ≠ 0`.
pub fn explicit_form(k: usize, f: &Expr, g: &Expr, profiles: &PartitionProfiles) -> Result<FillingForm, FillingError> {
    if !(2..=crate::diffgroup::MAXK).contains(&k) {
        return Err(FillingError::Dimension(format!("k = {k}")));
    }
    check_x_only(f, k, "f")?;
    check_x_only(g, k, "g")?;
    let d = k - 1;
    let bad = |x: &[f64], reason: &str| FillingError::SupportRelation {
        x: x.to_vec(),
        reason: reason.to_string(),
    };
    for x in shell(d) {
        let env = Env::from_x(&x);
        if f.eval(&env) != 0.0 {
            return Err(bad(&x, "f does not vanish near the boundary"));
        }
        if g.eval(&env) != 0.0 {
            return Err(bad(&x, "g does not vanish near the boundary"));
        }
    }
    for x in disk_samples(d) {
        let env = Env::from_x(&x);
        let (fv, gv) = (f.eval(&env), g.eval(&env));
        if !(-1.0..=1.0).contains(&fv) {
            return Err(bad(&x, "f outside [-1, 1]"));
        }
        if !(0.0..=1.0).contains(&gv) {
            return Err(bad(&x, "g outside [0, 1]"));
        }
        if fv != 0.0 && (gv - 1.0).abs() > 1e-12 {
            return Err(bad(&x, "g is not 1 on the support of f"));
        }
    }
    Ok(FillingForm::from_parts(k, f.clone(), g.clone(), profiles.clone(), false))
}

impl FillingForm {
    /// Assembles the form without any admissibility check.
    pub fn from_parts(k: usize, f: Expr, g: Expr, profiles: PartitionProfiles, adjusted: bool) -> Self {
        let [_, lh, l1] = profiles.exprs.clone();
        let p = Expr::constant(1.0) - g.clone() * lh.clone();
        let q = g.clone() * lh;
        let mut s = g.clone() * l1 * f.clone();
        if adjusted {
            s = s * adjust_expr().derivative(Var::Phi);
        }
        let s = -s;
        let vars = [Var::R, Var::Phi];
        FillingForm {
            k,
            p: SmoothFn::new(p, &vars),
            q: SmoothFn::new(q, &vars),
            s: SmoothFn::new(s, &vars),
            f,
            g,
            profiles,
            adjusted,
        }
    }

    /// Default admissible data: `f = 0.8 (1 − smoothstep((|x|² − 0.09)/0.16))`,
    /// `g = 1 − smoothstep((|x|² − 0.25)/0.3)` and the standard profiles.
    pub fn standard(k: usize) -> Result<Self, FillingError> {
        let (f, g) = standard_slope_and_cutoff(k, 0.8);
        explicit_form(k, &f, &g, &PartitionProfiles::standard())
    }

    /// The horizontal form `ω = dθ` (`f = g = 0`).
    pub fn horizontal(k: usize) -> Self {
        FillingForm::from_parts(k, Expr::constant(0.0), Expr::constant(0.0), PartitionProfiles::standard(), false)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn f(&self) -> &Expr {
        &self.f
    }

    pub fn g(&self) -> &Expr {
        &self.g
    }

    pub fn profiles(&self) -> &PartitionProfiles {
        &self.profiles
    }

    pub fn is_adjusted(&self) -> bool {
        self.adjusted
    }

    /// Multiplies the `dφ` coefficient by `adjust′(φ)`; the boundary path
    /// becomes `t ↦ h_f(adjust(t))`.
    pub fn adjusted(&self) -> Self {
        FillingForm::from_parts(self.k, self.f.clone(), self.g.clone(), self.profiles.clone(), true)
    }

    /// The filling of `h_f⁻¹ = h_{−f}`.
    pub fn inverse(&self) -> Self {
        FillingForm::from_parts(self.k, -self.f.clone(), self.g.clone(), self.profiles.clone(), self.adjusted)
    }

    fn env(&self, r: f64, phi: f64, x: &[f64]) -> Env {
        let mut env = Env::from_x(x);
        env.set(Var::R, r).set(Var::Phi, phi);
        env
    }

    pub fn coefficients(&self, r: f64, phi: f64, x: &[f64]) -> Coefficients {
        let env = self.env(r, phi, x);
        Coefficients {
            p: self.p.eval(&env),
            q: self.q.eval(&env),
            s: self.s.eval(&env),
        }
    }

    /// Symbolic `∂_r` of the coefficients.
    pub fn r_derivatives(&self, r: f64, phi: f64, x: &[f64]) -> Coefficients {
        let env = self.env(r, phi, x);
        Coefficients {
            p: self.p.partial(Var::R, &env),
            q: self.q.partial(Var::R, &env),
            s: self.s.partial(Var::R, &env),
        }
    }

    /// `P ∂_r S − S ∂_r P` at `(r, φ, x)`.
    pub fn residual_at(&self, r: f64, phi: f64, x: &[f64]) -> f64 {
        let c = self.coefficients(r, phi, x);
        let d = self.r_derivatives(r, phi, x);
        c.p * d.s - c.s * d.p
    }

    /// Cartesian components `(a_u, a_v, a_θ)` of `ω` at `z = (u, v)`.
    pub fn cartesian(&self, u: f64, v: f64, x: &[f64]) -> [f64; 3] {
        let r = u.hypot(v);
        let phi = (v.atan2(u) / TAU).rem_euclid(1.0);
        cartesian_components(self.coefficients(r.min(1.0), phi, x), u, v)
    }

    /// Boundary path of the form: `t ↦ h_f(t)`, or `t ↦ h_f(adjust(t))` when
    /// adjusted.
    pub fn boundary_path(&self) -> Result<PeriodicPath, FillingError> {
        Ok(if self.adjusted {
            PeriodicPath::rotation(self.k, &self.f)?
        } else {
            let g = OneParameter::rotation(self.k, &self.f)?;
            PeriodicPath::unadjusted(self.k, vec![Segment::new(g, &Expr::var(Var::T))])?
        })
    }

    /// Transports `p` along the boundary line field from `φ = a` to `φ = b`,
    /// `0 ≤ a ≤ b ≤ 1`.
    fn transport(&self, p: &[f64], a: f64, b: f64) -> Vec<f64> {
        let Some((_, y)) = annulus_coords(p) else { return p.to_vec() };
        let n = ((b - a) * TRANSPORT_STEPS).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        let slope = |phi: f64| {
            let c = self.coefficients(1.0, phi, &y);
            -c.s / c.p
        };
        let mut theta = 0.0;
        for i in 0..n {
            let phi = a + i as f64 * h;
            let k1 = slope(phi);
            let k2 = slope(phi + 0.5 * h);
            let k4 = slope(phi + h);
            theta += h * (k1 + 4.0 * k2 + k4) / 6.0;
        }
        rotate(p, theta)
    }
}

/// Rotates the first two coordinates by `turns`.
fn rotate(p: &[f64], turns: f64) -> Vec<f64> {
    let mut out = p.to_vec();
    if turns != 0.0 {
        let (s, c) = (TAU * turns).sin_cos();
        out[0] = c * p[0] - s * p[1];
        out[1] = s * p[0] + c * p[1];
    }
    out
}

/// `(a_u, a_v, a_θ)` with `dr = (u du + v dv)/r`, `dφ = (u dv − v du)/(2π r²)`.
fn cartesian_components(c: Coefficients, u: f64, v: f64) -> [f64; 3] {
    let r = u.hypot(v);
    if r == 0.0 {
        return [0.0, 0.0, c.p];
    }
    let w = c.s / (TAU * r * r);
    [c.q * u / r - w * v, c.q * v / r + w * u, c.p]
}

/// Default slope and cutoff in `x1..x_{k−1}` with slope amplitude `amp`.
pub fn standard_slope_and_cutoff(k: usize, amp: f64) -> (Expr, Expr) {
    let sq = (1..k).map(|i| format!("x{i}^2")).collect::<Vec<_>>().join("+");
    let f = Expr::parse(&format!("{amp}*(1-smoothstep(({sq}-0.09)/0.16))")).expect("valid slope");
    let g = Expr::parse(&format!("1-smoothstep(({sq}-0.25)/0.3)")).expect("valid cutoff");
    (f, g)
}

/// `R(r, x) = P ∂_r S − S ∂_r P`, at `φ = 1/2` for adjusted forms.
pub fn integrability_residual(form: &FillingForm, r: f64, x: &[f64]) -> f64 {
    form.residual_at(r, 0.5, x)
}

/// Slice points `(r, x1)` of an `m × m` cell-centred grid of `(0,1] × [−1,1]`,
/// other coordinates zero.
pub fn slice_grid(k: usize, m: usize) -> Vec<(f64, Vec<f64>)> {
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        let r = (i as f64 + 0.5) / m as f64;
        for j in 0..m {
            let mut x = vec![0.0; k - 1];
            x[0] = -1.0 + 2.0 * (j as f64 + 0.5) / m as f64;
            out.push((r, x));
        }
    }
    out
}

/// `max |R|` over [`slice_grid`] with symbolic `r`-derivatives.
pub fn max_residual(form: &FillingForm, m: usize) -> f64 {
    slice_grid(form.k, m)
        .par_iter()
        .map(|(r, x)| integrability_residual(form, *r, x).abs())
        .reduce(|| 0.0, f64::max)
}

/// Coefficient of `du ∧ dv ∧ dθ` in `ω ∧ dω` at `(u, v)`, from central
/// differences of step `h`.
pub fn fd_wedge(form: &FillingForm, u: f64, v: f64, x: &[f64], h: f64) -> f64 {
    let a = form.cartesian(u, v, x);
    let (up, um) = (form.cartesian(u + h, v, x), form.cartesian(u - h, v, x));
    let (vp, vm) = (form.cartesian(u, v + h, x), form.cartesian(u, v - h, x));
    let du = |i: usize| (up[i] - um[i]) / (2.0 * h);
    let dv = |i: usize| (vp[i] - vm[i]) / (2.0 * h);
    a[0] * dv(2) - a[1] * du(2) + a[2] * (du(1) - dv(0))
}

/// `max |ω ∧ dω|` by central differences over [`slice_grid`] at angle `phi`.
pub fn max_fd_residual(form: &FillingForm, m: usize, phi: f64, h: f64) -> f64 {
    let (s, c) = (TAU * phi).sin_cos();
    slice_grid(form.k, m)
        .par_iter()
        .map(|(r, x)| fd_wedge(form, r * c, r * s, x, h).abs())
        .reduce(|| 0.0, f64::max)
}

/// `min max(|P|, |Q|, |S|)` over [`slice_grid`] and, for adjusted forms, 17
/// angles.
pub fn nonvanishing_certificate(form: &FillingForm, m: usize) -> f64 {
    let phis: Vec<f64> = if form.adjusted {
        (0..=16).map(|i| i as f64 / 16.0).collect()
    } else {
        vec![0.0]
    };
    slice_grid(form.k, m)
        .par_iter()
        .map(|(r, x)| {
            phis.iter()
                .map(|&phi| {
                    let c = form.coefficients(*r, phi, x);
                    c.p.abs().max(c.q.abs()).max(c.s.abs())
                })
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min)
}

/// `max |P + Q − 1|` over [`slice_grid`].
pub fn partition_defect(form: &FillingForm, m: usize) -> f64 {
    slice_grid(form.k, m)
        .par_iter()
        .map(|(r, x)| {
            let c = form.coefficients(*r, 0.5, x);
            (c.p + c.q - 1.0).abs()
        })
        .reduce(|| 0.0, f64::max)
}

/// The form with `λ_{1/2} → (1−s)λ_{1/2}` and `λ₀ → λ₀ + sλ_{1/2}`.
pub fn transversality_homotopy(form: &FillingForm, s: f64) -> FillingForm {
    FillingForm::from_parts(form.k, form.f.clone(), form.g.clone(), form.profiles.homotoped(s), form.adjusted)
}

/// Checks that on `r ∈ [BOUNDARY_BAND, 1]` the coefficients are exactly
/// `(1, 0, −f)` (times `adjust′(φ)` when adjusted).
pub fn boundary_band_check(form: &FillingForm, m: usize) -> Result<(), FillingError> {
    let dphi = adjust_expr().derivative(Var::Phi);
    let phis: Vec<f64> = if form.adjusted {
        (0..=32).map(|i| i as f64 / 32.0).collect()
    } else {
        vec![0.0]
    };
    for i in 0..=m {
        let r = BOUNDARY_BAND + (1.0 - BOUNDARY_BAND) * i as f64 / m as f64;
        for x in disk_samples(form.k - 1) {
            let fx = form.f.eval(&Env::from_x(&x));
            for &phi in &phis {
                let c = form.coefficients(r, phi, &x);
                let s = if form.adjusted {
                    -(fx * dphi.eval(&Env::new().with(Var::Phi, phi)))
                } else {
                    -fx
                };
                if c.p != 1.0 || c.q != 0.0 || c.s != s {
                    return Err(FillingError::BandMismatch { r, x });
                }
            }
        }
    }
    Ok(())
}

/// Outcome of [`boundary_holonomy_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub band_exact: bool,
    pub max_error: f64,
    pub samples: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Points of the tube at `samples` values of the first tube coordinate
/// spread over `(−1, 1)`, at varying angles.
pub fn tube_samples(k: usize, samples: usize) -> Vec<Vec<f64>> {
    (0..samples)
        .map(|i| {
            let y1 = -0.95 + 1.9 * (i as f64 + 0.5) / samples as f64;
            let rho = 1.0 + y1 / 2.0;
            let ang = TAU * (0.137 + 0.381 * i as f64);
            let mut p = vec![rho * ang.cos(), rho * ang.sin()];
            p.extend((2..k).map(|j| 0.1 * ((i + j) as f64).sin()));
            p
        })
        .collect()
}

/// Band exactness plus one-turn line-field holonomy against `w(1)` at the
/// given points.
pub fn boundary_holonomy_check(
    form: &FillingForm,
    w: &PeriodicPath,
    points: &[Vec<f64>],
    tolerance: f64,
) -> Result<BoundaryReport, FillingError> {
    let band_exact = boundary_band_check(form, 20).is_ok();
    let target = w.eval(1.0)?;
    let mut max_error: f64 = 0.0;
    for p in points {
        let got = form.transport(p, 0.0, 1.0);
        let want = target.eval(p)?;
        max_error = max_error.max(crate::linalg::dist(&got, &want));
    }
    Ok(BoundaryReport {
        band_exact,
        max_error,
        samples: points.len(),
        tolerance,
        pass: band_exact && max_error < tolerance,
    })
}

/// A filling of `D² × ℝᵏ`: a Reeb-type form, a conjugate `(id × g)_* F`, or
/// two fillings glued along half-disks.
#[derive(Clone, Debug)]
pub enum Filling {
    Reeb(Arc<FillingForm>),
    Conjugated {
        g: CompactDiffeo,
        g_inv: CompactDiffeo,
        inner: Arc<Filling>,
    },
    Glued(Arc<GluedFilling>),
}

/// Two fillings on the caps `Im z > ε` and `Im z < −ε`, horizontal on the
/// band `|Im z| ≤ ε`.
#[derive(Clone, Debug)]
pub struct GluedFilling {
    first: Filling,
    second: Filling,
    eps: f64,
    psi_eps: f64,
}

/// `(r′, φ′)` on a cap and the partials `∂(r′, φ′)/∂(ρ, ψ)`.
struct CapPoint {
    r: f64,
    phi: f64,
    r_rho: f64,
    r_psi: f64,
    phi_psi: f64,
}

impl Filling {
    pub fn reeb(form: FillingForm) -> Self {
        Filling::Reeb(Arc::new(form))
    }

    pub fn conjugated(g: &CompactDiffeo, inner: Filling) -> Self {
        Filling::Conjugated {
            g: g.clone(),
            g_inv: g.inverse(),
            inner: Arc::new(inner),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Filling::Reeb(f) => f.k,
            Filling::Conjugated { inner, .. } => inner.k(),
            Filling::Glued(g) => g.first.k(),
        }
    }

    /// Half-width (in turns) of the horizontal arc of the boundary around
    /// angle 0.
    pub fn margin(&self) -> f64 {
        match self {
            Filling::Reeb(f) if f.adjusted => HORIZONTAL,
            Filling::Reeb(f) if f.f == Expr::constant(0.0) => 0.5,
            Filling::Reeb(_) => 0.0,
            Filling::Conjugated { inner, .. } => inner.margin(),
            Filling::Glued(g) => g.psi_eps + (0.5 - 2.0 * g.psi_eps) * g.first.margin().min(g.second.margin()),
        }
    }

    /// Starting angle of the boundary holonomy.
    pub fn base_angle(&self) -> f64 {
        match self {
            Filling::Glued(g) => g.psi_eps,
            _ => 0.0,
        }
    }

    /// The periodic path induced on the boundary circle.
    pub fn boundary_path(&self) -> Result<PeriodicPath, FillingError> {
        Ok(match self {
            Filling::Reeb(f) => f.boundary_path()?,
            Filling::Conjugated { g, inner, .. } => holonomy::conjugate(g, &inner.boundary_path()?)?,
            Filling::Glued(gl) => holonomy::concat(&gl.first.boundary_path()?, &gl.second.boundary_path()?)?,
        })
    }

    /// Transports `p` counterclockwise along the boundary line field from
    /// angle `a` to angle `b ≥ a` (turns).
    pub fn transport(&self, p: &[f64], a: f64, b: f64) -> Result<Vec<f64>, FillingError> {
        if p.len() != self.k() {
            return Err(FillingError::Dimension(format!("point of length {}", p.len())));
        }
        let mut x = p.to_vec();
        let mut cur = a;
        while cur < b {
            let base = cur.floor();
            let next = b.min(base + 1.0);
            x = self.transport_unit(&x, cur - base, next - base)?;
            cur = next;
        }
        Ok(x)
    }

    fn transport_unit(&self, p: &[f64], a: f64, b: f64) -> Result<Vec<f64>, FillingError> {
        match self {
            Filling::Reeb(f) => Ok(f.transport(p, a, b)),
            Filling::Conjugated { g, g_inv, inner } => {
                let q = g_inv.eval(p)?;
                Ok(g.eval(&inner.transport_unit(&q, a, b)?)?)
            }
            Filling::Glued(gl) => gl.transport_unit(p, a, b),
        }
    }

    /// One turn of boundary holonomy from [`Filling::base_angle`].
    pub fn boundary_holonomy(&self, p: &[f64]) -> Result<Vec<f64>, FillingError> {
        let a = self.base_angle();
        self.transport(p, a, a + 1.0)
    }

    /// Coefficients in polar disk coordinates `(ρ, ψ)` and the tube
    /// coordinates of the fibre point `p` (pulled back through conjugators).
    pub fn disk_coefficients(&self, rho: f64, psi: f64, p: &[f64]) -> Result<Coefficients, FillingError> {
        match self {
            Filling::Reeb(f) => Ok(match annulus_coords(p) {
                Some((_, y)) => f.coefficients(rho.min(1.0), psi.rem_euclid(1.0), &y),
                None => Coefficients::HORIZONTAL,
            }),
            Filling::Conjugated { g_inv, inner, .. } => inner.disk_coefficients(rho, psi, &g_inv.eval(p)?),
            Filling::Glued(gl) => {
                let (u, v) = (rho * (TAU * psi).cos(), rho * (TAU * psi).sin());
                match gl.cap(u, v) {
                    None => Ok(Coefficients::HORIZONTAL),
                    Some((upper, cp)) => {
                        let c = gl.side(upper).disk_coefficients(cp.r, cp.phi, p)?;
                        Ok(Coefficients {
                            p: c.p,
                            q: c.q * cp.r_rho,
                            s: c.q * cp.r_psi + c.s * cp.phi_psi,
                        })
                    }
                }
            }
        }
    }

    /// The `k × (2+k)` coframe at `(z, p)` in Cartesian coordinates
    /// `(u, v, p₁, …, p_k)`.
    pub fn coframe(&self, z: [f64; 2], p: &[f64]) -> Result<Mat, FillingError> {
        let k = self.k();
        match self {
            Filling::Reeb(f) => Ok(reeb_coframe(f, z, p)),
            Filling::Conjugated { g_inv, inner, .. } => {
                let (q, jac) = g_inv.eval_jacobian(p)?;
                let c = inner.coframe(z, &q)?;
                let mut out = c.clone();
                let fibre = c.columns(2, k) * jac;
                out.columns_mut(2, k).copy_from(&fibre);
                Ok(out)
            }
            Filling::Glued(gl) => {
                let (u, v) = (z[0], z[1]);
                let Some((upper, cp)) = gl.cap(u, v) else { return Ok(horizontal_coframe(k)) };
                let (rho, cs, sn) = (u.hypot(v), (TAU * cp.phi).cos(), (TAU * cp.phi).sin());
                let zz = [cp.r * cs, cp.r * sn];
                let c = gl.side(upper).coframe(zz, p)?;
                // ∂(u′, v′)/∂(r′, φ′) · ∂(r′, φ′)/∂(ρ, ψ) · ∂(ρ, ψ)/∂(u, v)
                let a = [[cs, -TAU * cp.r * sn], [sn, TAU * cp.r * cs]];
                let b = [[cp.r_rho, cp.r_psi], [0.0, cp.phi_psi]];
                let d = [[u / rho, v / rho], [-v / (TAU * rho * rho), u / (TAU * rho * rho)]];
                let ab = mul2(a, b);
                let j = mul2(ab, d);
                let mut out = c.clone();
                for i in 0..k {
                    let (c0, c1) = (c[(i, 0)], c[(i, 1)]);
                    out[(i, 0)] = c0 * j[0][0] + c1 * j[1][0];
                    out[(i, 1)] = c0 * j[0][1] + c1 * j[1][1];
                }
                Ok(out)
            }
        }
    }

    /// The plane field on `[−1, 1]² × fibre`.
    pub fn plane_field(&self, fibre: &BoxRegion) -> PlaneField {
        let k = self.k();
        let mut lo = vec![-1.0, -1.0];
        let mut hi = vec![1.0, 1.0];
        lo.extend_from_slice(&fibre.lo);
        hi.extend_from_slice(&fibre.hi);
        let me = self.clone();
        NormalCoframe::from_fn(BoxRegion::new(lo, hi), move |x| {
            me.coframe([x[0], x[1]], &x[2..])
                .unwrap_or_else(|_| Mat::from_element(k, k + 2, f64::NAN))
        })
        .to_field()
    }
}

fn mul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn horizontal_coframe(k: usize) -> Mat {
    Mat::from_fn(k, k + 2, |i, j| if j == i + 2 { 1.0 } else { 0.0 })
}

/// Rows `ω, dy₁, …, dy_{k−1}` inside the tube, `dp₁, …, dp_k` outside.
fn reeb_coframe(form: &FillingForm, z: [f64; 2], p: &[f64]) -> Mat {
    let k = form.k;
    let Some((rho, y)) = annulus_coords(p) else { return horizontal_coframe(k) };
    let a = form.cartesian(z[0], z[1], &y);
    let mut m = Mat::zeros(k, k + 2);
    let w = a[2] / (TAU * rho * rho);
    m[(0, 0)] = a[0];
    m[(0, 1)] = a[1];
    m[(0, 2)] = -w * p[1];
    m[(0, 3)] = w * p[0];
    m[(1, 2)] = 2.0 * p[0] / rho;
    m[(1, 3)] = 2.0 * p[1] / rho;
    for j in 2..k {
        m[(j, j + 2)] = 2.0;
    }
    m
}

impl GluedFilling {
    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn first(&self) -> &Filling {
        &self.first
    }

    pub fn second(&self) -> &Filling {
        &self.second
    }

    fn side(&self, upper: bool) -> &Filling {
        if upper {
            &self.first
        } else {
            &self.second
        }
    }

    /// Cap coordinates of `z = (u, v)`, or `None` on the band.
    fn cap(&self, u: f64, v: f64) -> Option<(bool, CapPoint)> {
        if v.abs() <= self.eps {
            return None;
        }
        let upper = v > 0.0;
        let rho = u.hypot(v);
        let psi = (v.atan2(u) / TAU).rem_euclid(1.0);
        let sn = (TAU * psi).sin().abs();
        let m = self.eps / sn;
        let m_psi = -self.eps * TAU * (TAU * psi).cos() / (sn * sn) * if upper { 1.0 } else { -1.0 };
        let start = if upper { self.psi_eps } else { 0.5 + self.psi_eps };
        let phi_psi = 1.0 / (0.5 - 2.0 * self.psi_eps);
        Some((
            upper,
            CapPoint {
                r: (rho - m) / (1.0 - m),
                phi: ((psi - start) * phi_psi).clamp(0.0, 1.0),
                r_rho: 1.0 / (1.0 - m),
                r_psi: m_psi * (rho - 1.0) / ((1.0 - m) * (1.0 - m)),
                phi_psi,
            },
        ))
    }

    fn transport_unit(&self, p: &[f64], a: f64, b: f64) -> Result<Vec<f64>, FillingError> {
        let pe = self.psi_eps;
        let scale = 1.0 / (0.5 - 2.0 * pe);
        let arcs = [(pe, 0.5 - pe, true), (0.5 + pe, 1.0 - pe, false)];
        let mut x = p.to_vec();
        for (lo, hi, upper) in arcs {
            let (s, e) = (a.max(lo), b.min(hi));
            if s < e {
                x = self.side(upper).transport(&x, (s - lo) * scale, (e - lo) * scale)?;
            }
        }
        Ok(x)
    }

    /// Checks that the coefficients are exactly `(1, 0, 0)` on the band, on
    /// the cap sides of the seam (`r′ ≤ 0.2`), and on the boundary circle
    /// within `2ε` of the real axis. `samples` angles per arc.
    pub fn seam_check(&self, p_samples: &[Vec<f64>], samples: usize) -> Result<SeamReport, FillingError> {
        let me = Filling::Glued(Arc::new(self.clone()));
        let mut checked = 0;
        let mut witnesses = Vec::new();
        let mut record = |z: [f64; 2], p: &[f64], c: Coefficients| {
            checked += 1;
            if !c.is_horizontal() && witnesses.len() < 16 {
                let mut w = z.to_vec();
                w.extend_from_slice(p);
                witnesses.push(w);
            }
        };
        let eval = |u: f64, v: f64, p: &[f64]| {
            let psi = (v.atan2(u) / TAU).rem_euclid(1.0);
            me.disk_coefficients(u.hypot(v), psi, p)
        };
        for p in p_samples {
            for i in 0..=samples {
                let t = i as f64 / samples as f64;
                for side in [1.0, -1.0] {
                    // band interior and edge
                    for frac in [0.0, 0.5, 1.0] {
                        let v = side * frac * self.eps;
                        let umax = (1.0 - v * v).sqrt();
                        let u = -umax + 2.0 * umax * t;
                        record([u, v], p, eval(u, v, p)?);
                    }
                    // cap side of the seam: r′ ∈ (0, 0.2]
                    let lo = if side > 0.0 { self.psi_eps } else { 0.5 + self.psi_eps };
                    let psi = lo + (0.5 - 2.0 * self.psi_eps) * (0.02 + 0.96 * t);
                    let m = self.eps / (TAU * psi).sin().abs();
                    for rp in [0.01, 0.1, 0.2] {
                        let rho = m + rp * (1.0 - m);
                        let (u, v) = (rho * (TAU * psi).cos(), rho * (TAU * psi).sin());
                        record([u, v], p, eval(u, v, p)?);
                    }
                }
                // boundary arcs near ±1 with |Im z| ≤ 2ε
                let psi2 = (2.0 * self.eps).min(1.0).asin() / TAU;
                for centre in [0.0, 0.5] {
                    let psi = centre - psi2 + 2.0 * psi2 * t;
                    let (u, v) = ((TAU * psi).cos(), (TAU * psi).sin());
                    record([u, v], p, eval(u, v, p)?);
                }
            }
        }
        let exact = witnesses.is_empty();
        Ok(SeamReport {
            checked,
            exact,
            witnesses,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamReport {
    pub checked: usize,
    pub exact: bool,
    pub witnesses: Vec<Vec<f64>>,
}

/// Largest band half-width `ε` with both boundaries horizontal on
/// `|Im z| ≤ 2ε`.
pub fn max_band(first: &Filling, second: &Filling) -> f64 {
    (PI * first.margin().min(second.margin())).sin() / 2.0
}

/// Glues `first` on the upper half-disk and `second` on the lower one, with
/// the horizontal foliation on `|Im z| ≤ ε`. The boundary path is
/// `first.boundary_path() ∗ second.boundary_path()`.
pub fn glue_concat(first: &Filling, second: &Filling, eps: f64) -> Result<Filling, FillingError> {
    if first.k() != second.k() {
        return Err(FillingError::Dimension(format!("k = {} and {}", first.k(), second.k())));
    }
    if !(eps > 0.0 && eps < 0.25) {
        return Err(FillingError::BandCondition {
            margin: 0.0,
            needed: eps,
        });
    }
    let needed = 2.0 * (2.0 * eps).asin() / TAU;
    let margin = first.margin().min(second.margin());
    if margin < needed {
        return Err(FillingError::BandCondition { margin, needed });
    }
    Ok(Filling::Glued(Arc::new(GluedFilling {
        first: first.clone(),
        second: second.clone(),
        eps,
        psi_eps: eps.asin() / TAU,
    })))
}

/// Glues fillings in application order (first applied first), as a balanced
/// tree with half the largest admissible band at each seam.
pub fn glue_all(pieces: &[Filling]) -> Result<Filling, FillingError> {
    match pieces {
        [] => Err(FillingError::Dimension("no pieces".into())),
        [one] => Ok(one.clone()),
        _ => {
            let (a, b) = pieces.split_at(pieces.len() / 2);
            let (fa, fb) = (glue_all(a)?, glue_all(b)?);
            let eps = 0.5 * max_band(&fa, &fb);
            glue_concat(&fa, &fb, eps)
        }
    }
}

/// Fills a product of conjugates `∏ cᵢ h^{±1} cᵢ⁻¹` (first factor outermost)
/// by gluing conjugated Reeb fillings of `h` and `h⁻¹`. With six commutator
/// pairs this is the product of 24 fillable curves.
pub fn conjugate_word_filling(word: &ConjugateWord, form: &FillingForm) -> Result<Filling, FillingError> {
    let form = if form.adjusted { form.clone() } else { form.adjusted() };
    let pos = Filling::reeb(form.clone());
    let neg = Filling::reeb(form.inverse());
    let pieces: Vec<Filling> = word
        .factors
        .iter()
        .rev()
        .map(|f| {
            let base = match f.core {
                Core::H => pos.clone(),
                Core::HInv => neg.clone(),
            };
            if f.conjugator.is_empty() {
                base
            } else {
                Filling::conjugated(&f.conjugator, base)
            }
        })
        .collect();
    glue_all(&pieces)
}

/// `max |hol(p) − target(p)|` over the points.
pub fn holonomy_error(filling: &Filling, target: &CompactDiffeo, points: &[Vec<f64>]) -> Result<f64, FillingError> {
    points
        .par_iter()
        .map(|p| Ok(crate::linalg::dist(&filling.boundary_holonomy(p)?, &target.eval(p)?)))
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
}

/// One sampled clause of the product-structure check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClauseReport {
    pub checked: usize,
    pub failures: usize,
    /// Smallest margin seen (largest deviation for the projection clause).
    pub worst: f64,
    pub witnesses: Vec<Vec<f64>>,
}

impl ClauseReport {
    fn new(worst: f64) -> Self {
        ClauseReport {
            checked: 0,
            failures: 0,
            worst,
            witnesses: Vec::new(),
        }
    }

    fn fail(&mut self, x: &[f64]) {
        self.failures += 1;
        if self.witnesses.len() < 32 {
            self.witnesses.push(x.to_vec());
        }
    }

    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

/// Sampled product-structure conditions of a plane field on `D² × ℝᵏ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductReport {
    /// Outside `D² × C` the field is `ker d(pr_{ℝᵏ})`.
    pub projection_outside: ClauseReport,
    /// Transverse to the cylinders `ρS¹ × ℝᵏ` near `ρ = 1`.
    pub boundary_transverse: ClauseReport,
    /// The induced line field on the cylinder is transverse to the fibres.
    pub line_field_transverse: ClauseReport,
    /// Transverse to `{z} × ℝᵏ` for all `z ∈ D²`.
    pub fibre_transverse: ClauseReport,
    pub tolerance: f64,
}

impl ProductReport {
    pub fn all_pass(&self) -> bool {
        self.projection_outside.pass()
            && self.boundary_transverse.pass()
            && self.line_field_transverse.pass()
            && self.fibre_transverse.pass()
    }
}

/// Disk samples on `res` radii in `(0, 1]` and `4 res` angles.
fn polar_samples(res: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for i in 1..=res {
        let r = i as f64 / res as f64;
        for j in 0..4 * res {
            let a = TAU * (j as f64 + 0.25) / (4 * res) as f64;
            out.push([r * a.cos(), r * a.sin()]);
        }
    }
    out
}

/// Samples the product-structure conditions of `field` (on a domain
/// containing `D² × fibre`) with compact set `support ⊂ ℝᵏ`. Fibre points
/// come from a `res`-grid of the field's fibre box.
pub fn product_structure_check(field: &PlaneField, support: &BoxRegion, res: usize, tolerance: f64) -> ProductReport {
    let n = field.n();
    let k = n - 2;
    let dom = field.domain();
    let fibre_box = BoxRegion::new(dom.lo[2..].to_vec(), dom.hi[2..].to_vec());
    let fibres = fibre_box.grid(res);
    let inside: Vec<&Vec<f64>> = fibres.iter().filter(|p| support.contains(p)).collect();
    let outside: Vec<&Vec<f64>> = fibres.iter().filter(|p| !support.contains(p)).collect();
    let disk = polar_samples(res.max(4));
    let point = |z: &[f64; 2], p: &[f64]| {
        let mut x = z.to_vec();
        x.extend_from_slice(p);
        x
    };
    let mut report = ProductReport {
        projection_outside: ClauseReport::new(0.0),
        boundary_transverse: ClauseReport::new(f64::INFINITY),
        line_field_transverse: ClauseReport::new(f64::INFINITY),
        fibre_transverse: ClauseReport::new(f64::INFINITY),
        tolerance,
    };
    let frame = |x: &[f64]| field.frame(x).ok().filter(|f| f.iter().all(|v| v.is_finite()));

    for z in &disk {
        for p in &outside {
            let x = point(z, p);
            let c = &mut report.projection_outside;
            c.checked += 1;
            match frame(&x) {
                Some(f) => {
                    let dev = f.rows(2, k).norm();
                    c.worst = c.worst.max(dev);
                    if dev > tolerance {
                        c.fail(&x);
                    }
                }
                None => c.fail(&x),
            }
        }
    }

    for z in &disk {
        for p in &inside {
            let x = point(z, p);
            let f = frame(&x);
            let c = &mut report.fibre_transverse;
            c.checked += 1;
            match &f {
                Some(f) => {
                    let s = sigma_min(&f.rows(0, 2).into_owned());
                    c.worst = c.worst.min(s);
                    if s < tolerance {
                        c.fail(&x);
                    }
                }
                None => c.fail(&x),
            }
            let rho = z[0].hypot(z[1]);
            if rho < BOUNDARY_BAND + 1e-9 {
                continue;
            }
            let (er, ep) = ([z[0] / rho, z[1] / rho], [-z[1] / rho, z[0] / rho]);
            let Some(f) = f else {
                report.boundary_transverse.fail(&x);
                report.line_field_transverse.fail(&x);
                continue;
            };
            // dρ and ρ·dφ restricted to the plane, in the frame basis
            let dr = [er[0] * f[(0, 0)] + er[1] * f[(1, 0)], er[0] * f[(0, 1)] + er[1] * f[(1, 1)]];
            let dp = [ep[0] * f[(0, 0)] + ep[1] * f[(1, 0)], ep[0] * f[(0, 1)] + ep[1] * f[(1, 1)]];
            let nr = dr[0].hypot(dr[1]);
            let c = &mut report.boundary_transverse;
            c.checked += 1;
            c.worst = c.worst.min(nr);
            if nr < tolerance {
                c.fail(&x);
                report.line_field_transverse.fail(&x);
                continue;
            }
            // line τ ∩ ker dρ spanned by frame·(−dr₁, dr₀)/|dr|
            let l = (-dr[1] * dp[0] + dr[0] * dp[1]) / nr;
            let c = &mut report.line_field_transverse;
            c.checked += 1;
            c.worst = c.worst.min(l.abs());
            if l.abs() < tolerance {
                c.fail(&x);
            }
        }
    }
    report
}

/// Tangent direction projected onto `ker ω` when tracing leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeafDirection {
    Angular,
    Radial,
}

/// A point of a traced leaf in the slice `x = const`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafSample {
    pub arc: f64,
    pub u: f64,
    pub v: f64,
    pub theta: f64,
    pub r: f64,
    pub phi: f64,
}

/// Traces a unit-speed curve in the leaf through `(r, φ, θ)` of the slice
/// `x`, tangent to the projection of `∂_φ` (or `∂_r`) onto `ker ω` in the
/// Euclidean metric of `(u, v, θ)`. RK4 with step `step`.
pub fn leaf_trace(
    form: &FillingForm,
    start: [f64; 3],
    x: &[f64],
    length: f64,
    step: f64,
    direction: LeafDirection,
) -> Result<Vec<LeafSample>, FillingError> {
    if x.len() != form.k - 1 {
        return Err(FillingError::Dimension(format!("slice point of length {}", x.len())));
    }
    if !(step > 0.0) {
        return Err(FillingError::StepUnderflow { at: start.to_vec() });
    }
    let [r0, phi0, theta0] = start;
    let mut q = [r0 * (TAU * phi0).cos(), r0 * (TAU * phi0).sin(), theta0];
    let velocity = |q: [f64; 3]| -> Result<[f64; 3], FillingError> {
        let (u, v) = (q[0], q[1]);
        let r = u.hypot(v);
        if r < 1e-9 {
            return Err(FillingError::StepUnderflow { at: q.to_vec() });
        }
        let d = match direction {
            LeafDirection::Angular => [-v / r, u / r, 0.0],
            LeafDirection::Radial => [u / r, v / r, 0.0],
        };
        let a = form.cartesian(u, v, x);
        let aa: f64 = a.iter().map(|c| c * c).sum();
        let ad: f64 = a.iter().zip(&d).map(|(p, q)| p * q).sum();
        let w = [0, 1, 2].map(|i| d[i] - ad / aa * a[i]);
        let nw = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if nw < 1e-9 {
            return Err(FillingError::StepUnderflow { at: q.to_vec() });
        }
        Ok(w.map(|c| c / nw))
    };
    let sample = |arc: f64, q: [f64; 3]| LeafSample {
        arc,
        u: q[0],
        v: q[1],
        theta: q[2],
        r: q[0].hypot(q[1]),
        phi: (q[1].atan2(q[0]) / TAU).rem_euclid(1.0),
    };
    let n = (length / step).ceil() as usize;
    let mut out = Vec::with_capacity(n + 1);
    out.push(sample(0.0, q));
    let add = |q: [f64; 3], k: [f64; 3], h: f64| [q[0] + h * k[0], q[1] + h * k[1], q[2] + h * k[2]];
    for i in 0..n {
        let h = step.min(length - i as f64 * step);
        let k1 = velocity(q)?;
        let k2 = velocity(add(q, k1, h / 2.0))?;
        let k3 = velocity(add(q, k2, h / 2.0))?;
        let k4 = velocity(add(q, k3, h))?;
        q = [0, 1, 2].map(|j| q[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]));
        out.push(sample(i as f64 * step + h, q));
    }
    Ok(out)
}

/// CSV with header `arc,u,v,theta,r,phi`.
pub fn leaf_trace_csv(samples: &[LeafSample]) -> String {
    let mut out = String::from("arc,u,v,theta,r,phi\n");
    for s in samples {
        out.push_str(&format!(
            "{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}\n",
            s.arc, s.u, s.v, s.theta, s.r, s.phi
        ));
    }
    out
}

/// JSON form description; missing profiles default to the standard ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormSpec {
    pub k: usize,
    pub f: Expr,
    pub g: Expr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_half: Option<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<Expr>,
    #[serde(default)]
    pub adjusted: bool,
}

impl FormSpec {
    pub fn standard(k: usize) -> Self {
        let (f, g) = standard_slope_and_cutoff(k, 0.8);
        FormSpec {
            k,
            f,
            g,
            lambda0: None,
            lambda_half: None,
            lambda1: None,
            adjusted: false,
        }
    }

    pub fn profiles(&self) -> Result<PartitionProfiles, FillingError> {
        let std = PartitionProfiles::standard();
        match (&self.lambda0, &self.lambda_half, &self.lambda1) {
            (None, None, None) => Ok(std),
            (a, b, c) => PartitionProfiles::new(
                a.clone().unwrap_or_else(|| std.lambda0().clone()),
                b.clone().unwrap_or_else(|| std.lambda_half().clone()),
                c.clone().unwrap_or_else(|| std.lambda1().clone()),
            ),
        }
    }

    /// Checked construction.
    pub fn build(&self) -> Result<FillingForm, FillingError> {
        let form = explicit_form(self.k, &self.f, &self.g, &self.profiles()?)?;
        Ok(if self.adjusted { form.adjusted() } else { form })
    }

    /// Construction without the support-relation checks.
    pub fn build_unchecked(&self) -> Result<FillingForm, FillingError> {
        let p = self.profiles()?;
        Ok(FillingForm::from_parts(self.k, self.f.clone(), self.g.clone(), p, self.adjusted))
    }
}

/// Fibre box `[−1.5, 1.5]² × [−0.5, 0.5]^{k−2}` of the tube.
pub fn tube_box(k: usize) -> BoxRegion {
    annulus_box(k)
}
