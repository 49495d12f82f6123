//! Lattice triangulations of boxes in ℝⁿ, general position with respect to
//! a plane field, jiggling, and the shadow decomposition of a simplex.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{nullspace, sigma_min, BoxRegion, Mat};
use crate::planefield::{graph_map_between, FieldError, PlaneField};

/// Margins at or below this value count as failing.
pub const MARGIN_FLOOR: f64 = 1e-12;

pub const DEFAULT_SAMPLES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("field evaluation failed on simplex {simplex}: {source}")]
    Field {
        simplex: usize,
        #[source]
        source: FieldError,
    },
    #[error("simplex is not in general position at {x:?} (margin {margin:e})")]
    GeneralPosition { x: Vec<f64>, margin: f64 },
    #[error("shadow of the simplex is not a simplicial sphere: {0}")]
    Shadow(String),
}

/// A nondegenerate affine simplex given by its ordered vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineSimplex {
    pub vertices: Vec<Vec<f64>>,
}

impl AffineSimplex {
    pub fn new(vertices: Vec<Vec<f64>>) -> Result<Self, GeometryError> {
        let s = AffineSimplex { vertices };
        if s.vertices.is_empty() {
            return Err(GeometryError::InvalidInput("simplex without vertices".into()));
        }
        let n = s.n();
        if s.vertices.iter().any(|v| v.len() != n) || s.dim() > n {
            return Err(GeometryError::InvalidInput("inconsistent vertex dimensions".into()));
        }
        if s.dim() > 0 && sigma_min(&s.edge_matrix()) <= 1e-14 {
            return Err(GeometryError::InvalidInput("degenerate simplex".into()));
        }
        Ok(s)
    }

    /// Ambient dimension.
    pub fn n(&self) -> usize {
        self.vertices[0].len()
    }

    /// Simplex dimension.
    pub fn dim(&self) -> usize {
        self.vertices.len() - 1
    }

    /// Columns `v_i − v_0`.
    pub fn edge_matrix(&self) -> Mat {
        let v0 = &self.vertices[0];
        Mat::from_fn(self.n(), self.dim(), |r, c| self.vertices[c + 1][r] - v0[r])
    }

    pub fn point(&self, bary: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.n()];
        for (w, v) in bary.iter().zip(&self.vertices) {
            for i in 0..p.len() {
                p[i] += w * v[i];
            }
        }
        p
    }

    pub fn centroid(&self) -> Vec<f64> {
        let w = 1.0 / self.vertices.len() as f64;
        self.point(&vec![w; self.vertices.len()])
    }

    /// Points with barycentric coordinates in `(1/m)ℤ`; `m = 0` gives the
    /// centroid only.
    pub fn barycentric_samples(&self, m: usize) -> Vec<Vec<f64>> {
        if m == 0 {
            return vec![self.centroid()];
        }
        barycentric_grid(self.vertices.len(), m)
            .iter()
            .map(|b| self.point(b))
            .collect()
    }

    pub fn bounding_box(&self) -> BoxRegion {
        BoxRegion::bounding(&self.vertices)
    }

    pub fn face(&self, idx: &[usize]) -> AffineSimplex {
        AffineSimplex {
            vertices: idx.iter().map(|&i| self.vertices[i].clone()).collect(),
        }
    }

    /// Barycentric coordinates of `x` (least squares when `dim < n`).
    pub fn barycentric(&self, x: &[f64]) -> Vec<f64> {
        let e = self.edge_matrix();
        let rhs = Mat::from_fn(self.n(), 1, |r, _| x[r] - self.vertices[0][r]);
        let sol = (e.transpose() * &e)
            .lu()
            .solve(&(e.transpose() * rhs))
            .expect("nondegenerate simplex");
        let mut b = vec![1.0 - sol.iter().sum::<f64>()];
        b.extend(sol.iter());
        b
    }
}

/// All `p`-element combinations of `0..n` in lexicographic order.
pub fn combinations(n: usize, p: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, p: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == p {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, p, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, p, &mut Vec::new(), &mut out);
    out
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = (0..n).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            return out;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(cur.clone());
    }
}

fn barycentric_grid(count: usize, m: usize) -> Vec<Vec<f64>> {
    fn rec(left: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for i in (0..=left).rev() {
            cur.push(i);
            rec(left - i, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut ints = Vec::new();
    rec(m, count, &mut Vec::new(), &mut ints);
    ints.into_iter()
        .map(|v| v.into_iter().map(|i| i as f64 / m as f64).collect())
        .collect()
}

/// Integer box `[lo_i, hi_i]` in ℤⁿ.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntBox {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

impl IntBox {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Self {
        IntBox { lo, hi }
    }

    pub fn cube(n: usize, lo: i64, hi: i64) -> Self {
        IntBox::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty() || self.lo.iter().zip(&self.hi).any(|(l, h)| l >= h)
    }
}

/// The permutation triangulation of `box` subdivided at scale `1/l`, with
/// per-vertex displacements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeTriangulation {
    pub scale: u32,
    #[serde(rename = "box")]
    pub bounds: IntBox,
    /// Nonzero displacements keyed by vertex index.
    pub offsets: BTreeMap<usize, Vec<f64>>,
    pub epsilon: f64,
    #[serde(skip)]
    simplices: Vec<Vec<usize>>,
}

impl LatticeTriangulation {
    pub fn n(&self) -> usize {
        self.bounds.dim()
    }

    /// Lattice points per axis.
    fn counts(&self) -> Vec<usize> {
        let l = self.scale as i64;
        self.bounds
            .lo
            .iter()
            .zip(&self.bounds.hi)
            .map(|(lo, hi)| (l * (hi - lo) + 1) as usize)
            .collect()
    }

    pub fn vertex_count(&self) -> usize {
        self.counts().iter().product()
    }

    fn index_of(&self, lattice: &[usize]) -> usize {
        let counts = self.counts();
        let mut idx = 0;
        for i in (0..lattice.len()).rev() {
            idx = idx * counts[i] + lattice[i];
        }
        idx
    }

    fn lattice_of(&self, mut idx: usize) -> Vec<usize> {
        self.counts()
            .iter()
            .map(|c| {
                let r = idx % c;
                idx /= c;
                r
            })
            .collect()
    }

    /// Undisplaced position of a vertex.
    pub fn base_vertex(&self, idx: usize) -> Vec<f64> {
        let l = self.scale as f64;
        self.lattice_of(idx)
            .iter()
            .zip(&self.bounds.lo)
            .map(|(j, lo)| *lo as f64 + *j as f64 / l)
            .collect()
    }

    pub fn offset(&self, idx: usize) -> Vec<f64> {
        self.offsets
            .get(&idx)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.n()])
    }

    pub fn vertex(&self, idx: usize) -> Vec<f64> {
        let mut v = self.base_vertex(idx);
        if let Some(o) = self.offsets.get(&idx) {
            for i in 0..v.len() {
                v[i] += o[i];
            }
        }
        v
    }

    fn set_offset(&mut self, idx: usize, o: Vec<f64>) {
        if o.iter().all(|c| *c == 0.0) {
            self.offsets.remove(&idx);
        } else {
            self.offsets.insert(idx, o);
        }
    }

    /// Vertex indices of the top simplices.
    pub fn simplices(&self) -> &[Vec<usize>] {
        &self.simplices
    }

    pub fn simplex(&self, id: usize) -> AffineSimplex {
        AffineSimplex {
            vertices: self.simplices[id].iter().map(|&v| self.vertex(v)).collect(),
        }
    }

    fn base_simplex(&self, id: usize) -> AffineSimplex {
        AffineSimplex {
            vertices: self.simplices[id].iter().map(|&v| self.base_vertex(v)).collect(),
        }
    }

    fn build_simplices(&mut self) {
        let n = self.n();
        let counts = self.counts();
        let cells: Vec<usize> = counts.iter().map(|c| c - 1).collect();
        let total: usize = cells.iter().product();
        let perms = permutations(n);
        let mut out = Vec::with_capacity(total * perms.len());
        for mut cell in 0..total {
            let corner: Vec<usize> = cells
                .iter()
                .map(|c| {
                    let r = cell % c;
                    cell /= c;
                    r
                })
                .collect();
            for p in &perms {
                let mut cur = corner.clone();
                let mut s = vec![self.index_of(&cur)];
                for &axis in p {
                    cur[axis] += 1;
                    s.push(self.index_of(&cur));
                }
                out.push(s);
            }
        }
        self.simplices = out;
    }

    /// Rebuilds the simplex list after deserialization.
    pub fn rebuild(mut self) -> Self {
        self.build_simplices();
        self
    }

    /// Checks the jiggling invariants: offsets shorter than `epsilon` and
    /// every top simplex keeps the orientation of its undisplaced copy.
    pub fn verify(&self) -> Result<(), GeometryError> {
        for (i, o) in &self.offsets {
            if crate::linalg::norm(o) >= self.epsilon {
                return Err(GeometryError::InvalidInput(format!(
                    "offset of vertex {i} is not shorter than epsilon"
                )));
            }
        }
        for id in 0..self.simplices.len() {
            let d0 = self.base_simplex(id).edge_matrix().determinant();
            let d1 = self.simplex(id).edge_matrix().determinant();
            if d0.signum() != d1.signum() || d1 == 0.0 {
                return Err(GeometryError::InvalidInput(format!(
                    "simplex {id} changed orientation"
                )));
            }
        }
        Ok(())
    }

    /// Sum of the volumes of the top simplices.
    pub fn total_volume(&self) -> f64 {
        let fact: f64 = (1..=self.n()).map(|i| i as f64).product();
        (0..self.simplices.len())
            .map(|id| self.simplex(id).edge_matrix().determinant().abs() / fact)
            .sum()
    }

    /// Minimum edge length of the undisplaced lattice.
    pub fn min_edge(&self) -> f64 {
        1.0 / self.scale as f64
    }

    /// Ids of the top simplices whose bounding box meets `k`.
    pub fn meeting(&self, k: &BoxRegion) -> Vec<usize> {
        (0..self.simplices.len())
            .filter(|&id| self.simplex(id).bounding_box().intersects(k))
            .collect()
    }
}

pub fn standard_triangulation(l: u32, bounds: IntBox) -> Result<LatticeTriangulation, GeometryError> {
    if l == 0 {
        return Err(GeometryError::InvalidInput("scale must be at least 1".into()));
    }
    if bounds.is_empty() || bounds.lo.len() != bounds.hi.len() {
        return Err(GeometryError::InvalidInput("empty box".into()));
    }
    let mut t = LatticeTriangulation {
        scale: l,
        bounds,
        offsets: BTreeMap::new(),
        epsilon: 0.0,
        simplices: Vec::new(),
    };
    t.build_simplices();
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralPositionReport {
    /// Smallest singular value over all tested (point, face) pairs.
    pub margin: f64,
    /// Barycentric grid resolution.
    pub samples: usize,
    pub pass: bool,
    /// Vertex indices (within the simplex) of the worst face.
    pub worst_face: Vec<usize>,
    pub witness: Vec<f64>,
    /// `margin − κ·max‖E‖` with κ the largest graph norm between
    /// neighbouring samples; absent when fewer than two samples are taken.
    pub interpolated_margin: Option<f64>,
}

fn sigma_min_small(m: &Mat) -> f64 {
    if m.nrows() == 2 && m.ncols() == 2 {
        let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let f = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        let disc = (f * f - 4.0 * det * det).max(0.0).sqrt();
        // smaller root of s^2 - f s + det^2 via the stable product form
        let big = 0.5 * (f + disc);
        if big <= 0.0 {
            0.0
        } else {
            (det * det / big).sqrt()
        }
    } else {
        sigma_min(m)
    }
}

/// Minimum over the faces of σ_min of the projected edge matrices at one
/// point; `faces` lists vertex indices of the (n−2)-faces to test.
fn point_margin(normal: &Mat, verts: &[Vec<f64>], faces: &[Vec<usize>]) -> (f64, usize) {
    let n = normal.nrows();
    let mut worst = (f64::INFINITY, 0);
    for (fi, f) in faces.iter().enumerate() {
        let v0 = &verts[f[0]];
        let e = Mat::from_fn(n, f.len() - 1, |r, c| verts[f[c + 1]][r] - v0[r]);
        let s = sigma_min_small(&(normal.transpose() * e));
        if s < worst.0 {
            worst = (s, fi);
        }
    }
    worst
}

fn top_faces(n: usize) -> Vec<Vec<usize>> {
    combinations(n + 1, n - 1)
}

pub fn is_general_position(
    simplex: &AffineSimplex,
    field: &PlaneField,
    samples: usize,
) -> Result<GeneralPositionReport, GeometryError> {
    general_position_with_id(simplex, field, samples, 0)
}

fn general_position_with_id(
    simplex: &AffineSimplex,
    field: &PlaneField,
    samples: usize,
    id: usize,
) -> Result<GeneralPositionReport, GeometryError> {
    let n = simplex.n();
    if simplex.dim() != n || field.n() != n {
        return Err(GeometryError::InvalidInput("expected a top-dimensional simplex".into()));
    }
    let faces = top_faces(n);
    let pts = simplex.barycentric_samples(samples);
    let mut margin = f64::INFINITY;
    let mut worst_face = 0;
    let mut witness = pts[0].clone();
    let mut frames = Vec::with_capacity(pts.len());
    for p in &pts {
        let c = field
            .normal(p)
            .map_err(|source| GeometryError::Field { simplex: id, source })?;
        let (m, f) = point_margin(&c, &simplex.vertices, &faces);
        if m < margin {
            margin = m;
            worst_face = f;
            witness = p.clone();
        }
        frames.push(c);
    }
    let interpolated_margin = if pts.len() > 1 && !field.is_constant() {
        let spacing = 1.0 / samples.max(1) as f64;
        let bary = barycentric_grid(n + 1, samples.max(1));
        let mut kappa: f64 = 0.0;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d: f64 = bary[i].iter().zip(&bary[j]).map(|(a, b)| (a - b).abs()).sum();
                if d > 2.0 * spacing + 1e-12 {
                    continue;
                }
                let bi = crate::linalg::complement(&frames[i]);
                let bj = crate::linalg::complement(&frames[j]);
                if let Some(g) = graph_map_between(&bi, &bj) {
                    kappa = kappa.max(g.norm);
                } else {
                    kappa = f64::INFINITY;
                }
            }
        }
        let emax = faces
            .iter()
            .map(|f| crate::linalg::op_norm(&simplex.face(f).edge_matrix()))
            .fold(0.0, f64::max);
        Some(margin - kappa * emax)
    } else if pts.len() > 1 {
        Some(margin)
    } else {
        None
    };
    Ok(GeneralPositionReport {
        margin,
        samples,
        pass: margin > MARGIN_FLOOR,
        worst_face: faces[worst_face].clone(),
        witness,
        interpolated_margin,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangulationReport {
    /// `(simplex id, margin)` for every top simplex meeting K.
    pub margins: Vec<(usize, f64)>,
    pub min_margin: f64,
    pub samples: usize,
    pub pass: bool,
    pub failing: Vec<usize>,
}

/// Certifies every top simplex meeting `k`; passing needs margin ≥ `threshold`
/// (and always above the degeneracy floor).
pub fn certify(
    t: &LatticeTriangulation,
    field: &PlaneField,
    k: &BoxRegion,
    samples: usize,
    threshold: f64,
) -> Result<TriangulationReport, GeometryError> {
    let ids = t.meeting(k);
    let margins = ids
        .par_iter()
        .map(|&id| general_position_with_id(&t.simplex(id), field, samples, id).map(|r| (id, r.margin)))
        .collect::<Result<Vec<_>, _>>()?;
    let failing: Vec<usize> = margins
        .iter()
        .filter(|(_, m)| !(*m > MARGIN_FLOOR && *m >= threshold))
        .map(|(id, _)| *id)
        .collect();
    let min_margin = margins.iter().map(|(_, m)| *m).fold(f64::INFINITY, f64::min);
    Ok(TriangulationReport {
        pass: failing.is_empty(),
        margins,
        min_margin,
        samples,
        failing,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JiggleParams {
    pub epsilon: f64,
    pub seed: u64,
    pub max_iters: usize,
    /// Required margin for every simplex meeting K.
    pub min_margin: f64,
    pub samples: usize,
    /// Candidate offsets tried per vertex repair.
    pub candidates: usize,
}

impl JiggleParams {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        JiggleParams {
            epsilon,
            seed,
            max_iters: 50,
            min_margin: 1e-3,
            samples: DEFAULT_SAMPLES,
            candidates: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JiggleOutcome {
    pub triangulation: LatticeTriangulation,
    pub iterations: usize,
    pub min_margin: f64,
    pub max_displacement: f64,
    pub certified: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Error)]
#[error("jiggling failed after {iterations} iterations: {} simplices below margin, best {best_margin:e}", offending.len())]
pub struct JiggleFailure {
    pub iterations: usize,
    pub offending: Vec<usize>,
    pub best_margin: f64,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum JiggleError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Failed(#[from] JiggleFailure),
}

fn ball_sample(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r2: f64 = v.iter().map(|c| c * c).sum();
        if r2 <= 1.0 && r2 > 0.0 {
            return v.into_iter().map(|c| c * radius).collect();
        }
    }
}

/// Seeded search for displacements (< ε) putting every top simplex meeting
/// `k` in general position with margin at least `params.min_margin`.
pub fn jiggle(
    t: &LatticeTriangulation,
    field: &PlaneField,
    k: &BoxRegion,
    params: &JiggleParams,
) -> Result<JiggleOutcome, JiggleError> {
    let n = t.n();
    if field.n() != n || k.dim() != n {
        return Err(GeometryError::InvalidInput("dimension mismatch".into()).into());
    }
    if !(params.epsilon >= 0.0) || params.epsilon >= 0.5 * t.min_edge() {
        return Err(GeometryError::InvalidInput(
            "epsilon must be nonnegative and below half the minimum edge length".into(),
        )
        .into());
    }
    let mut t = t.clone();
    t.epsilon = params.epsilon;
    let target = params.min_margin;
    let report = certify(&t, field, k, params.samples, target)?;
    let done = |t: LatticeTriangulation, iterations: usize, r: &TriangulationReport| JiggleOutcome {
        max_displacement: t
            .offsets
            .values()
            .map(|o| crate::linalg::norm(o))
            .fold(0.0, f64::max),
        triangulation: t,
        iterations,
        min_margin: r.min_margin,
        certified: r.margins.len(),
    };
    if report.pass {
        return Ok(done(t, 0, &report));
    }
    if params.epsilon == 0.0 {
        return Err(JiggleFailure {
            iterations: 0,
            offending: report.failing,
            best_margin: report.min_margin,
            reason: "no displacement allowed".into(),
        }
        .into());
    }

    let relevant = t.meeting(&k.expand(params.epsilon));
    let mut star: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &id in &relevant {
        for &v in &t.simplices[id] {
            star.entry(v).or_default().push(id);
        }
    }
    let in_k: Vec<bool> = {
        let mut mask = vec![false; t.simplices.len()];
        for id in t.meeting(k) {
            mask[id] = true;
        }
        mask
    };

    let radius = 0.999 * params.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let touched: Vec<usize> = star.keys().copied().collect();
    for &v in &touched {
        let o = ball_sample(&mut rng, n, radius);
        t.set_offset(v, o);
    }

    let faces = top_faces(n);
    let mut last = certify(&t, field, k, params.samples, target)?;
    for iter in 1..=params.max_iters {
        if last.pass {
            return Ok(done(t, iter - 1, &last));
        }
        let mut todo: Vec<usize> = last
            .failing
            .iter()
            .flat_map(|&id| t.simplices[id].clone())
            .collect();
        todo.sort_unstable();
        todo.dedup();
        for v in todo {
            let ids: Vec<usize> = star[&v].iter().copied().filter(|&id| in_k[id]).collect();
            let current = t.offset(v);
            let mut best = (vertex_objective(&t, field, params.samples, &faces, &ids, v)?, current);
            if best.0 >= 10.0 * target.max(MARGIN_FLOOR) {
                continue;
            }
            for _ in 0..params.candidates {
                let cand = ball_sample(&mut rng, n, radius);
                t.set_offset(v, cand.clone());
                let score = vertex_objective(&t, field, params.samples, &faces, &ids, v)?;
                if score > best.0 {
                    best = (score, cand);
                }
                if best.0 >= 10.0 * target.max(MARGIN_FLOOR) {
                    break;
                }
            }
            t.set_offset(v, best.1);
        }
        last = certify(&t, field, k, params.samples, target)?;
    }
    if last.pass {
        return Ok(done(t, params.max_iters, &last));
    }
    Err(JiggleFailure {
        iterations: params.max_iters,
        offending: last.failing,
        best_margin: last.min_margin,
        reason: "iteration budget exhausted".into(),
    }
    .into())
}

/// Minimum margin over the faces containing vertex `v` in the given simplices.
fn vertex_objective(
    t: &LatticeTriangulation,
    field: &PlaneField,
    samples: usize,
    faces: &[Vec<usize>],
    ids: &[usize],
    v: usize,
) -> Result<f64, GeometryError> {
    let mut worst = f64::INFINITY;
    for &id in ids {
        let pos = t.simplices[id].iter().position(|&w| w == v).unwrap();
        let own: Vec<Vec<usize>> = faces.iter().filter(|f| f.contains(&pos)).cloned().collect();
        let s = t.simplex(id);
        for p in s.barycentric_samples(samples) {
            let c = field
                .normal(&p)
                .map_err(|source| GeometryError::Field { simplex: id, source })?;
            worst = worst.min(point_margin(&c, &s.vertices, &own).0);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowDecomposition {
    pub base_point: Vec<f64>,
    /// Projected vertices of σ in coordinates of an orthonormal basis of τ(x)^⊥.
    pub projected: Vec<Vec<f64>>,
    /// Indices of the vertices of σ whose projections are vertices of P.
    pub hull_vertices: Vec<usize>,
    /// The (n−3)-faces of σ mapping onto the facets of ∂P.
    pub sigma: Vec<Vec<usize>>,
    /// Outward unit normal of the facet each face of Σ maps to.
    pub facet_normals: Vec<Vec<f64>>,
}

/// Projects σ to τ(x)^⊥ and extracts the faces covering the boundary of
/// the shadow polytope.
pub fn shadow_decomposition(
    simplex: &AffineSimplex,
    field: &PlaneField,
    x: &[f64],
) -> Result<ShadowDecomposition, GeometryError> {
    let n = simplex.n();
    if simplex.dim() != n || n < 4 {
        return Err(GeometryError::InvalidInput("expected a top simplex with n ≥ 4".into()));
    }
    let c = field
        .normal(x)
        .map_err(|source| GeometryError::Field { simplex: 0, source })?;
    let (margin, _) = point_margin(&c, &simplex.vertices, &top_faces(n));
    if margin <= MARGIN_FLOOR {
        return Err(GeometryError::GeneralPosition {
            x: x.to_vec(),
            margin,
        });
    }
    let d = n - 2;
    let projected: Vec<Vec<f64>> = simplex
        .vertices
        .iter()
        .map(|v| (0..d).map(|j| (0..n).map(|i| c[(i, j)] * v[i]).sum()).collect())
        .collect();
    let scale = projected
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |a, b| a.max(b.abs()))
        .max(1.0);
    let tol = 1e-12 * scale;
    let mut sigma = Vec::new();
    let mut normals = Vec::new();
    for face in combinations(n + 1, d) {
        let p0 = &projected[face[0]];
        let diffs = Mat::from_fn(d - 1, d, |r, col| projected[face[r + 1]][col] - p0[col]);
        let w = nullspace(&diffs);
        let w: Vec<f64> = w.column(0).iter().copied().collect();
        let mut side = 0.0;
        let mut facet = true;
        for (i, p) in projected.iter().enumerate() {
            if face.contains(&i) {
                continue;
            }
            let s: f64 = (0..d).map(|j| w[j] * (p[j] - p0[j])).sum();
            if s.abs() <= tol {
                facet = false;
                break;
            }
            if side == 0.0 {
                side = s.signum();
            } else if s.signum() != side {
                facet = false;
                break;
            }
        }
        if facet {
            sigma.push(face);
            normals.push(w.iter().map(|c| -side * c).collect());
        }
    }
    let mut hull_vertices: Vec<usize> = sigma.iter().flatten().copied().collect();
    hull_vertices.sort_unstable();
    hull_vertices.dedup();
    let sd = ShadowDecomposition {
        base_point: x.to_vec(),
        projected,
        hull_vertices,
        sigma,
        facet_normals: normals,
    };
    sd.verify()?;
    Ok(sd)
}

impl ShadowDecomposition {
    /// Checks that Σ is a closed pseudomanifold of dimension n−3 (every
    /// (n−4)-face lies in exactly two faces of Σ) and, for n = 4, a single
    /// cycle through all hull vertices.
    pub fn verify(&self) -> Result<(), GeometryError> {
        if self.sigma.is_empty() {
            return Err(GeometryError::Shadow("no boundary faces".into()));
        }
        let d = self.sigma[0].len();
        let mut ridges: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for f in &self.sigma {
            for skip in 0..d {
                let r: Vec<usize> = f.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, v)| *v).collect();
                *ridges.entry(r).or_default() += 1;
            }
        }
        if let Some((r, c)) = ridges.iter().find(|(_, c)| **c != 2) {
            return Err(GeometryError::Shadow(format!("ridge {r:?} lies in {c} faces")));
        }
        if d == 2 {
            // walk the cycle
            let start = self.sigma[0][0];
            let mut prev = start;
            let mut cur = self.sigma[0][1];
            let mut steps = 1;
            while cur != start {
                let next = self
                    .sigma
                    .iter()
                    .find(|e| e.contains(&cur) && !e.contains(&prev))
                    .map(|e| if e[0] == cur { e[1] } else { e[0] })
                    .ok_or_else(|| GeometryError::Shadow("open boundary".into()))?;
                prev = cur;
                cur = next;
                steps += 1;
                if steps > self.sigma.len() {
                    return Err(GeometryError::Shadow("boundary is not a cycle".into()));
                }
            }
            if steps != self.sigma.len() {
                return Err(GeometryError::Shadow("boundary has several components".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planefield::Catalog;

    fn unit(n: usize) -> IntBox {
        IntBox::cube(n, 0, 1)
    }

    #[test]
    fn counts_follow_permutations() {
        assert_eq!(standard_triangulation(1, unit(2)).unwrap().simplices().len(), 2);
        assert_eq!(standard_triangulation(1, unit(4)).unwrap().simplices().len(), 24);
        assert_eq!(standard_triangulation(2, unit(2)).unwrap().simplices().len(), 8);
        assert!(standard_triangulation(1, IntBox::cube(2, 0, 0)).is_err());
        assert!(standard_triangulation(0, unit(2)).is_err());
    }

    #[test]
    fn permutations_and_combinations() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(combinations(5, 3).len(), 10);
        assert_eq!(barycentric_grid(5, 3).len(), 35);
    }

    #[test]
    fn triangulation_tiles_the_box() {
        let t = standard_triangulation(2, IntBox::new(vec![0, -1, 0], vec![1, 1, 2])).unwrap();
        assert!((t.total_volume() - 4.0).abs() < 1e-12);
        t.verify().unwrap();
    }

    #[test]
    fn axis_face_transverse_to_horizontal_passes() {
        let field = crate::planefield::PlaneField::coordinate(BoxRegion::cube(4, -1.0, 2.0), 0, 1);
        let c = field.normal(&[0.0; 4]).unwrap();
        let verts = vec![
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let (m, _) = point_margin(&c, &verts, &[vec![0, 1, 2]]);
        assert!((m - 1.0).abs() < 1e-14);
        let t = standard_triangulation(1, unit(4)).unwrap();
        let r = is_general_position(&t.simplex(0), &field, 3).unwrap();
        assert!(!r.pass);
        assert_eq!(r.margin, 0.0);
    }

    #[test]
    fn shadow_of_generic_simplex_is_polygon() {
        let field = Catalog::LinearTilt { u: 0.3 }.field(BoxRegion::cube(4, -1.0, 2.0)).unwrap();
        let s = AffineSimplex::new(vec![
            vec![0.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.1, 0.2, 0.05],
            vec![0.2, 0.9, 0.1, 0.3],
            vec![0.1, 0.3, 1.1, 0.2],
            vec![0.3, 0.2, 0.4, 0.8],
        ])
        .unwrap();
        let sd = shadow_decomposition(&s, &field, &s.centroid()).unwrap();
        assert!((3..=5).contains(&sd.hull_vertices.len()));
        assert_eq!(sd.sigma.len(), sd.hull_vertices.len());
    }
}
