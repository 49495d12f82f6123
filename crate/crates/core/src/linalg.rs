//! Dense linear-algebra helpers and box/ball regions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Singular values in decreasing order.
pub fn singular_values(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Smallest singular value of a matrix with at least as many rows as
/// columns (0 for a column-deficient matrix). Empty matrices give +inf.
pub fn sigma_min(m: &Mat) -> f64 {
    if m.ncols() == 0 {
        return f64::INFINITY;
    }
    if m.nrows() < m.ncols() {
        return 0.0;
    }
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// Operator (spectral) norm.
pub fn op_norm(m: &Mat) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Eigenpairs of a symmetric matrix sorted by increasing eigenvalue.
fn sorted_eigen(s: Mat) -> (Vec<f64>, Mat) {
    let n = s.nrows();
    let eig = SymmetricEigen::new(s);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = Mat::from_fn(n, n, |r, c| eig.eigenvectors[(r, idx[c])]);
    (vals, vecs)
}

/// Orthonormal basis (as columns) of the kernel of the `rows × n` matrix,
/// assuming the rows are independent.
pub fn nullspace(rows: &Mat) -> Mat {
    let n = rows.ncols();
    let dim = n - rows.nrows().min(n);
    let (_, vecs) = sorted_eigen(rows.transpose() * rows);
    vecs.columns(0, dim).into_owned()
}

/// Orthonormal basis of the orthogonal complement of the column span of
/// `basis` (columns need not be orthonormal, but must be independent).
pub fn complement(basis: &Mat) -> Mat {
    nullspace(&basis.transpose())
}

/// Orthonormal basis of the column span, dropping directions with relative
/// singular value below `tol`.
pub fn orth(m: &Mat, tol: f64) -> Mat {
    let n = m.nrows();
    if m.ncols() == 0 {
        return Mat::zeros(n, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let top = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol * top && top > 0.0)
        .collect();
    Mat::from_fn(n, keep.len(), |r, c| u[(r, keep[c])])
}

/// `M (MᵀM)^{-1/2}`: the orthonormal frame closest to `M` with the same span.
/// `None` when the columns are (numerically) dependent.
pub fn polar_orthonormalize(m: &Mat) -> Option<Mat> {
    let g = m.transpose() * m;
    let (vals, vecs) = sorted_eigen(g);
    let top = vals.last().copied().unwrap_or(0.0);
    if vals.is_empty() || vals[0] <= 1e-24 * top.max(1.0) || vals[0] <= 0.0 {
        return None;
    }
    let inv_sqrt = Mat::from_diagonal(&Vector::from_iterator(
        vals.len(),
        vals.iter().map(|v| 1.0 / v.sqrt()),
    ));
    Some(m * (&vecs * inv_sqrt * vecs.transpose()))
}

/// Orthogonal projector onto the span of orthonormal columns.
pub fn projector(onb: &Mat) -> Mat {
    onb * onb.transpose()
}

/// Frobenius distance between the projectors of two orthonormal frames.
pub fn subspace_distance(a: &Mat, b: &Mat) -> f64 {
    (projector(a) - projector(b)).norm()
}

/// Matrix whose columns are the given points' differences `p_i - p_0`.
pub fn edge_matrix(points: &[Vector]) -> Mat {
    let n = points[0].len();
    Mat::from_fn(n, points.len() - 1, |r, c| points[c + 1][r] - points[0][r])
}

/// Axis-aligned closed box `[lo_i, hi_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "box corners must have equal dimension");
        BoxRegion { lo, hi }
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        BoxRegion::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn centered(center: &[f64], half: f64) -> Self {
        BoxRegion::new(
            center.iter().map(|c| c - half).collect(),
            center.iter().map(|c| c + half).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(l, h)| !(l <= h))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// Strict interior membership.
    pub fn contains_open(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l < *v && *v < *h)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    /// Distance from an interior point to the boundary (negative outside).
    pub fn depth(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (l, h))| (v - l).min(h - v))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn expand(&self, by: f64) -> Self {
        BoxRegion::new(
            self.lo.iter().map(|l| l - by).collect(),
            self.hi.iter().map(|h| h + by).collect(),
        )
    }

    pub fn union(&self, other: &BoxRegion) -> Self {
        BoxRegion::new(
            self.lo.iter().zip(&other.lo).map(|(a, b)| a.min(*b)).collect(),
            self.hi.iter().zip(&other.hi).map(|(a, b)| a.max(*b)).collect(),
        )
    }

    pub fn intersects(&self, other: &BoxRegion) -> bool {
        (0..self.dim()).all(|i| self.lo[i] <= other.hi[i] && other.lo[i] <= self.hi[i])
    }

    pub fn contains_box(&self, other: &BoxRegion) -> bool {
        (0..self.dim()).all(|i| self.lo[i] <= other.lo[i] && other.hi[i] <= self.hi[i])
    }

    /// Bounding box of a point set.
    pub fn bounding(points: &[Vec<f64>]) -> Self {
        let d = points[0].len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in points {
            for i in 0..d {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        BoxRegion::new(lo, hi)
    }

    /// Tensor grid with `m` points per axis (endpoints included; `m = 1`
    /// gives the centre).
    pub fn grid(&self, m: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let m = m.max(1);
        let total = m.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                (0..d)
                    .map(|i| {
                        let j = idx % m;
                        idx /= m;
                        if m == 1 {
                            0.5 * (self.lo[i] + self.hi[i])
                        } else {
                            self.lo[i] + (self.hi[i] - self.lo[i]) * j as f64 / (m - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Closed Euclidean ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Ball { center, radius }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        dist(&self.center, x) <= self.radius
    }

    pub fn bounding_box(&self) -> BoxRegion {
        BoxRegion::centered(&self.center, self.radius)
    }

    /// Deterministic sample of the closed ball: polar grid in 2D, tensor grid
    /// clipped to the ball otherwise.
    pub fn samples(&self, m: usize) -> Vec<Vec<f64>> {
        let d = self.center.len();
        if d == 2 {
            let mut out = vec![self.center.clone()];
            for i in 1..=m {
                let rad = self.radius * i as f64 / m as f64;
                let count = 6 * i;
                for j in 0..count {
                    let a = std::f64::consts::TAU * j as f64 / count as f64;
                    out.push(vec![
                        self.center[0] + rad * a.cos(),
                        self.center[1] + rad * a.sin(),
                    ]);
                }
            }
            out
        } else {
            self.bounding_box()
                .grid(2 * m + 1)
                .into_iter()
                .filter(|p| self.contains(p))
                .collect()
        }
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_is_orthonormal_and_orthogonal() {
        let b = Mat::from_column_slice(4, 2, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0]);
        let c = complement(&b);
        assert_eq!(c.ncols(), 2);
        assert!((c.transpose() * &c - Mat::identity(2, 2)).norm() < 1e-12);
        assert!((b.transpose() * &c).norm() < 1e-12);
    }

    #[test]
    fn polar_keeps_span() {
        let m = Mat::from_column_slice(3, 2, &[1.0, 0.2, 0.0, 0.3, 1.0, 0.5]);
        let q = polar_orthonormalize(&m).unwrap();
        assert!((q.transpose() * &q - Mat::identity(2, 2)).norm() < 1e-12);
        let qm = orth(&m, 1e-12);
        assert!(subspace_distance(&q, &qm) < 1e-12);
        let dep = Mat::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(polar_orthonormalize(&dep).is_none());
    }

    #[test]
    fn sigma_min_of_diagonal() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![3.0, 0.5, 2.0]));
        assert!((sigma_min(&m) - 0.5).abs() < 1e-14);
        assert!((op_norm(&m) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn grid_counts_and_corners() {
        let b = BoxRegion::cube(3, 0.0, 1.0);
        let g = b.grid(4);
        assert_eq!(g.len(), 64);
        assert!(g.contains(&vec![0.0, 0.0, 0.0]));
        assert!(g.contains(&vec![1.0, 1.0, 1.0]));
    }
}
