//! Numerical kernels for constructing and certifying foliations of
//! codimension `n − 2` in ℝⁿ: plane fields and their integrability,
//! triangulations in general position, civilization of plane fields near
//! skeleta, words in compactly supported diffeomorphism groups of ℝᵏ,
//! foliated products over the circle, and Reeb-type fillings.

pub mod civilize;
pub mod diffgroup;
pub mod expr;
pub mod filling;
pub mod geometry;
pub mod holonomy;
pub mod linalg;
pub mod planefield;

pub use expr::{Env, Expr, ExprError, SmoothFn, Var};
pub use geometry::{AffineSimplex, IntBox, LatticeTriangulation};
pub use linalg::{Ball, BoxRegion, Mat, Vector};
pub use planefield::{FieldHomotopy, GraphMap, NormalCoframe, PlaneField};
