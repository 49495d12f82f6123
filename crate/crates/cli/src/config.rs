//! Run configuration read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use foliage_core::diffgroup::DiffeoSpec;
use foliage_core::filling::{FormSpec, LeafDirection};
use foliage_core::geometry::{IntBox, JiggleParams, LatticeTriangulation};
use foliage_core::holonomy::PathSpec;
use foliage_core::planefield::{Catalog, NormalCoframe, PlaneField};
use foliage_core::{Ball, BoxRegion};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Ambient dimension; the codimension is `k = n − 2`.
    pub n: usize,
    /// Domain of the plane field; defaults to `[−1, 2]ⁿ`.
    #[serde(default)]
    pub domain: Option<BoxRegion>,
    #[serde(default)]
    pub field: FieldConfig,
    /// Closed set K; defaults to `[0, 1]ⁿ`.
    #[serde(default)]
    pub k_region: Option<BoxRegion>,
    /// Region U where the field is already integrable.
    #[serde(default)]
    pub u_region: Option<BoxRegion>,
    #[serde(default)]
    pub lattice: LatticeConfig,
    /// Previously emitted triangulation (`triangulation.json`) to use instead of the lattice.
    #[serde(default)]
    pub triangulation: Option<PathBuf>,
    #[serde(default)]
    pub jiggle: Option<JiggleConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub civilize: Option<CivilizeConfig>,
    #[serde(default)]
    pub flatten: Option<FlattenConfig>,
    /// Filling form; defaults to the standard admissible form with `k = n − 2`.
    #[serde(default)]
    pub filling: Option<FormSpec>,
    #[serde(default)]
    pub glue: Option<GlueConfig>,
    #[serde(default)]
    pub identity: Option<IdentityConfig>,
    #[serde(default)]
    pub subdivide: Option<SubdivideConfig>,
    #[serde(default)]
    pub trace: Option<TraceConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldConfig {
    Catalog(Catalog),
    /// Rows of the normal coframe, one expression per coordinate.
    Coframe(Vec<Vec<String>>),
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig::Catalog(Catalog::Horizontal)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub scale: u32,
    /// Integer box in units of `1/scale`; defaults to `[0, 1]ⁿ`.
    #[serde(default, rename = "box")]
    pub bounds: Option<IntBox>,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig { scale: 1, bounds: None }
    }
}

/// Jiggle parameters; unset fields take the library defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JiggleConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub min_margin: Option<f64>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub candidates: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub residual: f64,
    pub fd_ratio_low: f64,
    pub fd_ratio_high: f64,
    pub holonomy: f64,
    pub partition: f64,
    pub nonvanishing: f64,
    pub identity: f64,
    pub constancy: f64,
    pub graph_slack: f64,
    pub telescoping: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            residual: 1e-9,
            fd_ratio_low: 3.5,
            fd_ratio_high: 4.5,
            holonomy: 1e-6,
            partition: 1e-12,
            nonvanishing: 0.5,
            identity: 1e-8,
            constancy: foliage_core::civilize::CONSTANCY_TOL,
            graph_slack: 1e-9,
            telescoping: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    /// Residual grid resolution on the `(r, x)` slice.
    pub residual: usize,
    pub fd_steps: Vec<f64>,
    /// Boundary-tube sample count for holonomy comparisons.
    pub tube_samples: usize,
    /// Grid per axis for word comparisons.
    pub identity: usize,
    /// Homotopy parameter steps.
    pub homotopy: usize,
    pub seam: usize,
    pub civilize_samples: usize,
    /// CSV residual grid written by `fill`.
    pub csv: usize,
}

impl Default for Grids {
    fn default() -> Self {
        Grids {
            residual: 256,
            fd_steps: vec![1e-3, 5e-4, 2.5e-4],
            tube_samples: 50,
            identity: 100,
            homotopy: 10,
            seam: 64,
            civilize_samples: 2,
            csv: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CivilizeConfig {
    /// `(δ_i, η_i)` for `i = 0 … top_dim`; searched when absent.
    #[serde(default)]
    pub radii: Option<Vec<(f64, f64)>>,
    pub top_dim: usize,
    #[serde(default)]
    pub include_constancy: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlattenConfig {
    pub simplex: Vec<Vec<f64>>,
    pub delta: f64,
    pub eta: f64,
    pub delta_bar: f64,
    pub eta_bar: f64,
    #[serde(default = "three")]
    pub samples: usize,
    #[serde(default = "ten")]
    pub t_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlueConfig {
    /// Fillings glued left to right; each is adjusted before gluing.
    pub pieces: Vec<FormSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum IdentityConfig {
    /// `[a, b]` as four conjugates of `h^{±1}` supported near `U`.
    Four {
        a: DiffeoSpec,
        b: DiffeoSpec,
        h: DiffeoSpec,
        u: Ball,
        /// Comparison box; defaults to the union of the supports padded by 0.5.
        #[serde(default)]
        region: Option<BoxRegion>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubdivideConfig {
    pub path: PathSpec,
    pub q: i64,
    /// Comparison box; defaults to the path support padded by 0.1.
    #[serde(default)]
    pub region: Option<BoxRegion>,
    #[serde(default = "ten")]
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    /// `(r, φ, θ)`.
    pub start: [f64; 3],
    pub x: Vec<f64>,
    pub length: f64,
    pub step: f64,
    #[serde(default = "angular")]
    pub direction: LeafDirection,
}

fn three() -> usize {
    3
}

fn ten() -> usize {
    10
}

fn angular() -> LeafDirection {
    LeafDirection::Angular
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.n < 4 {
            return Err(CliError::Config(format!("k = n - 2 must be at least 2, got n = {}", self.n)));
        }
        let dims = [&self.domain, &self.k_region, &self.u_region];
        if dims.iter().any(|b| b.as_ref().is_some_and(|b| b.dim() != self.n)) {
            return Err(CliError::Config("region dimension differs from n".into()));
        }
        if let Some(b) = &self.lattice.bounds {
            if b.dim() != self.n {
                return Err(CliError::Config("lattice box dimension differs from n".into()));
            }
        }
        if self.lattice.scale == 0 {
            return Err(CliError::Config("lattice scale must be positive".into()));
        }
        for f in self.filling.iter().chain(self.glue.iter().flat_map(|g| g.pieces.iter())) {
            if f.k != self.k() {
                return Err(CliError::Config(format!("filling k = {} but n - 2 = {}", f.k, self.k())));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.n - 2
    }

    pub fn domain(&self) -> BoxRegion {
        self.domain.clone().unwrap_or_else(|| BoxRegion::cube(self.n, -1.0, 2.0))
    }

    pub fn k_region(&self) -> BoxRegion {
        self.k_region.clone().unwrap_or_else(|| BoxRegion::cube(self.n, 0.0, 1.0))
    }

    pub fn lattice_box(&self) -> IntBox {
        self.lattice.bounds.clone().unwrap_or_else(|| IntBox::cube(self.n, 0, 1))
    }

    pub fn jiggle_params(&self) -> JiggleParams {
        let Some(j) = &self.jiggle else {
            return JiggleParams::new(0.05 / self.lattice.scale as f64, 0);
        };
        let mut p = JiggleParams::new(j.epsilon, j.seed);
        p.max_iters = j.max_iters.unwrap_or(p.max_iters);
        p.min_margin = j.min_margin.unwrap_or(p.min_margin);
        p.samples = j.samples.unwrap_or(p.samples);
        p.candidates = j.candidates.unwrap_or(p.candidates);
        p
    }

    pub fn form_spec(&self) -> FormSpec {
        self.filling.clone().unwrap_or_else(|| FormSpec::standard(self.k()))
    }

    pub fn plane_field(&self) -> Result<PlaneField, CliError> {
        let domain = self.domain();
        let coframe = match &self.field {
            FieldConfig::Catalog(c) => c.coframe(domain),
            FieldConfig::Coframe(rows) => NormalCoframe::parse(domain, rows),
        }
        .map_err(|e| CliError::Config(e.to_string()))?;
        if coframe.n() != self.n || coframe.k() != self.k() {
            return Err(CliError::Config("coframe must have n - 2 rows of length n".into()));
        }
        Ok(coframe.to_field())
    }

    /// The configured triangulation file, or the unjiggled lattice.
    pub fn base_triangulation(&self) -> Result<LatticeTriangulation, CliError> {
        match &self.triangulation {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                let t: LatticeTriangulation =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                if t.n() != self.n {
                    return Err(CliError::Config("triangulation dimension differs from n".into()));
                }
                Ok(t.rebuild())
            }
            None => foliage_core::geometry::standard_triangulation(self.lattice.scale, self.lattice_box())
                .map_err(|e| CliError::Config(e.to_string())),
        }
    }

    /// SHA-256 of the canonical JSON of the parsed configuration.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(crate::output::to_json(&v).as_bytes()))
    }
}
