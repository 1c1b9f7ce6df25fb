//! Run configuration: one TOML file fully determines one experiment.

use std::path::{Path, PathBuf};

use biparam_core::dyadic::{DyadicGrid, GridParams};
use biparam_core::engine::WhitneyQuadrature;
use biparam_core::haar::Mesh;
use biparam_core::journe::{default_shadow_constant, Weights};
use biparam_core::kernel::{BiParamKernel, MultiplierSpec, TabulatedProfile};
use biparam_core::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::io;

pub const DEFAULT_R: u32 = 14;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub omega: OmegaConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub decompose: DecomposeConfig,
    #[serde(default)]
    pub journe: JourneConfig,
    #[serde(default)]
    pub necessity: NecessityConfig,
    #[serde(default)]
    pub pi_good: PiGoodConfig,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    Standard,
    #[default]
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub r: u32,
    pub level_min: i32,
    pub level_max: i32,
    pub shifts: ShiftKind,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 1, m: 1, alpha: 1.0, beta: 1.0, r: DEFAULT_R, level_min: 0, level_max: 6, shifts: ShiftKind::Random }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    #[default]
    Cancellative,
    Paraproduct,
    TensorParaproduct,
    Tabulated,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MultiplierConfig {
    Constant { value: f64 },
    LeftHalf,
    RandomSigns { level: i32, period_level: i32, seed: u64 },
}

impl Default for MultiplierConfig {
    fn default() -> Self {
        MultiplierConfig::RandomSigns { level: 3, period_level: 0, seed: 5 }
    }
}

impl MultiplierConfig {
    fn spec(&self) -> MultiplierSpec {
        match *self {
            MultiplierConfig::Constant { value } => MultiplierSpec::Constant(value),
            MultiplierConfig::LeftHalf => MultiplierSpec::LeftHalf,
            MultiplierConfig::RandomSigns { level, period_level, seed } => {
                MultiplierSpec::RandomSigns { level, period_level, seed }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default)]
    pub kind: KernelKind,
    #[serde(default)]
    pub multiplier: MultiplierConfig,
    /// Tabulated profiles (`rho,value` CSV) for the two factors.
    #[serde(default)]
    pub profile1: Option<PathBuf>,
    #[serde(default)]
    pub profile2: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    pub q: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { q: WhitneyQuadrature::DEFAULT_Q }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaKind {
    RandomUnion,
    Staircase,
    #[default]
    Mixed,
    File,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OmegaConfig {
    pub kind: OmegaKind,
    pub count: usize,
    pub max_rectangles: usize,
    /// Shadow constant; defaults to `2^-(n+m+2)`.
    pub shadow_c: Option<f64>,
    /// Ω CSV files, one set each, for `kind = "file"`.
    pub paths: Vec<PathBuf>,
    /// Also write Ω and its shadows per set.
    pub dump_sets: bool,
}

impl Default for OmegaConfig {
    fn default() -> Self {
        Self { kind: OmegaKind::Mixed, count: 20, max_rectangles: 6, shadow_c: None, paths: Vec::new(), dump_sets: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub samples: u64,
    /// Cube levels sampled by the one-parameter Carleson checks.
    pub carleson_levels: Vec<i32>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { samples: 400, carleson_levels: vec![1, 2] }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    Zero,
    #[default]
    HaarPolynomial,
    RandomWindow,
    File,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub input: InputKind,
    pub inputs: usize,
    pub terms: usize,
    pub trials: u64,
    /// Mesh-function file for `input = "file"` (CSV or `.bin`).
    pub path: Option<PathBuf>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { input: InputKind::HaarPolynomial, inputs: 5, terms: 12, trials: 200, path: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    pub inputs: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self { inputs: 3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightsConfig {
    Geometric { scale: f64, ratio: f64 },
    Table { values: Vec<f64> },
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig::Geometric { scale: 1.0, ratio: 0.5 }
    }
}

impl WeightsConfig {
    pub fn weights(&self) -> Weights {
        match self {
            WeightsConfig::Geometric { scale, ratio } => Weights::Geometric { scale: *scale, ratio: *ratio },
            WeightsConfig::Table { values } => Weights::Table(values.clone()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct JourneConfig {
    #[serde(default)]
    pub weights: WeightsConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NecessityConfig {
    /// Translate every set by half the box along the first axis and compare.
    pub translate: bool,
    pub tolerance: f64,
}

impl Default for NecessityConfig {
    fn default() -> Self {
        Self { translate: true, tolerance: 0.05 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PiGoodConfig {
    pub level: i32,
    pub cubes: Vec<Vec<i64>>,
    pub trials: u64,
}

impl Default for PiGoodConfig {
    fn default() -> Self {
        Self { level: 6, cubes: vec![vec![5], vec![37]], trials: 2000 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }

    pub fn params1(&self) -> Result<GridParams, CliError> {
        let g = &self.grid;
        Ok(GridParams::new(g.n, g.alpha, g.r, g.level_min, g.level_max)?)
    }

    pub fn params2(&self) -> Result<GridParams, CliError> {
        let g = &self.grid;
        Ok(GridParams::new(g.m, g.beta, g.r, g.level_min, g.level_max)?)
    }

    pub fn quadrature(&self) -> Result<WhitneyQuadrature, CliError> {
        Ok(WhitneyQuadrature::new(self.quadrature.q)?)
    }

    pub fn shadow_c(&self) -> f64 {
        self.omega.shadow_c.unwrap_or_else(|| default_shadow_constant(self.grid.n, self.grid.m))
    }

    /// Seed for a named sub-stream of the run.
    pub fn sub_seed(&self, tag: u64) -> u64 {
        stream(self.seed, tag).random()
    }

    pub fn grids(&self) -> Result<(DyadicGrid, DyadicGrid), CliError> {
        let (p1, p2) = (self.params1()?, self.params2()?);
        Ok(match self.grid.shifts {
            ShiftKind::Standard => (DyadicGrid::standard(p1)?, DyadicGrid::standard(p2)?),
            ShiftKind::Random => (DyadicGrid::random(p1, self.sub_seed(1))?, DyadicGrid::random(p2, self.sub_seed(2))?),
        })
    }

    pub fn kernel(&self, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<BiParamKernel, CliError> {
        let g = &self.grid;
        let (m1, m2) = (Mesh::of(g1), Mesh::of(g2));
        let spec = self.kernel.multiplier.spec();
        Ok(match self.kernel.kind {
            KernelKind::Cancellative => BiParamKernel::builtin_cancellative(g.n, g.m, g.alpha, g.beta)?,
            KernelKind::Paraproduct => {
                BiParamKernel::builtin_paraproduct(g.n, g.m, g.alpha, g.beta, spec.sample_product(&m1, &m2)?)?
            }
            KernelKind::TensorParaproduct => {
                if g.n != 1 || g.m != 1 {
                    return Err(CliError::Config("tensor-paraproduct needs n = m = 1".into()));
                }
                BiParamKernel::tensor_paraproduct(g.alpha, g.beta, spec.sample(&m1)?, spec.sample(&m2)?)?
            }
            KernelKind::Tabulated => {
                let load = |p: &Option<PathBuf>, dim, exponent| -> Result<TabulatedProfile, CliError> {
                    let path = p.as_ref().ok_or_else(|| CliError::Config("tabulated kernel needs profile1 and profile2".into()))?;
                    let (rho, values) = io::read_profile_csv(path)?;
                    Ok(TabulatedProfile::new(dim, exponent, rho, values)?)
                };
                BiParamKernel::tabulated(
                    "tabulated",
                    load(&self.kernel.profile1, g.n, g.alpha)?,
                    load(&self.kernel.profile2, g.m, g.beta)?,
                )
            }
        })
    }

    /// Checks that do not depend on the subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        self.params1()?;
        self.params2()?;
        self.quadrature()?;
        let c = self.shadow_c();
        if !(c > 0.0 && c < 1.0) {
            return Err(CliError::Config(format!("shadow_c must lie in (0, 1), got {c}")));
        }
        if self.omega.kind == OmegaKind::File && self.omega.paths.len() != self.omega.count {
            return Err(CliError::Config("omega.count must equal the number of omega.paths".into()));
        }
        if self.omega.kind != OmegaKind::File && self.omega.count > 0 && self.omega.max_rectangles == 0 {
            return Err(CliError::Config("omega.max_rectangles must be at least 1".into()));
        }
        Ok(())
    }
}
