//! Empirical constants for the kernel assumptions.
//!
//! Every check samples ratios `|lhs| / rhs` and reports their supremum
//! together with the sample achieving it. Sample `s` draws from stream
//! `(seed, s)`, so reports do not depend on evaluation order. Scales and
//! relative distances `|x - y| / t` are stratified on a log scale.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::dyadic::{Cube, DyadicGrid};
use crate::engine::{SquareField, WhitneyQuadrature};
use crate::error::{bail, Error, Result};
use crate::haar::{Mesh, ProductMeshFunction};
use crate::journe::{rectangle_sum, OpenSetOmega};
use crate::kernel::{BiParamKernel, KernelPoint};
use crate::math::{exp2i, powf, powi, sqrt};
use crate::rng::{log_uniform, stream, uniform};

/// Sup of sampled ratios for one assumption, with the sample achieving it.
/// The constant is a lower bound for the true implicit constant.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateReport {
    pub assumption_id: String,
    pub constant: f64,
    pub samples: u64,
    pub witness: Vec<f64>,
}

impl EstimateReport {
    pub fn new(assumption_id: &str) -> Self {
        Self { assumption_id: assumption_id.into(), constant: 0.0, samples: 0, witness: Vec::new() }
    }

    /// Record one sampled ratio.
    pub fn observe(&mut self, ratio: f64, witness: &[f64]) {
        self.samples += 1;
        if ratio > self.constant || (ratio.is_nan() && !self.constant.is_nan()) {
            self.constant = ratio;
            self.witness = witness.to_vec();
        }
    }

    /// Sup/count reduction.
    pub fn merge(mut self, other: EstimateReport) -> Self {
        let n = self.samples + other.samples;
        if other.constant > self.constant {
            self = Self { samples: 0, ..other };
        }
        self.samples = n;
        self
    }
}

pub const SIZE: &str = "size";
pub const HOLDER: &str = "holder";
pub const MIXED_Y2: &str = "mixed-holder-y2";
pub const MIXED_Y1: &str = "mixed-holder-y1";

/// Ranges for the pointwise sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingPlan {
    pub samples: u64,
    pub seed: u64,
    /// Range of `t1` and `t2`.
    pub t_range: (f64, f64),
    /// Range of `|x - y| / t`.
    pub rho_range: (f64, f64),
    /// `x` is uniform on `[0, side)` along every axis.
    pub side: f64,
    /// Number of log strata per stratified variable.
    pub strata: u64,
}

impl SamplingPlan {
    pub fn new(samples: u64, seed: u64) -> Self {
        Self { samples, seed, t_range: (1e-3, 1.0), rho_range: (1e-3, 1e3), side: 1.0, strata: 8 }
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Empty("sample plan"));
        }
        let (t0, t1) = self.t_range;
        let (r0, r1) = self.rho_range;
        if !(t0 > 0.0 && t1 > t0 && r0 > 0.0 && r1 > r0 && self.side > 0.0 && self.strata > 0) {
            bail!(InvalidParams, "sampling ranges must be positive and increasing");
        }
        Ok(())
    }
}

fn stratified<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64), stratum: u64, strata: u64) -> f64 {
    let (a, b) = (libm::log(lo), libm::log(hi));
    let w = (b - a) / strata as f64;
    log_uniform(rng, libm::exp(a + w * stratum as f64), libm::exp(a + w * (stratum + 1) as f64))
}

fn direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| uniform(rng, -1.0, 1.0)).collect();
        let r = sqrt(v.iter().map(|a| a * a).sum());
        if r > 1e-3 && r <= 1.0 {
            return v.into_iter().map(|a| a / r).collect();
        }
    }
}

/// One factor of a sampled configuration: `x`, `y = x + rho t e`, and a
/// perturbation `z` of `y` with `|y - z| < t/2`.
#[derive(Clone, Debug)]
struct FactorSample {
    t: f64,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl FactorSample {
    fn draw<R: Rng + ?Sized>(rng: &mut R, dim: usize, plan: &SamplingPlan, st: u64, sr: u64) -> Self {
        let t = stratified(rng, plan.t_range, st, plan.strata);
        let rho = stratified(rng, plan.rho_range, sr, plan.strata);
        let x: Vec<f64> = (0..dim).map(|_| uniform(rng, 0.0, plan.side)).collect();
        let e = direction(rng, dim);
        let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + rho * t * b).collect();
        let delta = 0.5 * t * log_uniform(rng, 1e-3, 1.0);
        let e = direction(rng, dim);
        let z: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a + delta * b).collect();
        Self { t, x, y, z }
    }

    fn dist_xy(&self) -> f64 {
        dist(&self.x, &self.y)
    }

    fn dist_yz(&self) -> f64 {
        dist(&self.y, &self.z)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sqrt(a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum())
}

fn size_factor(dim: usize, exponent: f64, t: f64, r: f64) -> f64 {
    powf(t, exponent) / powf(t + r, dim as f64 + exponent)
}

fn holder_factor(dim: usize, exponent: f64, t: f64, r: f64, d: f64) -> f64 {
    powf(d, exponent) / powf(t + r, dim as f64 + exponent)
}

fn draw_pair(kernel: &BiParamKernel, plan: &SamplingPlan, s: u64) -> (FactorSample, FactorSample) {
    let mut rng = stream(plan.seed, s);
    let k = plan.strata;
    let a = FactorSample::draw(&mut rng, kernel.n, plan, s % k, (s / k) % k);
    let b = FactorSample::draw(&mut rng, kernel.m, plan, (s / (k * k)) % k, (s / (k * k * k)) % k);
    (a, b)
}

fn witness(a: &FactorSample, b: &FactorSample) -> Vec<f64> {
    let mut w = alloc::vec![a.t, b.t];
    for v in [&a.x, &b.x, &a.y, &b.y, &a.z, &b.z] {
        w.extend_from_slice(v);
    }
    w
}

fn eval(kernel: &BiParamKernel, a: &FactorSample, b: &FactorSample, y1: &[f64], y2: &[f64]) -> Result<f64> {
    kernel.eval(&KernelPoint { t1: a.t, t2: b.t, x1: &a.x, x2: &b.x, y1, y2 })
}

fn sample_ratios(
    id: &str,
    kernel: &BiParamKernel,
    plan: &SamplingPlan,
    ratio: impl Fn(&FactorSample, &FactorSample) -> Result<f64>,
) -> Result<EstimateReport> {
    plan.validate()?;
    let mut report = EstimateReport::new(id);
    for s in 0..plan.samples {
        let (a, b) = draw_pair(kernel, plan, s);
        report.observe(ratio(&a, &b)?, &witness(&a, &b));
    }
    Ok(report)
}

/// `|s| (t1 + |x1 - y1|)^{n+a} (t2 + |x2 - y2|)^{m+b} / (t1^a t2^b)`.
pub fn check_size(kernel: &BiParamKernel, plan: &SamplingPlan) -> Result<EstimateReport> {
    sample_ratios(SIZE, kernel, plan, |a, b| {
        let s = eval(kernel, a, b, &a.y, &b.y)?;
        let rhs = size_factor(kernel.n, kernel.alpha, a.t, a.dist_xy()) * size_factor(kernel.m, kernel.beta, b.t, b.dist_xy());
        Ok(s.abs() / rhs)
    })
}

/// The double difference in `y1` and `y2`.
pub fn check_holder(kernel: &BiParamKernel, plan: &SamplingPlan) -> Result<EstimateReport> {
    sample_ratios(HOLDER, kernel, plan, |a, b| {
        let d = eval(kernel, a, b, &a.y, &b.y)? - eval(kernel, a, b, &a.z, &b.y)? - eval(kernel, a, b, &a.y, &b.z)?
            + eval(kernel, a, b, &a.z, &b.z)?;
        let rhs = holder_factor(kernel.n, kernel.alpha, a.t, a.dist_xy(), a.dist_yz())
            * holder_factor(kernel.m, kernel.beta, b.t, b.dist_xy(), b.dist_yz());
        Ok(d.abs() / rhs)
    })
}

/// Difference in `y2`, size in the first factor.
pub fn check_mixed_1(kernel: &BiParamKernel, plan: &SamplingPlan) -> Result<EstimateReport> {
    sample_ratios(MIXED_Y2, kernel, plan, |a, b| {
        let d = eval(kernel, a, b, &a.y, &b.y)? - eval(kernel, a, b, &a.y, &b.z)?;
        let rhs = size_factor(kernel.n, kernel.alpha, a.t, a.dist_xy())
            * holder_factor(kernel.m, kernel.beta, b.t, b.dist_xy(), b.dist_yz());
        Ok(d.abs() / rhs)
    })
}

/// Difference in `y1`, size in the second factor.
pub fn check_mixed_2(kernel: &BiParamKernel, plan: &SamplingPlan) -> Result<EstimateReport> {
    sample_ratios(MIXED_Y1, kernel, plan, |a, b| {
        let d = eval(kernel, a, b, &a.y, &b.y)? - eval(kernel, a, b, &a.z, &b.y)?;
        let rhs = holder_factor(kernel.n, kernel.alpha, a.t, a.dist_xy(), a.dist_yz())
            * size_factor(kernel.m, kernel.beta, b.t, b.dist_xy());
        Ok(d.abs() / rhs)
    })
}

/// The four combinations of a Carleson box integral in one factor with a
/// size or Hölder bound in the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CarlesonDirection {
    /// Box over `I`, size in the second factor.
    SizeI,
    /// Box over `J`, size in the first factor.
    SizeJ,
    /// Box over `I`, difference in `y2`.
    HolderI,
    /// Box over `J`, difference in `y1`.
    HolderJ,
}

impl CarlesonDirection {
    pub const ALL: [CarlesonDirection; 4] = [Self::SizeI, Self::SizeJ, Self::HolderI, Self::HolderJ];

    pub fn axis(self) -> usize {
        match self {
            Self::SizeI | Self::HolderI => 0,
            Self::SizeJ | Self::HolderJ => 1,
        }
    }

    pub fn is_holder(self) -> bool {
        matches!(self, Self::HolderI | Self::HolderJ)
    }

    pub fn id(self) -> &'static str {
        match self {
            Self::SizeI => "carleson-size-i",
            Self::SizeJ => "carleson-size-j",
            Self::HolderI => "carleson-holder-i",
            Self::HolderJ => "carleson-holder-j",
        }
    }
}

/// Variables of the factor that is not integrated.
#[derive(Clone, Debug, PartialEq)]
pub struct OtherFactor {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Second point for the Hölder variants.
    pub z: Option<Vec<f64>>,
}

/// `(∬_{Î} |∫_I s dy|^2 dx dt/t)^{1/2}` (or with the difference `s(.., y) -
/// s(.., z)` in the other factor), where `I` is a cube of `grid` taken as a
/// cube of `R^d`. The scale integral runs over the Whitney bands of `I` down
/// to the finest window level; `x` runs over mesh cell centres and the inner
/// integral is a sum of exact cell integrals.
pub fn carleson_box_quantity(
    kernel: &BiParamKernel,
    axis: usize,
    grid: &DyadicGrid,
    cube: &Cube,
    other: &OtherFactor,
    quad: &WhitneyQuadrature,
) -> Result<f64> {
    grid.check_member(cube)?;
    let dim = if axis == 0 { kernel.n } else { kernel.m };
    if grid.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: grid.dim() });
    }
    let p = grid.params();
    let h = p.cell_side();
    let per_axis = grid.cube_len_cells(cube.level()) as usize;
    let count = per_axis.pow(dim as u32);
    let lo = cube.lo();
    let cell_lo = |k: usize| -> Vec<f64> {
        let mut k = k;
        let mut c = alloc::vec![0.0; dim];
        for a in (0..dim).rev() {
            c[a] = lo[a] + (k % per_axis) as f64 * h;
            k /= per_axis;
        }
        c
    };
    let cells: Vec<Vec<f64>> = (0..count).map(cell_lo).collect();
    let centres: Vec<Vec<f64>> = cells.iter().map(|c| c.iter().map(|v| v + h / 2.0).collect()).collect();
    let vol = powi(h, dim as i32);
    let mut acc = 0.0;
    for level in cube.level()..=p.level_max {
        for (t, w) in quad.nodes(exp2i(-level)) {
            for x in &centres {
                let mut inner = 0.0;
                for c in &cells {
                    inner += kernel.cell_integral(axis, t, x, c, h, other.t, &other.x, &other.y)?;
                    if let Some(z) = &other.z {
                        inner -= kernel.cell_integral(axis, t, x, c, h, other.t, &other.x, z)?;
                    }
                }
                acc += w * inner * inner * vol;
            }
        }
    }
    Ok(sqrt(acc))
}

/// Sup over cubes and sampled other-factor data of the Carleson box
/// quantity divided by `|I|^{1/2}` times the size (or Hölder) bound of the
/// other factor. Sample `s` uses cube `s mod cubes.len()`. The scale
/// integral is truncated at the finest window level.
pub fn check_carleson_standard(
    kernel: &BiParamKernel,
    grid: &DyadicGrid,
    cubes: &[Cube],
    direction: CarlesonDirection,
    plan: &SamplingPlan,
    quad: &WhitneyQuadrature,
) -> Result<EstimateReport> {
    if cubes.is_empty() {
        return Err(Error::Empty("cube sample"));
    }
    plan.validate()?;
    let axis = direction.axis();
    let (dim_o, exp_o) = if axis == 0 { (kernel.m, kernel.beta) } else { (kernel.n, kernel.alpha) };
    let mut report = EstimateReport::new(direction.id());
    for s in 0..plan.samples {
        let cube = &cubes[(s % cubes.len() as u64) as usize];
        let mut rng = stream(plan.seed, s);
        let k = plan.strata;
        let o = FactorSample::draw(&mut rng, dim_o, plan, (s / cubes.len() as u64) % k, (s / (cubes.len() as u64 * k)) % k);
        let other = OtherFactor { t: o.t, x: o.x.clone(), y: o.y.clone(), z: direction.is_holder().then(|| o.z.clone()) };
        let lhs = carleson_box_quantity(kernel, axis, grid, cube, &other, quad)?;
        let bound = if direction.is_holder() {
            holder_factor(dim_o, exp_o, o.t, o.dist_xy(), o.dist_yz())
        } else {
            size_factor(dim_o, exp_o, o.t, o.dist_xy())
        };
        let rhs = sqrt(cube.volume()) * bound;
        let mut w = alloc::vec![cube.level() as f64, o.t];
        w.extend_from_slice(cube.lo());
        for v in [&o.x, &o.y, &o.z] {
            w.extend_from_slice(v);
        }
        w.push(lhs);
        report.observe(lhs / rhs, &w);
    }
    Ok(report)
}

pub const BIPARAM_CARLESON: &str = "biparam-carleson";

/// `sup_Ω (sum_{I x J ⊆ Ω} C_IJ) / |Ω|` over a family of unions of grid
/// rectangles, with `C_IJ` the Whitney integrals of `theta 1`. Empty sets
/// contribute the ratio 0. The witness is `[index, sum, |Ω|]`.
pub fn check_biparam_carleson(
    kernel: &BiParamKernel,
    g1: &DyadicGrid,
    g2: &DyadicGrid,
    family: &[OpenSetOmega],
    quad: &WhitneyQuadrature,
) -> Result<EstimateReport> {
    let (m1, m2) = (Mesh::of(g1), Mesh::of(g2));
    let field = SquareField::compute(kernel, &ProductMeshFunction::from_fn(m1, m2, |_, _| 1.0), quad)?;
    let mut report = EstimateReport::new(BIPARAM_CARLESON);
    for (k, omega) in family.iter().enumerate() {
        let (o1, o2) = omega.grids();
        for (g, o) in [(g1, o1), (g2, o2)] {
            if g != o {
                return Err(Error::GridMismatch { expected: g.id(), found: o.id() });
            }
        }
        let measure = omega.measure();
        let sum = rectangle_sum(&field, omega)?;
        let ratio = if measure > 0.0 { sum / measure } else { 0.0 };
        report.observe(ratio, &[k as f64, sum, measure]);
    }
    Ok(report)
}
