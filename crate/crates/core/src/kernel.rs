//! Bi-parameter kernels and their action on mesh functions.
//!
//! The structured kernels are products of two convolution factors
//! `psi_t(u) = phi_t(u) - phi_{2t}(u)`, `phi_t(u) = c_n t^a / (t + |u|)^{n+a}`,
//! optionally modulated by a bounded multiplier `b(y)`:
//!
//! `s_{t1,t2}(x, y) = lambda * psi^n_{t1}(x1 - y1) psi^m_{t2}(x2 - y2) b(y)`.
//!
//! On mesh functions the kernels act on the periodic domain box: each factor
//! becomes a circulant matrix whose entries are integrals of `psi_t` over a
//! cell and all its periodic images. For `n = 1` the cell integrals use the
//! closed-form antiderivative of `phi_t`; in higher dimension they use the
//! midpoint rule. Image sums are truncated, and the truncated mass is spread
//! uniformly over the row so that every row integrates to the exact mass of
//! the factor. In particular the cancellative kernel annihilates constants to
//! rounding error.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{bail, Error, Result};
use crate::haar::{Mesh, MeshFunction, ProductMeshFunction};
use crate::linalg::Matrix;
use crate::math::{gamma, powf, sqrt, PI};
use crate::rng;

/// `omega_{n-1}`: surface measure of the unit sphere in `R^n` (2 for `n = 1`).
pub fn sphere_area(n: usize) -> f64 {
    let h = n as f64 / 2.0;
    2.0 * powf(PI, h) / gamma(h)
}

/// Normalisation making `phi_t` a probability density in `R^n`.
pub fn phi_constant(n: usize, alpha: f64) -> f64 {
    let beta = gamma(n as f64) * gamma(alpha) / gamma(n as f64 + alpha);
    1.0 / (sphere_area(n) * beta)
}

/// `∫_{|u| > d} t^a / (t + |u|)^{n+a} du`, bounded by `omega_{n-1} t^a / (a (t + d)^a)`.
pub fn size_tail_bound(n: usize, alpha: f64, t: f64, d: f64) -> f64 {
    sphere_area(n) * powf(t, alpha) / (alpha * powf(t + d.max(0.0), alpha))
}

/// Size majorant `t^a / (t + r)^{n+a}`.
pub fn size_majorant(n: usize, alpha: f64, t: f64, r: f64) -> f64 {
    powf(t, alpha) / powf(t + r, n as f64 + alpha)
}

/// Radial profile sampled on `rho >= 0`, acting as `psi_t(u) = t^{-n} p(|u| / t)`.
/// Beyond the last sample the profile continues with the size law
/// `p(rho) ∝ (1 + rho)^{-(n+a)}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedProfile {
    dim: usize,
    alpha: f64,
    rho: Vec<f64>,
    values: Vec<f64>,
    mass: f64,
}

impl TabulatedProfile {
    pub fn new(dim: usize, alpha: f64, rho: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if rho.len() != values.len() || rho.len() < 2 {
            bail!(InvalidParams, "tabulated profile needs at least two (rho, value) samples of equal length");
        }
        if rho[0] != 0.0 || rho.windows(2).any(|w| w[1] <= w[0]) {
            bail!(InvalidParams, "tabulated rho must start at 0 and increase strictly");
        }
        if rho.iter().chain(&values).any(|v| !v.is_finite()) {
            bail!(InvalidParams, "tabulated profile has non-finite samples");
        }
        if dim == 0 || dim > crate::dyadic::MAX_DIM || !(alpha > 0.0) {
            bail!(InvalidParams, "tabulated profile needs 1 <= n <= 3 and alpha > 0");
        }
        let mut p = Self { dim, alpha, rho, values, mass: 0.0 };
        p.mass = p.radial_mass();
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn samples(&self) -> (&[f64], &[f64]) {
        (&self.rho, &self.values)
    }

    pub fn profile(&self, s: f64) -> f64 {
        let last = self.rho.len() - 1;
        if s >= self.rho[last] {
            let decay = (1.0 + self.rho[last]) / (1.0 + s);
            return self.values[last] * powf(decay, self.dim as f64 + self.alpha);
        }
        let k = self.rho.partition_point(|&r| r <= s) - 1;
        let w = (s - self.rho[k]) / (self.rho[k + 1] - self.rho[k]);
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }

    fn radial_mass(&self) -> f64 {
        let n = self.dim as i32;
        let mut acc = 0.0;
        for w in self.rho.windows(2) {
            let steps = 64;
            let h = (w[1] - w[0]) / steps as f64;
            for i in 0..steps {
                let s = w[0] + (i as f64 + 0.5) * h;
                acc += self.profile(s) * crate::math::powi(s, n - 1) * h;
            }
        }
        let last = *self.rho.last().expect("non-empty");
        let p_last = *self.values.last().expect("non-empty");
        // ∫_{R}^∞ s^{n-1} (1+s)^{-(n+a)} ds ≈ (1+R)^{-a}/a (exact for n = 1).
        let tail = p_last * powf(1.0 + last, self.dim as f64 + self.alpha) * powf(1.0 + last, -self.alpha) / self.alpha;
        sphere_area(self.dim) * (acc + tail)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Profile {
    /// `psi_t = phi_t - phi_{2t}`.
    Cancellative,
    Tabulated(Arc<TabulatedProfile>),
}

/// One convolution factor `psi_t(u)` in `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvolutionFactor {
    dim: usize,
    alpha: f64,
    c: f64,
    profile: Profile,
}

impl ConvolutionFactor {
    pub fn cancellative(dim: usize, alpha: f64) -> Result<Self> {
        if dim == 0 || dim > crate::dyadic::MAX_DIM {
            bail!(InvalidParams, "dimension {} outside 1..=3", dim);
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            bail!(InvalidParams, "built-in kernels need alpha in (0, 1], got {}", alpha);
        }
        Ok(Self { dim, alpha, c: phi_constant(dim, alpha), profile: Profile::Cancellative })
    }

    pub fn tabulated(profile: TabulatedProfile) -> Self {
        Self { dim: profile.dim, alpha: profile.alpha, c: 0.0, profile: Profile::Tabulated(Arc::new(profile)) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    fn phi(&self, t: f64, r: f64) -> f64 {
        self.c * powf(t, self.alpha) / powf(t + r, self.dim as f64 + self.alpha)
    }

    fn radial(&self, t: f64, r: f64) -> f64 {
        match &self.profile {
            Profile::Cancellative => self.phi(t, r) - self.phi(2.0 * t, r),
            Profile::Tabulated(p) => p.profile(r / t) / crate::math::powi(t, self.dim as i32),
        }
    }

    /// `psi_t(u)` in `R^n`.
    pub fn value(&self, t: f64, u: &[f64]) -> f64 {
        let r = sqrt(u.iter().map(|v| v * v).sum());
        self.radial(t, r)
    }

    /// `∫ psi_t`, independent of `t`.
    pub fn mass(&self) -> f64 {
        match &self.profile {
            Profile::Cancellative => 0.0,
            Profile::Tabulated(p) => p.mass,
        }
    }

    /// `Phi_t(u) = ∫_0^u phi_t` for `n = 1`.
    fn phi_antiderivative(&self, t: f64, u: f64) -> f64 {
        let v = 0.5 * (1.0 - powf(t / (t + u.abs()), self.alpha));
        if u < 0.0 {
            -v
        } else {
            v
        }
    }

    /// `∫_{lo + [0,h)^n} psi_t(x - y) dy` in `R^n`.
    pub fn cell_integral(&self, t: f64, x: &[f64], lo: &[f64], h: f64) -> f64 {
        if self.dim == 1 && matches!(self.profile, Profile::Cancellative) {
            let (a, b) = (x[0] - lo[0] - h, x[0] - lo[0]);
            let big = |s: f64| self.phi_antiderivative(s, b) - self.phi_antiderivative(s, a);
            return big(t) - big(2.0 * t);
        }
        let mut r2 = 0.0;
        for k in 0..self.dim {
            let d = x[k] - (lo[k] + h / 2.0);
            r2 += d * d;
        }
        self.radial(t, sqrt(r2)) * crate::math::powi(h, self.dim as i32)
    }

    fn image_radius(&self) -> i64 {
        match self.dim {
            1 => 32,
            2 => 4,
            _ => 2,
        }
    }

    /// Entries `∫_{cell y + images} psi_t(x - u) du` for every mesh cell `y`.
    pub fn periodic_row(&self, mesh: &Mesh, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if !(t > 0.0) {
            return Err(Error::NonPositiveScale(t));
        }
        if x.len() != self.dim || mesh.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: x.len() });
        }
        let side = mesh.side();
        let h = mesh.cell_side();
        let kmax = self.image_radius();
        let span = (2 * kmax + 1) as usize;
        let images = span.pow(self.dim as u32);
        let mut row = vec![0.0; mesh.cell_count()];
        for (cell, out) in row.iter_mut().enumerate() {
            let c = mesh.cell_coords(cell);
            let mut acc = 0.0;
            for img in 0..images {
                let mut rest = img;
                let mut lo = [0.0; crate::dyadic::MAX_DIM];
                for k in 0..self.dim {
                    let shift = (rest % span) as i64 - kmax;
                    rest /= span;
                    // nearest image of the cell to x, then symmetric images around it
                    let base = c[k] as f64 * h;
                    let near = base + libm::round((x[k] - base - h / 2.0) / side) * side;
                    lo[k] = near + shift as f64 * side;
                }
                acc += self.cell_integral(t, x, &lo[..self.dim], h);
            }
            *out = acc;
        }
        let deficit = (self.mass() - row.iter().sum::<f64>()) / row.len() as f64;
        row.iter_mut().for_each(|v| *v += deficit);
        Ok(row)
    }

    /// Circulant matrix `K[x, y]` with `x` at cell centres.
    pub fn matrix(&self, mesh: &Mesh, t: f64) -> Result<Matrix> {
        let centre = mesh.cell_center(0);
        let row0 = self.periodic_row(mesh, t, &centre[..self.dim])?;
        let n = mesh.cells_per_axis();
        let count = mesh.cell_count();
        let mut k = Matrix::zeros(count, count);
        for x in 0..count {
            let cx = mesh.cell_coords(x);
            let out = k.row_mut(x);
            for (y, v) in out.iter_mut().enumerate() {
                let cy = mesh.cell_coords(y);
                let mut rel = [0usize; crate::dyadic::MAX_DIM];
                for a in 0..self.dim {
                    rel[a] = (cy[a] + n - cx[a]) % n;
                }
                *v = row0[mesh.flat_index(&rel)];
            }
        }
        Ok(k)
    }
}

/// A bounded multiplier `b(y)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Modulation {
    None,
    /// `b(y) = b1(y1) b2(y2)`.
    Separable { b1: MeshFunction, b2: MeshFunction },
    Full(ProductMeshFunction),
}

/// Recipes for multipliers on a mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MultiplierSpec {
    Constant(f64),
    /// Indicator of `{y : y_0 < side / 2}`.
    LeftHalf,
    /// Independent ±1 on the standard cubes of `level`, repeated periodically
    /// with period `2^{-period_level}` along every axis.
    RandomSigns { level: i32, period_level: i32, seed: u64 },
}

impl MultiplierSpec {
    pub fn sample(&self, mesh: &Mesh) -> Result<MeshFunction> {
        match *self {
            MultiplierSpec::Constant(c) => Ok(MeshFunction::constant(*mesh, c)),
            MultiplierSpec::LeftHalf => {
                let half = mesh.side() / 2.0;
                Ok(MeshFunction::from_fn(*mesh, |x| if x[0] < half { 1.0 } else { 0.0 }))
            }
            MultiplierSpec::RandomSigns { level, period_level, seed } => {
                let (signs, shift, n) = self.sign_table(mesh, level, period_level, seed)?;
                let values = (0..mesh.cell_count())
                    .map(|c| {
                        let cc = mesh.cell_coords(c);
                        let key = (0..mesh.dim()).fold(0usize, |acc, k| acc * n + ((cc[k] >> shift) % n));
                        signs[key]
                    })
                    .collect();
                MeshFunction::from_values(*mesh, values)
            }
        }
    }

    fn sign_table(&self, mesh: &Mesh, level: i32, period_level: i32, seed: u64) -> Result<(Vec<f64>, usize, usize)> {
        if !(mesh.level_min() <= period_level && period_level <= level && level <= mesh.level_max()) {
            bail!(InvalidParams, "need level_min <= period_level <= level <= level_max");
        }
        let n = 1usize << (level - period_level);
        let mut r = rng::stream(seed, 0);
        let signs = (0..n.pow(mesh.dim() as u32)).map(|_| rng::sign(&mut r)).collect();
        Ok((signs, (mesh.level_max() - level) as usize, n))
    }

    /// The multiplier on the product mesh; `LeftHalf` refers to the first
    /// coordinate of factor 1, `RandomSigns` uses one sign per rectangle.
    pub fn sample_product(&self, mesh1: &Mesh, mesh2: &Mesh) -> Result<ProductMeshFunction> {
        match *self {
            MultiplierSpec::Constant(c) => {
                Ok(ProductMeshFunction::from_fn(*mesh1, *mesh2, |_, _| c))
            }
            MultiplierSpec::LeftHalf => {
                let b1 = self.sample(mesh1)?;
                Ok(ProductMeshFunction::tensor(&b1, &MeshFunction::constant(*mesh2, 1.0)))
            }
            MultiplierSpec::RandomSigns { level, period_level, seed } => {
                let (s1, sh1, n1) = self.sign_table(mesh1, level, period_level, seed)?;
                let (_, sh2, n2) = self.sign_table(mesh2, level, period_level, seed)?;
                let per2 = n2.pow(mesh2.dim() as u32);
                let mut r = rng::stream(seed, 1);
                let table: Vec<f64> = (0..s1.len() * per2).map(|_| rng::sign(&mut r)).collect();
                let key = |mesh: &Mesh, c: usize, sh: usize, n: usize| {
                    let cc = mesh.cell_coords(c);
                    (0..mesh.dim()).fold(0usize, |acc, k| acc * n + ((cc[k] >> sh) % n))
                };
                let m = Matrix::from_fn(mesh1.cell_count(), mesh2.cell_count(), |i, j| {
                    table[key(mesh1, i, sh1, n1) * per2 + key(mesh2, j, sh2, n2)]
                });
                ProductMeshFunction::from_matrix(*mesh1, *mesh2, m)
            }
        }
    }
}

/// Arguments of a pointwise kernel evaluation.
#[derive(Clone, Copy, Debug)]
pub struct KernelPoint<'a> {
    pub t1: f64,
    pub t2: f64,
    pub x1: &'a [f64],
    pub x2: &'a [f64],
    pub y1: &'a [f64],
    pub y2: &'a [f64],
}

pub type PointwiseFn = Arc<dyn Fn(&KernelPoint<'_>) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum KernelForm {
    Structured { f1: ConvolutionFactor, f2: ConvolutionFactor, modulation: Modulation },
    /// An arbitrary evaluator. Acts on mesh functions by midpoint quadrature
    /// over the domain box, without periodic images.
    Pointwise(PointwiseFn),
}

impl fmt::Debug for KernelForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelForm::Structured { f1, f2, modulation } => f
                .debug_struct("Structured")
                .field("f1", f1)
                .field("f2", f2)
                .field("modulation", modulation)
                .finish(),
            KernelForm::Pointwise(_) => f.write_str("Pointwise(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BiParamKernel {
    pub label: String,
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub scale: f64,
    pub form: KernelForm,
}

/// A one-parameter kernel `s_t(x, y) = psi_t(x - y) b(y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneParamKernel {
    pub factor: ConvolutionFactor,
    pub multiplier: Option<MeshFunction>,
    pub scale: f64,
}

impl OneParamKernel {
    pub fn eval(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::NonPositiveScale(t));
        }
        let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let b = match &self.multiplier {
            Some(m) => m.values()[m.mesh().cell_of_point(y)],
            None => 1.0,
        };
        Ok(self.scale * self.factor.value(t, &u) * b)
    }

    /// `K(t) diag(b)` on the mesh.
    pub fn matrix(&self, mesh: &Mesh, t: f64) -> Result<Matrix> {
        let mut k = self.factor.matrix(mesh, t)?;
        scale_columns(&mut k, self.multiplier.as_ref().map(|m| m.values()), self.scale)?;
        Ok(k)
    }

    /// `theta_t g` at cell centres.
    pub fn apply(&self, g: &MeshFunction, t: f64) -> Result<Vec<f64>> {
        Ok(self.matrix(g.mesh(), t)?.matvec(g.values()))
    }
}

fn scale_columns(k: &mut Matrix, b: Option<&[f64]>, s: f64) -> Result<()> {
    if let Some(b) = b {
        if b.len() != k.cols() {
            bail!(ShapeMismatch, "multiplier has {} values for {} cells", b.len(), k.cols());
        }
    }
    for r in 0..k.rows() {
        for (c, v) in k.row_mut(r).iter_mut().enumerate() {
            *v *= s * b.map_or(1.0, |b| b[c]);
        }
    }
    Ok(())
}

/// `theta_{t1,t2} 1` at a point, with a bound on the part of the integral the
/// quadrature did not see.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaOne {
    pub value: f64,
    pub tail_bound: f64,
}

impl BiParamKernel {
    /// `psi^n ⊗ psi^m`.
    pub fn builtin_cancellative(n: usize, m: usize, alpha: f64, beta: f64) -> Result<Self> {
        Ok(Self {
            label: "cancellative".into(),
            n,
            m,
            alpha,
            beta,
            scale: 1.0,
            form: KernelForm::Structured {
                f1: ConvolutionFactor::cancellative(n, alpha)?,
                f2: ConvolutionFactor::cancellative(m, beta)?,
                modulation: Modulation::None,
            },
        })
    }

    /// `psi^n ⊗ psi^m · b(y)` for a general bounded `b` on the product mesh.
    pub fn builtin_paraproduct(n: usize, m: usize, alpha: f64, beta: f64, b: ProductMeshFunction) -> Result<Self> {
        let (m1, m2) = b.meshes();
        if m1.dim() != n || m2.dim() != m {
            return Err(Error::DimensionMismatch { expected: n, found: m1.dim() });
        }
        if b.values().as_slice().iter().any(|v| !v.is_finite()) {
            bail!(InvalidParams, "multiplier must be bounded");
        }
        let mut k = Self::builtin_cancellative(n, m, alpha, beta)?;
        k.label = "paraproduct".into();
        if let KernelForm::Structured { modulation, .. } = &mut k.form {
            *modulation = Modulation::Full(b);
        }
        Ok(k)
    }

    /// `(psi^n b1) ⊗ (psi^m b2)`: a tensor product of one-parameter kernels.
    pub fn tensor_paraproduct(alpha: f64, beta: f64, b1: MeshFunction, b2: MeshFunction) -> Result<Self> {
        let (n, m) = (b1.mesh().dim(), b2.mesh().dim());
        if b1.values().iter().chain(b2.values()).any(|v| !v.is_finite()) {
            bail!(InvalidParams, "multiplier must be bounded");
        }
        let mut k = Self::builtin_cancellative(n, m, alpha, beta)?;
        k.label = "tensor-paraproduct".into();
        if let KernelForm::Structured { modulation, .. } = &mut k.form {
            *modulation = Modulation::Separable { b1, b2 };
        }
        Ok(k)
    }

    /// Tensor of two tabulated radial profiles.
    pub fn tabulated(label: &str, p1: TabulatedProfile, p2: TabulatedProfile) -> Self {
        Self {
            label: label.into(),
            n: p1.dim,
            m: p2.dim,
            alpha: p1.alpha,
            beta: p2.alpha,
            scale: 1.0,
            form: KernelForm::Structured {
                f1: ConvolutionFactor::tabulated(p1),
                f2: ConvolutionFactor::tabulated(p2),
                modulation: Modulation::None,
            },
        }
    }

    pub fn pointwise(label: &str, n: usize, m: usize, alpha: f64, beta: f64, f: PointwiseFn) -> Self {
        Self { label: label.into(), n, m, alpha, beta, scale: 1.0, form: KernelForm::Pointwise(f) }
    }

    pub fn scaled(mut self, lambda: f64) -> Self {
        self.scale *= lambda;
        self
    }

    pub fn is_structured(&self) -> bool {
        matches!(self.form, KernelForm::Structured { .. })
    }

    /// Whether the kernel is a tensor product of one-parameter kernels.
    pub fn is_tensor(&self) -> bool {
        matches!(self.form, KernelForm::Structured { modulation: Modulation::None | Modulation::Separable { .. }, .. })
    }

    pub fn tensor_factors(&self) -> Result<(OneParamKernel, OneParamKernel)> {
        match &self.form {
            KernelForm::Structured { f1, f2, modulation } => {
                let (b1, b2) = match modulation {
                    Modulation::None => (None, None),
                    Modulation::Separable { b1, b2 } => (Some(b1.clone()), Some(b2.clone())),
                    Modulation::Full(_) => return Err(Error::NotTensor),
                };
                Ok((
                    OneParamKernel { factor: f1.clone(), multiplier: b1, scale: self.scale },
                    OneParamKernel { factor: f2.clone(), multiplier: b2, scale: 1.0 },
                ))
            }
            KernelForm::Pointwise(_) => Err(Error::NotTensor),
        }
    }

    fn multiplier_at(modulation: &Modulation, y1: &[f64], y2: &[f64]) -> f64 {
        match modulation {
            Modulation::None => 1.0,
            Modulation::Separable { b1, b2 } => {
                b1.values()[b1.mesh().cell_of_point(y1)] * b2.values()[b2.mesh().cell_of_point(y2)]
            }
            Modulation::Full(b) => {
                let (m1, m2) = b.meshes();
                b.get(m1.cell_of_point(y1), m2.cell_of_point(y2))
            }
        }
    }

    /// `s_{t1,t2}(x1, x2, y1, y2)`.
    pub fn eval(&self, p: &KernelPoint<'_>) -> Result<f64> {
        if !(p.t1 > 0.0) {
            return Err(Error::NonPositiveScale(p.t1));
        }
        if !(p.t2 > 0.0) {
            return Err(Error::NonPositiveScale(p.t2));
        }
        if p.x1.len() != self.n || p.y1.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: p.x1.len().max(p.y1.len()) });
        }
        if p.x2.len() != self.m || p.y2.len() != self.m {
            return Err(Error::DimensionMismatch { expected: self.m, found: p.x2.len().max(p.y2.len()) });
        }
        match &self.form {
            KernelForm::Structured { f1, f2, modulation } => {
                let u1: Vec<f64> = p.x1.iter().zip(p.y1).map(|(a, b)| a - b).collect();
                let u2: Vec<f64> = p.x2.iter().zip(p.y2).map(|(a, b)| a - b).collect();
                Ok(self.scale * f1.value(p.t1, &u1) * f2.value(p.t2, &u2) * Self::multiplier_at(modulation, p.y1, p.y2))
            }
            KernelForm::Pointwise(f) => Ok(self.scale * f(p)),
        }
    }

    /// `∫_{lo + [0,h)^d} s dy_axis` over a cell of one factor in `R^d`, with
    /// the other factor held at `(t_o, x_o, y_o)`. Exact for structured
    /// kernels (the multiplier is constant on mesh cells as long as `h` is a
    /// multiple of the mesh cell), midpoint rule otherwise.
    #[allow(clippy::too_many_arguments)]
    pub fn cell_integral(
        &self,
        axis: usize,
        t: f64,
        x: &[f64],
        lo: &[f64],
        h: f64,
        t_o: f64,
        x_o: &[f64],
        y_o: &[f64],
    ) -> Result<f64> {
        let centre: Vec<f64> = lo.iter().map(|l| l + h / 2.0).collect();
        let p = if axis == 0 {
            KernelPoint { t1: t, t2: t_o, x1: x, x2: x_o, y1: &centre, y2: y_o }
        } else {
            KernelPoint { t1: t_o, t2: t, x1: x_o, x2: x, y1: y_o, y2: &centre }
        };
        match &self.form {
            KernelForm::Structured { f1, f2, modulation } => {
                self.eval(&p)?;
                let (fa, fo) = if axis == 0 { (f1, f2) } else { (f2, f1) };
                let uo: Vec<f64> = x_o.iter().zip(y_o).map(|(a, b)| a - b).collect();
                Ok(self.scale
                    * fa.cell_integral(t, x, lo, h)
                    * fo.value(t_o, &uo)
                    * Self::multiplier_at(modulation, p.y1, p.y2))
            }
            KernelForm::Pointwise(_) => Ok(self.eval(&p)? * crate::math::powi(h, centre.len() as i32)),
        }
    }

    fn structured(&self) -> Result<(&ConvolutionFactor, &ConvolutionFactor, &Modulation)> {
        match &self.form {
            KernelForm::Structured { f1, f2, modulation } => Ok((f1, f2, modulation)),
            KernelForm::Pointwise(_) => bail!(Precondition, "operation needs a structured kernel"),
        }
    }

    fn check_meshes(&self, mesh1: &Mesh, mesh2: &Mesh) -> Result<()> {
        if mesh1.dim() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: mesh1.dim() });
        }
        if mesh2.dim() != self.m {
            return Err(Error::DimensionMismatch { expected: self.m, found: mesh2.dim() });
        }
        if let KernelForm::Structured { modulation, .. } = &self.form {
            let ok = match modulation {
                Modulation::None => true,
                Modulation::Separable { b1, b2 } => b1.mesh() == mesh1 && b2.mesh() == mesh2,
                Modulation::Full(b) => b.meshes() == (*mesh1, *mesh2),
            };
            if !ok {
                bail!(ShapeMismatch, "kernel multiplier lives on a different mesh");
            }
        }
        Ok(())
    }

    /// Factor operator along one axis (`0` or `1`): `K(t)` with the separable
    /// multiplier folded into its columns. The scale is folded into axis 0.
    pub fn factor_operator(&self, axis: usize, mesh: &Mesh, t: f64) -> Result<Matrix> {
        let (f1, f2, modulation) = self.structured()?;
        let (f, b) = match (axis, modulation) {
            (0, Modulation::Separable { b1, .. }) => (f1, Some(b1.values())),
            (0, _) => (f1, None),
            (_, Modulation::Separable { b2, .. }) => (f2, Some(b2.values())),
            (_, _) => (f2, None),
        };
        if mesh.dim() != f.dim() {
            return Err(Error::DimensionMismatch { expected: f.dim(), found: mesh.dim() });
        }
        let mut k = f.matrix(mesh, t)?;
        scale_columns(&mut k, b, if axis == 0 { self.scale } else { 1.0 })?;
        Ok(k)
    }

    /// One row of [`Self::factor_operator`] at an arbitrary point `x`.
    pub fn factor_row(&self, axis: usize, mesh: &Mesh, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let (f1, f2, modulation) = self.structured()?;
        let (f, b) = match (axis, modulation) {
            (0, Modulation::Separable { b1, .. }) => (f1, Some(b1.values())),
            (0, _) => (f1, None),
            (_, Modulation::Separable { b2, .. }) => (f2, Some(b2.values())),
            (_, _) => (f2, None),
        };
        let mut row = f.periodic_row(mesh, t, x)?;
        let s = if axis == 0 { self.scale } else { 1.0 };
        for (k, v) in row.iter_mut().enumerate() {
            *v *= s * b.map_or(1.0, |b| b[k]);
        }
        Ok(row)
    }

    /// The input after the non-separable part of the multiplier: `b ∘ F` for
    /// a full multiplier, `F` otherwise.
    pub fn premodulate(&self, f: &Matrix) -> Result<Matrix> {
        let (_, _, modulation) = self.structured()?;
        match modulation {
            Modulation::Full(b) => {
                if b.values().rows() != f.rows() || b.values().cols() != f.cols() {
                    bail!(ShapeMismatch, "multiplier and function shapes differ");
                }
                let data = f.as_slice().iter().zip(b.values().as_slice()).map(|(x, y)| x * y).collect();
                Ok(Matrix::from_vec(f.rows(), f.cols(), data))
            }
            _ => Ok(f.clone()),
        }
    }

    /// `theta_{t1,t2} f` at every cell centre of the product mesh.
    pub fn theta_on_mesh(&self, f: &ProductMeshFunction, t1: f64, t2: f64) -> Result<Matrix> {
        let (m1, m2) = f.meshes();
        self.check_meshes(&m1, &m2)?;
        match &self.form {
            KernelForm::Structured { .. } => {
                let a1 = self.factor_operator(0, &m1, t1)?;
                let a2 = self.factor_operator(1, &m2, t2)?;
                Ok(a1.matmul(&self.premodulate(f.values())?).matmul_t(&a2))
            }
            KernelForm::Pointwise(_) => {
                let mut out = Matrix::zeros(m1.cell_count(), m2.cell_count());
                for i in 0..m1.cell_count() {
                    for j in 0..m2.cell_count() {
                        let x1 = m1.cell_center(i);
                        let x2 = m2.cell_center(j);
                        out.set(i, j, self.theta_apply(f, t1, t2, &x1[..m1.dim()], &x2[..m2.dim()])?);
                    }
                }
                Ok(out)
            }
        }
    }

    /// `theta_{t1,t2} f(x)` at an arbitrary point of the box.
    pub fn theta_apply(&self, f: &ProductMeshFunction, t1: f64, t2: f64, x1: &[f64], x2: &[f64]) -> Result<f64> {
        let (m1, m2) = f.meshes();
        self.check_meshes(&m1, &m2)?;
        if !(t1 > 0.0) {
            return Err(Error::NonPositiveScale(t1));
        }
        if !(t2 > 0.0) {
            return Err(Error::NonPositiveScale(t2));
        }
        match &self.form {
            KernelForm::Structured { f1, f2, modulation } => {
                let mut r1 = f1.periodic_row(&m1, t1, x1)?;
                let mut r2 = f2.periodic_row(&m2, t2, x2)?;
                if let Modulation::Separable { b1, b2 } = modulation {
                    r1.iter_mut().zip(b1.values()).for_each(|(r, b)| *r *= b);
                    r2.iter_mut().zip(b2.values()).for_each(|(r, b)| *r *= b);
                }
                let g = self.premodulate(f.values())?;
                Ok(self.scale * crate::linalg::dot(&g.vecmat(&r1), &r2))
            }
            KernelForm::Pointwise(_) => {
                let vol = f.cell_volume();
                let mut acc = 0.0;
                for i in 0..m1.cell_count() {
                    let y1 = m1.cell_center(i);
                    for j in 0..m2.cell_count() {
                        let v = f.get(i, j);
                        if v == 0.0 {
                            continue;
                        }
                        let y2 = m2.cell_center(j);
                        let p = KernelPoint { t1, t2, x1, x2, y1: &y1[..m1.dim()], y2: &y2[..m2.dim()] };
                        acc += self.eval(&p)? * v;
                    }
                }
                Ok(acc * vol)
            }
        }
    }

    /// `theta_{t1,t2} 1` at a point. Structured kernels act on the periodic
    /// box, where `1` is integrable and the value is exact. Pointwise kernels
    /// are integrated over the box and its nearest images (the box enlarged
    /// three times), and the rest is bounded by the size majorant with unit
    /// constant.
    pub fn theta_one(&self, mesh1: &Mesh, mesh2: &Mesh, t1: f64, t2: f64, x1: &[f64], x2: &[f64]) -> Result<ThetaOne> {
        self.check_meshes(mesh1, mesh2)?;
        let one = ProductMeshFunction::from_fn(*mesh1, *mesh2, |_, _| 1.0);
        match &self.form {
            KernelForm::Structured { .. } => Ok(ThetaOne { value: self.theta_apply(&one, t1, t2, x1, x2)?, tail_bound: 0.0 }),
            KernelForm::Pointwise(_) => {
                let (s1, s2) = (mesh1.side(), mesh2.side());
                let mut value = 0.0;
                let shifts = |dim: usize| -> Vec<Vec<f64>> {
                    let count = 3usize.pow(dim as u32);
                    (0..count)
                        .map(|mut c| {
                            (0..dim)
                                .map(|_| {
                                    let s = (c % 3) as f64 - 1.0;
                                    c /= 3;
                                    s
                                })
                                .collect()
                        })
                        .collect()
                };
                for sh1 in shifts(self.n) {
                    for sh2 in shifts(self.m) {
                        let y1: Vec<f64> = x1.iter().zip(&sh1).map(|(x, s)| x - s * s1).collect();
                        let y2: Vec<f64> = x2.iter().zip(&sh2).map(|(x, s)| x - s * s2).collect();
                        value += self.theta_apply(&one, t1, t2, &y1, &y2)?;
                    }
                }
                let d1 = (0..self.n).map(|k| (x1[k] + s1).min(2.0 * s1 - x1[k])).fold(f64::INFINITY, f64::min);
                let d2 = (0..self.m).map(|k| (x2[k] + s2).min(2.0 * s2 - x2[k])).fold(f64::INFINITY, f64::min);
                let full1 = 1.0 / phi_constant(self.n, self.alpha);
                let full2 = 1.0 / phi_constant(self.m, self.beta);
                let in1 = full1 - size_tail_bound(self.n, self.alpha, t1, d1).min(full1);
                let in2 = full2 - size_tail_bound(self.m, self.beta, t2, d2).min(full2);
                Ok(ThetaOne { value, tail_bound: self.scale.abs() * (full1 * full2 - in1 * in2) })
            }
        }
    }

    /// `theta_{t1,t2} 1` at every cell centre (structured kernels).
    pub fn theta_one_on_mesh(&self, mesh1: &Mesh, mesh2: &Mesh, t1: f64, t2: f64) -> Result<Matrix> {
        self.structured()?;
        let one = ProductMeshFunction::from_fn(*mesh1, *mesh2, |_, _| 1.0);
        self.theta_on_mesh(&one, t1, t2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::GridParams;
    use crate::rng::{stream, uniform};

    fn mesh(depth: i32) -> Mesh {
        Mesh::new(&GridParams::new(1, 1.0, 2, 0, depth).unwrap())
    }

    #[test]
    fn phi_is_normalised() {
        assert!((phi_constant(1, 1.0) - 0.5).abs() < 1e-14);
        assert!((phi_constant(1, 0.5) - 0.25).abs() < 1e-14);
        // n = 2, alpha = 1: omega_1 = 2 pi, B(2, 1) = 1/2.
        assert!((phi_constant(2, 1.0) - 1.0 / PI).abs() < 1e-12);
    }

    #[test]
    fn cell_integral_matches_fine_midpoint() {
        let f = ConvolutionFactor::cancellative(1, 1.0).unwrap();
        let (t, x, lo, h) = (0.05, 0.31, 0.2, 0.0625);
        let steps = 20000;
        let dh = h / steps as f64;
        let brute: f64 = (0..steps).map(|i| f.value(t, &[x - (lo + (i as f64 + 0.5) * dh)]) * dh).sum();
        assert!((f.cell_integral(t, &[x], &[lo], h) - brute).abs() < 1e-9);
    }

    #[test]
    fn cancellative_annihilates_constants() {
        let k = BiParamKernel::builtin_cancellative(1, 1, 1.0, 1.0).unwrap();
        let m = mesh(5);
        let mut r = stream(4, 0);
        for _ in 0..20 {
            let t1 = crate::rng::log_uniform(&mut r, 1.0 / 64.0, 1.0);
            let t2 = crate::rng::log_uniform(&mut r, 1.0 / 64.0, 1.0);
            let x1 = uniform(&mut r, 0.0, 1.0);
            let x2 = uniform(&mut r, 0.0, 1.0);
            assert!(k.theta_one(&m, &m, t1, t2, &[x1], &[x2]).unwrap().value.abs() < 1e-12);
        }
        assert!(k.theta_one_on_mesh(&m, &m, 0.1, 0.2).unwrap().as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_input_and_linearity() {
        let k = BiParamKernel::builtin_cancellative(1, 1, 1.0, 1.0).unwrap();
        let m = mesh(4);
        let mut r = stream(5, 0);
        let f = ProductMeshFunction::from_fn(m, m, |_, _| uniform(&mut r, -1.0, 1.0));
        let g = ProductMeshFunction::from_fn(m, m, |_, _| uniform(&mut r, -1.0, 1.0));
        let z = ProductMeshFunction::zeros(m, m);
        assert_eq!(k.theta_apply(&z, 0.1, 0.1, &[0.3], &[0.6]).unwrap(), 0.0);
        let a = k.theta_apply(&f, 0.1, 0.2, &[0.3], &[0.6]).unwrap();
        let b = k.theta_apply(&g, 0.1, 0.2, &[0.3], &[0.6]).unwrap();
        let ab = k.theta_apply(&f.add(&g).unwrap(), 0.1, 0.2, &[0.3], &[0.6]).unwrap();
        assert!((a + b - ab).abs() < 1e-12);
        assert!(matches!(k.theta_apply(&f, 0.0, 0.2, &[0.3], &[0.6]), Err(Error::NonPositiveScale(_))));
    }

    #[test]
    fn mesh_action_matches_pointwise_action_at_centres() {
        let m = mesh(4);
        let b = MultiplierSpec::RandomSigns { level: 2, period_level: 0, seed: 3 }.sample_product(&m, &m).unwrap();
        let k = BiParamKernel::builtin_paraproduct(1, 1, 1.0, 1.0, b).unwrap();
        let mut r = stream(6, 0);
        let f = ProductMeshFunction::from_fn(m, m, |_, _| uniform(&mut r, -1.0, 1.0));
        let th = k.theta_on_mesh(&f, 0.07, 0.2).unwrap();
        let (i, j) = (5, 11);
        let direct = k.theta_apply(&f, 0.07, 0.2, &m.cell_center(i)[..1], &m.cell_center(j)[..1]).unwrap();
        assert!((th.get(i, j) - direct).abs() < 1e-12);
    }

    #[test]
    fn paraproduct_limits() {
        let m = mesh(4);
        let zero = ProductMeshFunction::zeros(m, m);
        let kz = BiParamKernel::builtin_paraproduct(1, 1, 1.0, 1.0, zero).unwrap();
        let p = KernelPoint { t1: 0.1, t2: 0.1, x1: &[0.2], x2: &[0.3], y1: &[0.25], y2: &[0.4] };
        assert_eq!(kz.eval(&p).unwrap(), 0.0);
        let one = ProductMeshFunction::from_fn(m, m, |_, _| 1.0);
        let k1 = BiParamKernel::builtin_paraproduct(1, 1, 1.0, 1.0, one).unwrap();
        let kc = BiParamKernel::builtin_cancellative(1, 1, 1.0, 1.0).unwrap();
        assert_eq!(k1.eval(&p).unwrap(), kc.eval(&p).unwrap());
    }

    #[test]
    fn tensor_consistency() {
        let m = mesh(4);
        let b1 = MultiplierSpec::LeftHalf.sample(&m).unwrap();
        let b2 = MultiplierSpec::RandomSigns { level: 3, period_level: 1, seed: 1 }.sample(&m).unwrap();
        let k = BiParamKernel::tensor_paraproduct(1.0, 1.0, b1, b2).unwrap();
        let (o1, o2) = k.tensor_factors().unwrap();
        let mut r = stream(7, 0);
        let f = ProductMeshFunction::from_fn(m, m, |_, _| uniform(&mut r, -1.0, 1.0));
        let (t1, t2) = (0.1, 0.03);
        let full = k.theta_on_mesh(&f, t1, t2).unwrap();
        let a = o1.matrix(&m, t1).unwrap().matmul(f.values()).matmul_t(&o2.matrix(&m, t2).unwrap());
        let b = o1.matrix(&m, t1).unwrap().matmul(&f.values().matmul_t(&o2.matrix(&m, t2).unwrap()));
        for ((x, y), z) in full.as_slice().iter().zip(a.as_slice()).zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-10 && (x - z).abs() < 1e-10);
        }
        assert!(BiParamKernel::builtin_paraproduct(1, 1, 1.0, 1.0, f).unwrap().tensor_factors().is_err());
    }

    #[test]
    fn tabulated_profile_reproduces_cancellative() {
        let f = ConvolutionFactor::cancellative(1, 1.0).unwrap();
        let rho: Vec<f64> = (0..=4000).map(|i| i as f64 * 0.01).collect();
        let vals: Vec<f64> = rho.iter().map(|&s| f.value(1.0, &[s])).collect();
        let p = TabulatedProfile::new(1, 1.0, rho, vals).unwrap();
        assert!(p.mass.abs() < 3e-3, "{}", p.mass);
        let tf = ConvolutionFactor::tabulated(p);
        for &(t, u) in &[(0.1, 0.05), (0.3, 0.7), (0.02, 0.01)] {
            assert!((tf.value(t, &[u]) - f.value(t, &[u])).abs() < 1e-3 * f.value(t, &[0.0]).abs());
        }
    }

    #[test]
    fn theta_one_stable_under_mesh_refinement() {
        let coarse = mesh(5);
        let fine = mesh(7);
        let (t1, t2, x1, x2) = (0.1, 0.2, [0.45], [0.3]);
        let mut vals = [0.0; 2];
        for (v, m) in vals.iter_mut().zip([coarse, fine]) {
            let b1 = MultiplierSpec::LeftHalf.sample(&m).unwrap();
            let b2 = MultiplierSpec::Constant(1.0).sample(&m).unwrap();
            let k = BiParamKernel::tensor_paraproduct(1.0, 1.0, b1, b2).unwrap();
            *v = k.theta_one(&m, &m, t1, t2, &x1, &x2).unwrap().value;
        }
        // b2 = 1 makes the second factor annihilate constants.
        assert!(vals[0].abs() < 1e-12 && vals[1].abs() < 1e-12);
        let mut vals = [0.0; 2];
        for (v, m) in vals.iter_mut().zip([coarse, fine]) {
            let b = ProductMeshFunction::from_fn(m, m, |y1, y2| if y1[0] < 0.5 && y2[0] < 0.5 { 1.0 } else { 0.0 });
            let k = BiParamKernel::builtin_paraproduct(1, 1, 1.0, 1.0, b).unwrap();
            *v = k.theta_one(&m, &m, t1, t2, &x1, &x2).unwrap().value;
        }
        assert!(vals[1].abs() > 1e-3, "{:?}", vals);
        assert!((vals[0] - vals[1]).abs() < 0.05 * vals[1].abs(), "{:?}", vals);
    }

    #[test]
    fn pointwise_theta_one_reports_tail() {
        let k = BiParamKernel::pointwise("bump", 1, 1, 1.0, 1.0, Arc::new(|p: &KernelPoint<'_>| {
            size_majorant(1, 1.0, p.t1, (p.x1[0] - p.y1[0]).abs()) * size_majorant(1, 1.0, p.t2, (p.x2[0] - p.y2[0]).abs())
        }));
        let m = mesh(4);
        let r = k.theta_one(&m, &m, 0.1, 0.1, &[0.5], &[0.5]).unwrap();
        assert!(r.value > 0.0 && r.tail_bound > 0.0 && r.tail_bound < r.value);
    }
}
