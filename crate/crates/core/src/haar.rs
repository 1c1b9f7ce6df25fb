//! Haar calculus on the finest mesh of a level window.
//!
//! Functions are sampled one value per finest cell, so integrals, averages
//! and Haar pairings are exact finite sums. Cells are ordered row-major over
//! the index lattice, axis 0 slowest.
//!
//! The Haar coefficients of a single-factor function are stored densely: slot
//! 0 holds the pairing with `|top|^{-1/2} 1_top` (the only non-cancellative
//! function), followed by the cancellative coefficients level by level, cube
//! by cube (linear index), pattern by pattern. There are exactly as many slots
//! as mesh cells, and the transform is orthogonal.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::dyadic::{Cube, DyadicGrid, GridParams, MAX_DIM};
use crate::error::{bail, Error, Result};
use crate::linalg::Matrix;
use crate::math::{exp2i, sqrt};
use crate::rng::uniform;

/// The finest mesh of a level window in one factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mesh {
    dim: usize,
    level_min: i32,
    level_max: i32,
}

impl Mesh {
    pub fn new(params: &GridParams) -> Self {
        Self { dim: params.dim, level_min: params.level_min, level_max: params.level_max }
    }

    pub fn of(grid: &DyadicGrid) -> Self {
        Self::new(grid.params())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level_min(&self) -> i32 {
        self.level_min
    }

    pub fn level_max(&self) -> i32 {
        self.level_max
    }

    pub fn cells_per_axis(&self) -> usize {
        1usize << (self.level_max - self.level_min)
    }

    pub fn cell_count(&self) -> usize {
        self.cells_per_axis().pow(self.dim as u32)
    }

    pub fn cell_side(&self) -> f64 {
        exp2i(-self.level_max)
    }

    pub fn cell_volume(&self) -> f64 {
        exp2i(-self.level_max * self.dim as i32)
    }

    pub fn side(&self) -> f64 {
        exp2i(-self.level_min)
    }

    pub fn volume(&self) -> f64 {
        exp2i(-self.level_min * self.dim as i32)
    }

    pub fn cell_coords(&self, mut flat: usize) -> [usize; MAX_DIM] {
        let n = self.cells_per_axis();
        let mut c = [0usize; MAX_DIM];
        for k in (0..self.dim).rev() {
            c[k] = flat % n;
            flat /= n;
        }
        c
    }

    pub fn flat_index(&self, coords: &[usize]) -> usize {
        let n = self.cells_per_axis();
        coords[..self.dim].iter().fold(0, |acc, &c| acc * n + c)
    }

    pub fn cell_center(&self, flat: usize) -> [f64; MAX_DIM] {
        let h = self.cell_side();
        let c = self.cell_coords(flat);
        core::array::from_fn(|k| if k < self.dim { (c[k] as f64 + 0.5) * h } else { 0.0 })
    }

    /// Cell containing a point of the periodic box (coordinates are reduced
    /// modulo the box side).
    pub fn cell_of_point(&self, x: &[f64]) -> usize {
        let side = self.side();
        let h = self.cell_side();
        let n = self.cells_per_axis();
        let mut coords = [0usize; MAX_DIM];
        for k in 0..self.dim {
            let y = crate::math::rem_euclid(x[k], side);
            coords[k] = ((crate::math::floor(y / h)) as usize).min(n - 1);
        }
        self.flat_index(&coords)
    }

    fn check(&self, other: &Mesh) -> Result<()> {
        if self != other {
            bail!(ShapeMismatch, "meshes differ: {:?} vs {:?}", self, other);
        }
        Ok(())
    }
}

/// A function on the finest mesh of one factor.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshFunction {
    mesh: Mesh,
    values: Vec<f64>,
}

impl MeshFunction {
    pub fn zeros(mesh: Mesh) -> Self {
        Self { mesh, values: vec![0.0; mesh.cell_count()] }
    }

    pub fn constant(mesh: Mesh, c: f64) -> Self {
        Self { mesh, values: vec![c; mesh.cell_count()] }
    }

    pub fn from_values(mesh: Mesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.cell_count() {
            bail!(ShapeMismatch, "expected {} values, got {}", mesh.cell_count(), values.len());
        }
        Ok(Self { mesh, values })
    }

    /// Samples `f` at cell centres.
    pub fn from_fn(mesh: Mesh, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let values = (0..mesh.cell_count()).map(|c| f(&mesh.cell_center(c)[..mesh.dim])).collect();
        Self { mesh, values }
    }

    pub fn indicator(grid: &DyadicGrid, cube: &Cube) -> Result<Self> {
        grid.check_member(cube)?;
        let mut out = Self::zeros(Mesh::of(grid));
        for c in grid.cube_cells(cube) {
            out.values[c] = 1.0;
        }
        Ok(out)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.mesh.cell_volume()
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.mesh.check(&other.mesh)?;
        Ok(crate::linalg::dot(&self.values, &other.values) * self.mesh.cell_volume())
    }

    pub fn norm_sq(&self) -> f64 {
        crate::linalg::dot(&self.values, &self.values) * self.mesh.cell_volume()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.mesh.check(&other.mesh)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Self { mesh: self.mesh, values })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { mesh: self.mesh, values: self.values.iter().map(|v| v * s).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A function on the product of two factor meshes; rows index factor 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductMeshFunction {
    mesh1: Mesh,
    mesh2: Mesh,
    values: Matrix,
}

impl ProductMeshFunction {
    pub fn zeros(mesh1: Mesh, mesh2: Mesh) -> Self {
        Self { mesh1, mesh2, values: Matrix::zeros(mesh1.cell_count(), mesh2.cell_count()) }
    }

    pub fn from_matrix(mesh1: Mesh, mesh2: Mesh, values: Matrix) -> Result<Self> {
        if values.rows() != mesh1.cell_count() || values.cols() != mesh2.cell_count() {
            bail!(
                ShapeMismatch,
                "expected {}x{} values, got {}x{}",
                mesh1.cell_count(),
                mesh2.cell_count(),
                values.rows(),
                values.cols()
            );
        }
        Ok(Self { mesh1, mesh2, values })
    }

    pub fn from_fn(mesh1: Mesh, mesh2: Mesh, mut f: impl FnMut(&[f64], &[f64]) -> f64) -> Self {
        let values = Matrix::from_fn(mesh1.cell_count(), mesh2.cell_count(), |i, j| {
            f(&mesh1.cell_center(i)[..mesh1.dim], &mesh2.cell_center(j)[..mesh2.dim])
        });
        Self { mesh1, mesh2, values }
    }

    pub fn tensor(g: &MeshFunction, h: &MeshFunction) -> Self {
        let values = Matrix::from_fn(g.values.len(), h.values.len(), |i, j| g.values[i] * h.values[j]);
        Self { mesh1: g.mesh, mesh2: h.mesh, values }
    }

    pub fn meshes(&self) -> (Mesh, Mesh) {
        (self.mesh1, self.mesh2)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }

    pub fn cell_volume(&self) -> f64 {
        self.mesh1.cell_volume() * self.mesh2.cell_volume()
    }

    pub fn integral(&self) -> f64 {
        self.values.as_slice().iter().sum::<f64>() * self.cell_volume()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.sum_sq() * self.cell_volume()
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check(other)?;
        Ok(crate::linalg::dot(self.values.as_slice(), other.values.as_slice()) * self.cell_volume())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        let data = self.values.as_slice().iter().zip(other.values.as_slice()).map(|(a, b)| a + b).collect();
        Ok(Self { mesh1: self.mesh1, mesh2: self.mesh2, values: Matrix::from_vec(self.values.rows(), self.values.cols(), data) })
    }

    pub fn scale(&self, s: f64) -> Self {
        let data = self.values.as_slice().iter().map(|v| v * s).collect();
        Self { mesh1: self.mesh1, mesh2: self.mesh2, values: Matrix::from_vec(self.values.rows(), self.values.cols(), data) }
    }

    pub fn get(&self, c1: usize, c2: usize) -> f64 {
        self.values.get(c1, c2)
    }

    fn check(&self, other: &Self) -> Result<()> {
        self.mesh1.check(&other.mesh1)?;
        self.mesh2.check(&other.mesh2)
    }
}

/// `(-1)^{|eta & eps|}`: sign of `h^eta` on the child with orientation `eps`.
#[inline]
pub fn haar_sign(eta: u8, eps: u8) -> f64 {
    if (eta & eps).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Orthonormal Haar basis of one grid, with a fast transform.
#[derive(Clone, Debug)]
pub struct HaarBasis {
    grid: DyadicGrid,
    /// For each level `j > level_min`, every cube's parent (linear index) and
    /// orientation inside the parent.
    parents: Vec<Vec<(u32, u8)>>,
    /// First coefficient slot of each level `j < level_max`.
    offsets: Vec<usize>,
}

impl HaarBasis {
    pub fn new(grid: &DyadicGrid) -> Result<Self> {
        let p = *grid.params();
        let dim = p.dim;
        let n = grid.cells_per_axis() as u64;
        let mut parents = Vec::with_capacity(p.depth() as usize);
        for level in (p.level_min + 1)..=p.level_max {
            let half = grid.cube_len_cells(level);
            let mut map = Vec::with_capacity(grid.cube_count(level));
            for cube in grid.cubes_at(level)? {
                let parent = grid.parent(&cube)?;
                let sc = grid.start_cell(&cube);
                let sp = grid.start_cell(&parent);
                let mut eps = 0u8;
                for k in 0..dim {
                    if (sc[k] + n - sp[k]) % n / half == 1 {
                        eps |= 1 << k;
                    }
                }
                map.push((grid.linear_index(&parent) as u32, eps));
            }
            parents.push(map);
        }
        let patterns = (1usize << dim) - 1;
        let mut offsets = Vec::with_capacity(p.depth() as usize);
        let mut next = 1;
        for level in p.level_min..p.level_max {
            offsets.push(next);
            next += grid.cube_count(level) * patterns;
        }
        debug_assert_eq!(next, grid.cell_count());
        Ok(Self { grid: grid.clone(), parents, offsets })
    }

    pub fn grid(&self) -> &DyadicGrid {
        &self.grid
    }

    pub fn mesh(&self) -> Mesh {
        Mesh::of(&self.grid)
    }

    pub fn len(&self) -> usize {
        self.grid.cell_count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn patterns(&self) -> usize {
        (1usize << self.grid.dim()) - 1
    }

    /// Slot of `h_I^eta` (`eta != 0`); the top cube with `eta = 0` maps to slot 0.
    pub fn coefficient_index(&self, cube: &Cube, eta: u8) -> Result<usize> {
        self.grid.check_member(cube)?;
        let p = self.grid.params();
        if eta == 0 {
            if cube.level() == p.level_min {
                return Ok(0);
            }
            bail!(InvalidParams, "non-cancellative Haar functions are only stored for the top cube");
        }
        if eta as usize > self.patterns() {
            bail!(InvalidParams, "pattern {:#b} has more than {} axes", eta, self.grid.dim());
        }
        if cube.level() >= p.level_max {
            bail!(OutsideWindow, "cube at level {} has no resolvable children", cube.level());
        }
        let off = self.offsets[(cube.level() - p.level_min) as usize];
        Ok(off + self.grid.linear_index(cube) * self.patterns() + (eta as usize - 1))
    }

    /// The cube and pattern stored in a slot; slot 0 is the top cube with `eta = 0`.
    pub fn describe(&self, index: usize) -> Result<(Cube, u8)> {
        let p = self.grid.params();
        if index == 0 {
            return Ok((self.grid.cube_from_linear(p.level_min, 0)?, 0));
        }
        if index >= self.len() {
            bail!(InvalidParams, "slot {} out of range", index);
        }
        let li = self.offsets.partition_point(|&o| o <= index) - 1;
        let rel = index - self.offsets[li];
        let cube = self.grid.cube_from_linear(p.level_min + li as i32, rel / self.patterns())?;
        Ok((cube, (rel % self.patterns()) as u8 + 1))
    }

    /// Level of the cube of each slot (slot 0 reports the top level).
    pub fn slot_levels(&self) -> Vec<i32> {
        let p = self.grid.params();
        let mut out = vec![p.level_min; self.len()];
        for (li, &off) in self.offsets.iter().enumerate() {
            let count = self.grid.cube_count(p.level_min + li as i32) * self.patterns();
            out[off..off + count].iter_mut().for_each(|l| *l = p.level_min + li as i32);
        }
        out
    }

    /// All slots in order, with their cube and pattern.
    pub fn slots(&self) -> Vec<(Cube, u8)> {
        (0..self.len()).map(|i| self.describe(i).expect("slot in range")).collect()
    }

    /// Mesh values to coefficients.
    pub fn analyze(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.len() {
            bail!(ShapeMismatch, "expected {} values, got {}", self.len(), values.len());
        }
        let p = *self.grid.params();
        let vol = Mesh::of(&self.grid).cell_volume();
        let kids = 1usize << p.dim;
        let mut out = vec![0.0; self.len()];
        let mut sums: Vec<f64> = values.iter().map(|v| v * vol).collect();
        for level in (p.level_min..p.level_max).rev() {
            let map = &self.parents[(level - p.level_min) as usize];
            let mut child = vec![0.0; self.grid.cube_count(level) * kids];
            for (c, &(parent, eps)) in map.iter().enumerate() {
                child[parent as usize * kids + eps as usize] = sums[c];
            }
            let norm = 1.0 / sqrt(exp2i(-level * p.dim as i32));
            let off = self.offsets[(level - p.level_min) as usize];
            let pats = self.patterns();
            let mut next = vec![0.0; self.grid.cube_count(level)];
            for (q, s) in next.iter_mut().enumerate() {
                let ch = &child[q * kids..(q + 1) * kids];
                *s = ch.iter().sum();
                for eta in 1..=pats {
                    let acc: f64 = ch.iter().enumerate().map(|(eps, v)| haar_sign(eta as u8, eps as u8) * v).sum();
                    out[off + q * pats + eta - 1] = acc * norm;
                }
            }
            sums = next;
        }
        out[0] = sums[0] / sqrt(crate::math::powi(p.side(), p.dim as i32));
        Ok(out)
    }

    /// Coefficients to mesh values.
    pub fn synthesize(&self, coefs: &[f64]) -> Result<Vec<f64>> {
        if coefs.len() != self.len() {
            bail!(ShapeMismatch, "expected {} coefficients, got {}", self.len(), coefs.len());
        }
        let p = *self.grid.params();
        let kids = 1usize << p.dim;
        let pats = self.patterns();
        // Cube integrals, coarse to fine.
        let mut sums = vec![coefs[0] * sqrt(crate::math::powi(p.side(), p.dim as i32))];
        for level in p.level_min..p.level_max {
            let vol = exp2i(-level * p.dim as i32);
            let sq = sqrt(vol);
            let off = self.offsets[(level - p.level_min) as usize];
            let map = &self.parents[(level - p.level_min) as usize];
            let mut next = vec![0.0; map.len()];
            for (c, &(parent, eps)) in map.iter().enumerate() {
                let q = parent as usize;
                let mut v = sums[q] / vol;
                for eta in 1..=pats {
                    v += coefs[off + q * pats + eta - 1] * haar_sign(eta as u8, eps) / sq;
                }
                next[c] = v * vol / kids as f64;
            }
            sums = next;
        }
        let vol = Mesh::of(&self.grid).cell_volume();
        Ok(sums.into_iter().map(|s| s / vol).collect())
    }

    /// Dense matrix `V[c, i] = h_i(cell c)` of all basis functions.
    pub fn value_matrix(&self) -> Result<Matrix> {
        let n = self.len();
        let mut v = Matrix::zeros(n, n);
        for i in 0..n {
            let (cube, eta) = self.describe(i)?;
            let h = haar_function(&self.grid, &cube, eta)?;
            for (c, &x) in h.values.iter().enumerate() {
                if x != 0.0 {
                    v.set(c, i, x);
                }
            }
        }
        Ok(v)
    }
}

/// `h_I^eta` on the mesh. `eta = 0` gives `|I|^{-1/2} 1_I`.
pub fn haar_function(grid: &DyadicGrid, cube: &Cube, eta: u8) -> Result<MeshFunction> {
    grid.check_member(cube)?;
    if cube.level() >= grid.params().level_max {
        bail!(OutsideWindow, "cube at level {} is at the finest mesh level", cube.level());
    }
    if eta as usize >= 1 << grid.dim() {
        bail!(InvalidParams, "pattern {:#b} has more than {} axes", eta, grid.dim());
    }
    let mut out = MeshFunction::zeros(Mesh::of(grid));
    let norm = 1.0 / sqrt(cube.volume());
    for (eps, child) in grid.children(cube)?.iter().enumerate() {
        let v = norm * haar_sign(eta, eps as u8);
        for c in grid.cube_cells(child) {
            out.values[c] = v;
        }
    }
    Ok(out)
}

/// Value of `h_I^eta` on a strictly smaller grid cube `q ⊆ I` (zero if `q` is
/// outside `I`).
pub fn haar_value_on(grid: &DyadicGrid, cube: &Cube, eta: u8, q: &Cube) -> Result<f64> {
    if q.level() <= cube.level() {
        bail!(Precondition, "cube at level {} is not strictly finer than {}", q.level(), cube.level());
    }
    let child = grid.ancestor(q, (q.level() - cube.level() - 1) as u32)?;
    if grid.parent(&child)? != *cube {
        return Ok(0.0);
    }
    let kids = grid.children(cube)?;
    let eps = kids.iter().position(|k| *k == child).expect("child of its parent") as u8;
    Ok(haar_sign(eta, eps) / sqrt(cube.volume()))
}

/// `<f>_I`.
pub fn cube_average(grid: &DyadicGrid, f: &MeshFunction, cube: &Cube) -> Result<f64> {
    Mesh::of(grid).check(&f.mesh)?;
    let cells = grid.cube_cells(cube);
    grid.check_member(cube)?;
    Ok(cells.iter().map(|&c| f.values[c]).sum::<f64>() / cells.len() as f64)
}

/// `Δ_I f = sum_{children K} <f>_K 1_K - <f>_I 1_I`.
pub fn martingale_difference(grid: &DyadicGrid, f: &MeshFunction, cube: &Cube) -> Result<MeshFunction> {
    let avg = cube_average(grid, f, cube)?;
    let mut out = MeshFunction::zeros(f.mesh);
    for child in grid.children(cube)? {
        let a = cube_average(grid, f, &child)? - avg;
        for c in grid.cube_cells(&child) {
            out.values[c] = a;
        }
    }
    Ok(out)
}

/// `s^k_I = -1_{(I^{(k-1)})^c} <h_{I^{(k)}}>_{I^{(k-1)}} + sum_{siblings K of I^{(k-1)}} 1_K h_{I^{(k)}}`,
/// where `h_{I^{(k)}}` carries the pattern `eta`.
pub fn s_k_correction(grid: &DyadicGrid, cube: &Cube, k: u32, eta: u8) -> Result<MeshFunction> {
    if k == 0 {
        bail!(Precondition, "s^k_I needs k >= 1");
    }
    let top = grid.ancestor(cube, k)?;
    let inner = grid.ancestor(cube, k - 1)?;
    let h = haar_function(grid, &top, eta)?;
    let avg = cube_average(grid, &h, &inner)?;
    let mut out = MeshFunction::constant(h.mesh, -avg);
    for c in grid.cube_cells(&inner) {
        out.values[c] = 0.0;
    }
    for sib in grid.children(&top)? {
        if sib == inner {
            continue;
        }
        for c in grid.cube_cells(&sib) {
            out.values[c] += h.values[c];
        }
    }
    Ok(out)
}

/// `f_J(y1) = ∫ f(y1, y2) h_J^theta(y2) dy2`.
pub fn slice_pairing(f: &ProductMeshFunction, grid2: &DyadicGrid, cube: &Cube, theta: u8) -> Result<MeshFunction> {
    Mesh::of(grid2).check(&f.mesh2)?;
    let h = haar_function(grid2, cube, theta)?;
    let vol = f.mesh2.cell_volume();
    let cells = grid2.cube_cells(cube);
    let values = (0..f.values.rows())
        .map(|r| {
            let row = f.values.row(r);
            cells.iter().map(|&c| row[c] * h.values[c]).sum::<f64>() * vol
        })
        .collect();
    Ok(MeshFunction { mesh: f.mesh1, values })
}

/// Dense product Haar coefficients `f_{IJ}`; row/column 0 hold the pairings
/// with the non-cancellative top functions.
#[derive(Clone, Debug)]
pub struct HaarCoefficients {
    grid1: DyadicGrid,
    grid2: DyadicGrid,
    coefs: Matrix,
}

pub type ProductKey = ((Cube, u8), (Cube, u8));

impl HaarCoefficients {
    pub fn zeros(grid1: &DyadicGrid, grid2: &DyadicGrid) -> Self {
        Self { grid1: grid1.clone(), grid2: grid2.clone(), coefs: Matrix::zeros(grid1.cell_count(), grid2.cell_count()) }
    }

    pub fn from_matrix(grid1: &DyadicGrid, grid2: &DyadicGrid, coefs: Matrix) -> Result<Self> {
        if coefs.rows() != grid1.cell_count() || coefs.cols() != grid2.cell_count() {
            bail!(ShapeMismatch, "coefficient matrix does not match the grids");
        }
        Ok(Self { grid1: grid1.clone(), grid2: grid2.clone(), coefs })
    }

    pub fn grids(&self) -> (&DyadicGrid, &DyadicGrid) {
        (&self.grid1, &self.grid2)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.coefs
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.coefs
    }

    pub fn get(&self, b1: &HaarBasis, b2: &HaarBasis, key: &ProductKey) -> Result<f64> {
        let ((i, eta), (j, theta)) = key;
        Ok(self.coefs.get(b1.coefficient_index(i, *eta)?, b2.coefficient_index(j, *theta)?))
    }

    pub fn set(&mut self, b1: &HaarBasis, b2: &HaarBasis, key: &ProductKey, v: f64) -> Result<()> {
        let ((i, eta), (j, theta)) = key;
        self.coefs.set(b1.coefficient_index(i, *eta)?, b2.coefficient_index(j, *theta)?, v);
        Ok(())
    }

    /// Cancellative entries with `|v| > tol`, keyed by `((I, eta), (J, theta))`.
    pub fn to_sparse(&self, b1: &HaarBasis, b2: &HaarBasis, tol: f64) -> Result<BTreeMap<ProductKey, f64>> {
        let mut out = BTreeMap::new();
        for r in 1..self.coefs.rows() {
            for (c, &v) in self.coefs.row(r).iter().enumerate().skip(1) {
                if v.abs() > tol {
                    out.insert((b1.describe(r)?, b2.describe(c)?), v);
                }
            }
        }
        Ok(out)
    }

    /// `sum |f_{IJ}|^2` over cancellative pairs.
    pub fn cancellative_norm_sq(&self) -> f64 {
        (1..self.coefs.rows()).map(|r| self.coefs.row(r)[1..].iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn total_norm_sq(&self) -> f64 {
        self.coefs.sum_sq()
    }

    /// Whether every coefficient touching a non-cancellative function is zero,
    /// i.e. the function has zero top-level averages in each variable.
    pub fn is_in_window(&self, tol: f64) -> bool {
        self.coefs.row(0).iter().all(|v| v.abs() <= tol)
            && (0..self.coefs.rows()).all(|r| self.coefs.get(r, 0).abs() <= tol)
    }
}

/// Separable product transform: factor 1 first, then factor 2.
pub fn product_haar_transform(f: &ProductMeshFunction, b1: &HaarBasis, b2: &HaarBasis) -> Result<HaarCoefficients> {
    b1.mesh().check(&f.mesh1)?;
    b2.mesh().check(&f.mesh2)?;
    let t = f.values.transpose();
    let mut stage = Matrix::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        stage.row_mut(r).copy_from_slice(&b1.analyze(t.row(r))?);
    }
    let stage = stage.transpose();
    let mut coefs = Matrix::zeros(stage.rows(), stage.cols());
    for r in 0..stage.rows() {
        coefs.row_mut(r).copy_from_slice(&b2.analyze(stage.row(r))?);
    }
    Ok(HaarCoefficients { grid1: b1.grid.clone(), grid2: b2.grid.clone(), coefs })
}

pub fn inverse_product_haar_transform(c: &HaarCoefficients, b1: &HaarBasis, b2: &HaarBasis) -> Result<ProductMeshFunction> {
    if c.grid1 != b1.grid || c.grid2 != b2.grid {
        return Err(Error::GridMismatch { expected: b1.grid.id(), found: c.grid1.id() });
    }
    let mut stage = Matrix::zeros(c.coefs.rows(), c.coefs.cols());
    for r in 0..c.coefs.rows() {
        stage.row_mut(r).copy_from_slice(&b2.synthesize(c.coefs.row(r))?);
    }
    let t = stage.transpose();
    let mut vals = Matrix::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        vals.row_mut(r).copy_from_slice(&b1.synthesize(t.row(r))?);
    }
    ProductMeshFunction::from_matrix(b1.mesh(), b2.mesh(), vals.transpose())
}

/// Random in-window function: every cancellative product coefficient uniform
/// in `[-1, 1]`, all non-cancellative ones zero.
pub fn random_in_window<R: Rng + ?Sized>(b1: &HaarBasis, b2: &HaarBasis, rng: &mut R) -> Result<ProductMeshFunction> {
    let mut c = HaarCoefficients::zeros(&b1.grid, &b2.grid);
    for r in 1..c.coefs.rows() {
        for v in c.coefs.row_mut(r)[1..].iter_mut() {
            *v = uniform(rng, -1.0, 1.0);
        }
    }
    inverse_product_haar_transform(&c, b1, b2)
}

/// Random Haar polynomial with `terms` cancellative product terms (slots may
/// repeat, in which case coefficients add).
pub fn random_haar_polynomial<R: Rng + ?Sized>(
    b1: &HaarBasis,
    b2: &HaarBasis,
    terms: usize,
    rng: &mut R,
) -> Result<ProductMeshFunction> {
    if b1.len() < 2 || b2.len() < 2 {
        return Err(Error::Empty("cancellative Haar functions"));
    }
    let mut c = HaarCoefficients::zeros(&b1.grid, &b2.grid);
    for _ in 0..terms {
        let r = 1 + (rng.next_u64() % (b1.len() as u64 - 1)) as usize;
        let s = 1 + (rng.next_u64() % (b2.len() as u64 - 1)) as usize;
        let v = c.coefs.get(r, s) + uniform(rng, -1.0, 1.0);
        c.coefs.set(r, s, v);
    }
    inverse_product_haar_transform(&c, b1, b2)
}
