//! Random dyadic grids on a periodic domain box.
//!
//! A grid is described by a level window `[level_min, level_max]` and one
//! shift vector `w^i in {0,1}^n` per level. The cube of lattice index `k` at
//! level `j` is the standard cube translated by `sum_{i > j} 2^{-i} w^i`,
//! where the sum runs over the levels of the window. The domain box is the
//! top cube of the window, `[0, 2^{-level_min})^n`, and cubes are taken
//! modulo the box: a shifted cube that sticks out on one side re-enters on
//! the other. With this convention every grid tiles the box exactly at every
//! level, and since the shift at `level_max` is zero all grids with the same
//! window share one finest mesh of `2^{depth}` cells per axis.
//!
//! Cubes also carry their unwrapped lower corner, so they can be used as
//! ordinary half-open boxes in `R^n` (see [`cube_distance`]).

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::math::{exp2i, powf, sqrt};
use crate::rng;

pub const MAX_DIM: usize = 3;
pub const MAX_DEPTH: u32 = 40;

/// Grid id carried by cubes that do not belong to any grid.
pub const FREE_GRID: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridParams {
    pub dim: usize,
    /// Hölder exponent of the kernel in this factor.
    pub alpha: f64,
    /// Goodness separation: cubes at least `2^r` times larger are tested.
    pub r: u32,
    pub level_min: i32,
    pub level_max: i32,
}

impl GridParams {
    pub fn new(dim: usize, alpha: f64, r: u32, level_min: i32, level_max: i32) -> Result<Self> {
        let p = Self { dim, alpha, r, level_min, level_max };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM {
            bail!(InvalidParams, "dimension {} outside 1..={}", self.dim, MAX_DIM);
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bail!(InvalidParams, "alpha must be positive and finite, got {}", self.alpha);
        }
        if self.level_min > self.level_max {
            bail!(InvalidParams, "level_min {} > level_max {}", self.level_min, self.level_max);
        }
        let depth = (self.level_max as i64 - self.level_min as i64) as u64;
        if depth > MAX_DEPTH as u64 {
            bail!(InvalidParams, "window depth {} exceeds {}", depth, MAX_DEPTH);
        }
        if self.level_max.unsigned_abs() > 900 || self.level_min.unsigned_abs() > 900 {
            bail!(InvalidParams, "levels must stay inside the f64 exponent range");
        }
        Ok(())
    }

    /// `gamma = alpha / (2n + 2 alpha)`.
    pub fn gamma(&self) -> f64 {
        self.alpha / (2.0 * self.dim as f64 + 2.0 * self.alpha)
    }

    pub fn depth(&self) -> u32 {
        (self.level_max - self.level_min) as u32
    }

    /// Side length of the domain box.
    pub fn side(&self) -> f64 {
        exp2i(-self.level_min)
    }

    pub fn cell_side(&self) -> f64 {
        exp2i(-self.level_max)
    }

    pub fn cells_per_axis(&self) -> u64 {
        1u64 << self.depth()
    }

    pub fn cubes_per_axis(&self, level: i32) -> u64 {
        1u64 << (level - self.level_min)
    }

    pub fn in_window(&self, level: i32) -> bool {
        (self.level_min..=self.level_max).contains(&level)
    }

    pub fn with_r(mut self, r: u32) -> Self {
        self.r = r;
        self
    }

    fn check_level(&self, level: i32) -> Result<()> {
        if !self.in_window(level) {
            bail!(OutsideWindow, "level {} not in [{}, {}]", level, self.level_min, self.level_max);
        }
        Ok(())
    }
}

/// Goodness threshold `l(I)^gamma l(K)^(1 - gamma)` for cubes at levels `j`
/// (small) and `a` (large). Integer exponents are evaluated exactly.
pub fn goodness_threshold(gamma: f64, level_small: i32, level_large: i32) -> f64 {
    let e = -(gamma * level_small as f64 + (1.0 - gamma) * level_large as f64);
    let rounded = libm::round(e);
    if (e - rounded).abs() < 1e-12 {
        exp2i(rounded as i32)
    } else {
        libm::exp2(e)
    }
}

/// One shift vector per level of the window, stored as bit masks.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ShiftSequence {
    dim: usize,
    level_min: i32,
    bits: Vec<u8>,
}

impl ShiftSequence {
    pub fn zero(params: &GridParams) -> Self {
        Self { dim: params.dim, level_min: params.level_min, bits: vec![0; params.depth() as usize + 1] }
    }

    /// Bits drawn i.i.d. uniform on `{0,1}^n` for every level of the window.
    pub fn random<R: Rng + ?Sized>(params: &GridParams, rng: &mut R) -> Self {
        let mask = (1u16 << params.dim) as u32 - 1;
        let bits = (0..=params.depth()).map(|_| (rng.next_u32() & mask) as u8).collect();
        Self { dim: params.dim, level_min: params.level_min, bits }
    }

    /// `bits[i]` is the shift vector of level `level_min + i`; bit `k` is axis `k`.
    pub fn from_bits(params: &GridParams, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != params.depth() as usize + 1 {
            bail!(InvalidParams, "expected {} shift vectors, got {}", params.depth() + 1, bits.len());
        }
        let limit = 1u16 << params.dim;
        if let Some(b) = bits.iter().find(|&&b| b as u16 >= limit) {
            bail!(InvalidParams, "shift vector {:#b} has components outside {{0,1}}^{}", b, params.dim);
        }
        Ok(Self { dim: params.dim, level_min: params.level_min, bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, level: i32) -> u8 {
        self.bits[(level - self.level_min) as usize]
    }

    pub fn is_zero(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }
}

/// A half-open dyadic cube.
#[derive(Clone, Copy, Debug)]
pub struct Cube {
    grid_id: u64,
    level: i32,
    dim: u8,
    index: [i64; MAX_DIM],
    lo: [f64; MAX_DIM],
}

impl Cube {
    /// Standard cube `2^{-level} ([0,1)^n + index)` not attached to any grid.
    pub fn free(level: i32, index: &[i64]) -> Result<Self> {
        if index.is_empty() || index.len() > MAX_DIM {
            bail!(InvalidParams, "cube dimension {} outside 1..={}", index.len(), MAX_DIM);
        }
        let side = exp2i(-level);
        let mut idx = [0; MAX_DIM];
        let mut lo = [0.0; MAX_DIM];
        for (k, &i) in index.iter().enumerate() {
            idx[k] = i;
            lo[k] = i as f64 * side;
        }
        Ok(Self { grid_id: FREE_GRID, level, dim: index.len() as u8, index: idx, lo })
    }

    pub fn grid_id(&self) -> u64 {
        self.grid_id
    }

    pub fn level(&self) -> i32 {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn index(&self) -> &[i64] {
        &self.index[..self.dim()]
    }

    /// Unwrapped lower corner.
    pub fn lo(&self) -> &[f64] {
        &self.lo[..self.dim()]
    }

    pub fn side(&self) -> f64 {
        exp2i(-self.level)
    }

    /// Lebesgue measure `|I|`.
    pub fn volume(&self) -> f64 {
        exp2i(-self.level * self.dim as i32)
    }

    pub fn center(&self) -> [f64; MAX_DIM] {
        let mut c = [0.0; MAX_DIM];
        let h = self.side() / 2.0;
        for k in 0..self.dim() {
            c[k] = self.lo[k] + h;
        }
        c
    }

    /// Membership in the unwrapped half-open box.
    pub fn contains_point(&self, x: &[f64]) -> bool {
        let s = self.side();
        x.len() == self.dim() && x.iter().zip(self.lo()).all(|(&xi, &l)| l <= xi && xi < l + s)
    }

    fn key(&self) -> (u64, i32, u8, [i64; MAX_DIM]) {
        (self.grid_id, self.level, self.dim, self.index)
    }
}

impl PartialEq for Cube {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Cube {}

impl Hash for Cube {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

impl PartialOrd for Cube {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cube {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// ℓ∞ distance between the closed boxes of two cubes in `R^n`.
pub fn cube_distance(a: &Cube, b: &Cube) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    let (sa, sb) = (a.side(), b.side());
    let mut d: f64 = 0.0;
    for (&la, &lb) in a.lo().iter().zip(b.lo()) {
        let gap = (lb - (la + sa)).max(la - (lb + sb)).max(0.0);
        d = d.max(gap);
    }
    Ok(d)
}

/// `D(I1, I2) = l(I1) + l(I2) + d(I1, I2)`.
pub fn long_distance(a: &Cube, b: &Cube) -> Result<f64> {
    Ok(a.side() + b.side() + cube_distance(a, b)?)
}

/// `A_{I1 I2} = l1^{a/2} l2^{a/2} / D^{n+a} * |I1|^{1/2} |I2|^{1/2}` with `D`
/// computed in `R^n`.
pub fn a_coefficient(a: &Cube, b: &Cube, alpha: f64) -> Result<f64> {
    let d = cube_distance(a, b)?;
    Ok(a_coefficient_from(a.side(), b.side(), d, a.dim(), alpha))
}

/// The `A` coefficient from side lengths, a distance and the dimension.
pub fn a_coefficient_from(l1: f64, l2: f64, d: f64, dim: usize, alpha: f64) -> f64 {
    let n = dim as f64;
    let big_d = l1 + l2 + d;
    powf(l1 * l2, alpha / 2.0) / powf(big_d, n + alpha) * sqrt(powf(l1, n) * powf(l2, n))
}

#[derive(Clone, Debug)]
pub struct DyadicGrid {
    params: GridParams,
    shift: ShiftSequence,
    id: u64,
    /// Per level, the shift of the lattice in units of mesh cells.
    offsets: Vec<[u64; MAX_DIM]>,
}

impl PartialEq for DyadicGrid {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.shift == other.shift
    }
}

impl DyadicGrid {
    pub fn standard(params: GridParams) -> Result<Self> {
        params.validate()?;
        let shift = ShiftSequence::zero(&params);
        Self::with_shift(params, shift)
    }

    pub fn with_shift(params: GridParams, shift: ShiftSequence) -> Result<Self> {
        params.validate()?;
        if shift.dim != params.dim
            || shift.level_min != params.level_min
            || shift.bits.len() != params.depth() as usize + 1
        {
            bail!(InvalidParams, "shift sequence does not match grid parameters");
        }
        let depth = params.depth();
        let lmin = params.level_min;
        let mut offsets = vec![[0u64; MAX_DIM]; depth as usize + 1];
        for j in 0..=depth {
            let mut off = [0u64; MAX_DIM];
            for i in (j + 1)..=depth {
                let b = shift.get(lmin + i as i32);
                for (k, o) in off.iter_mut().enumerate().take(params.dim) {
                    if (b >> k) & 1 == 1 {
                        *o += 1u64 << (depth - i);
                    }
                }
            }
            offsets[j as usize] = off;
        }
        let id = grid_hash(&params, &shift);
        Ok(Self { params, shift, id, offsets })
    }

    /// Shift bits drawn from stream `(seed, 0)`.
    pub fn random(params: GridParams, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, 0);
        Self::random_from(params, &mut r)
    }

    pub fn random_from<R: Rng + ?Sized>(params: GridParams, rng: &mut R) -> Result<Self> {
        params.validate()?;
        let shift = ShiftSequence::random(&params, rng);
        Self::with_shift(params, shift)
    }

    pub fn params(&self) -> &GridParams {
        &self.params
    }

    pub fn shift(&self) -> &ShiftSequence {
        &self.shift
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn cells_per_axis(&self) -> usize {
        self.params.cells_per_axis() as usize
    }

    pub fn cell_count(&self) -> usize {
        self.cells_per_axis().pow(self.dim() as u32)
    }

    /// Accumulated shift of `level` along each axis, in the units of `R^n`.
    pub fn shift_at(&self, level: i32) -> Result<[f64; MAX_DIM]> {
        self.params.check_level(level)?;
        let off = self.offsets[(level - self.params.level_min) as usize];
        let h = self.params.cell_side();
        Ok(core::array::from_fn(|k| off[k] as f64 * h))
    }

    fn offset(&self, level: i32) -> &[u64; MAX_DIM] {
        &self.offsets[(level - self.params.level_min) as usize]
    }

    /// Number of mesh cells along one side of a cube at `level`.
    pub fn cube_len_cells(&self, level: i32) -> u64 {
        1u64 << (self.params.level_max - level)
    }

    pub fn cube_count(&self, level: i32) -> usize {
        (self.params.cubes_per_axis(level) as usize).pow(self.dim() as u32)
    }

    /// Cube of the given lattice index; indices are reduced modulo the box.
    pub fn cube(&self, level: i32, index: &[i64]) -> Result<Cube> {
        self.params.check_level(level)?;
        if index.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: index.len() });
        }
        let count = self.params.cubes_per_axis(level) as i64;
        let mut idx = [0i64; MAX_DIM];
        for (k, &i) in index.iter().enumerate() {
            idx[k] = i.rem_euclid(count);
        }
        Ok(self.make_cube(level, idx))
    }

    fn make_cube(&self, level: i32, idx: [i64; MAX_DIM]) -> Cube {
        let off = self.offset(level);
        let len = self.cube_len_cells(level);
        let h = self.params.cell_side();
        let mut lo = [0.0; MAX_DIM];
        for k in 0..self.dim() {
            lo[k] = (idx[k] as u64 * len + off[k]) as f64 * h;
        }
        Cube { grid_id: self.id, level, dim: self.dim() as u8, index: idx, lo }
    }

    /// Row-major linear index of a cube among the cubes of its level.
    pub fn linear_index(&self, cube: &Cube) -> usize {
        let count = self.params.cubes_per_axis(cube.level) as usize;
        cube.index().iter().fold(0usize, |acc, &i| acc * count + i as usize)
    }

    pub fn cube_from_linear(&self, level: i32, mut lin: usize) -> Result<Cube> {
        self.params.check_level(level)?;
        let count = self.params.cubes_per_axis(level) as usize;
        let mut idx = [0i64; MAX_DIM];
        for k in (0..self.dim()).rev() {
            idx[k] = (lin % count) as i64;
            lin /= count;
        }
        Ok(self.make_cube(level, idx))
    }

    pub fn cubes_at(&self, level: i32) -> Result<Vec<Cube>> {
        self.params.check_level(level)?;
        (0..self.cube_count(level)).map(|l| self.cube_from_linear(level, l)).collect()
    }

    /// All cubes of the window, coarse to fine.
    pub fn all_cubes(&self) -> Vec<Cube> {
        (self.params.level_min..=self.params.level_max)
            .flat_map(|l| self.cubes_at(l).unwrap_or_default())
            .collect()
    }

    pub fn check_member(&self, cube: &Cube) -> Result<()> {
        if cube.grid_id != self.id {
            return Err(Error::GridMismatch { expected: self.id, found: cube.grid_id });
        }
        self.params.check_level(cube.level)
    }

    /// Lattice index at `level` of the cube containing a mesh cell.
    pub fn index_of_cell(&self, cell: &[u64], level: i32) -> [i64; MAX_DIM] {
        let n = self.params.cells_per_axis();
        let off = self.offset(level);
        let shift = self.params.level_max - level;
        let mut idx = [0i64; MAX_DIM];
        for k in 0..self.dim() {
            idx[k] = (((cell[k] + n - off[k]) % n) >> shift) as i64;
        }
        idx
    }

    /// Linear index at `level` of the cube containing the mesh cell with the
    /// given row-major flat index.
    pub fn linear_of_cell(&self, flat_cell: usize, level: i32) -> usize {
        let cell = self.unflatten_cell(flat_cell);
        let idx = self.index_of_cell(&cell, level);
        let count = self.params.cubes_per_axis(level) as usize;
        idx[..self.dim()].iter().fold(0usize, |acc, &i| acc * count + i as usize)
    }

    pub fn unflatten_cell(&self, mut flat: usize) -> [u64; MAX_DIM] {
        let n = self.cells_per_axis();
        let mut c = [0u64; MAX_DIM];
        for k in (0..self.dim()).rev() {
            c[k] = (flat % n) as u64;
            flat /= n;
        }
        c
    }

    pub fn flatten_cell(&self, cell: &[u64]) -> usize {
        let n = self.cells_per_axis();
        cell[..self.dim()].iter().fold(0usize, |acc, &c| acc * n + c as usize)
    }

    /// First mesh cell of the cube along each axis (before wrapping).
    pub fn start_cell(&self, cube: &Cube) -> [u64; MAX_DIM] {
        let off = self.offset(cube.level);
        let len = self.cube_len_cells(cube.level);
        core::array::from_fn(|k| if k < self.dim() { cube.index[k] as u64 * len + off[k] } else { 0 })
    }

    /// Mesh cells of the cube along one axis, wrapped into the box.
    pub fn axis_cells(&self, cube: &Cube, axis: usize) -> impl Iterator<Item = usize> {
        let n = self.params.cells_per_axis();
        let start = self.start_cell(cube)[axis];
        let len = self.cube_len_cells(cube.level);
        (0..len).map(move |t| ((start + t) % n) as usize)
    }

    /// Row-major flat indices of all mesh cells of the cube.
    pub fn cube_cells(&self, cube: &Cube) -> Vec<usize> {
        let n = self.cells_per_axis();
        let mut out = vec![0usize];
        for axis in 0..self.dim() {
            let cells: Vec<usize> = self.axis_cells(cube, axis).collect();
            let mut next = Vec::with_capacity(out.len() * cells.len());
            for &base in &out {
                for &c in &cells {
                    next.push(base * n + c);
                }
            }
            out = next;
        }
        out
    }

    /// The unique cube of `level` containing `point`.
    pub fn locate(&self, point: &[f64], level: i32) -> Result<Cube> {
        if point.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: point.len() });
        }
        self.params.check_level(level)?;
        let side = self.params.side();
        let h = self.params.cell_side();
        let n = self.params.cells_per_axis();
        let mut cell = [0u64; MAX_DIM];
        for (k, &x) in point.iter().enumerate() {
            if !(0.0..side).contains(&x) {
                return Err(Error::OutOfDomain);
            }
            cell[k] = (crate::math::floor(x / h) as u64).min(n - 1);
        }
        Ok(self.make_cube(level, self.index_of_cell(&cell, level)))
    }

    pub fn parent(&self, cube: &Cube) -> Result<Cube> {
        self.ancestor(cube, 1)
    }

    /// `I^{(k)}`: the cube `k` levels coarser that contains `cube`.
    pub fn ancestor(&self, cube: &Cube, k: u32) -> Result<Cube> {
        self.check_member(cube)?;
        let level = cube.level - k as i32;
        if level < self.params.level_min {
            bail!(OutsideWindow, "ancestor {} levels above level {} leaves the window", k, cube.level);
        }
        let start = self.start_cell(cube);
        Ok(self.make_cube(level, self.index_of_cell(&start, level)))
    }

    /// The `2^n` children, ordered by orientation bits (bit `k` set means the
    /// upper half along axis `k`).
    pub fn children(&self, cube: &Cube) -> Result<Vec<Cube>> {
        self.check_member(cube)?;
        if cube.level + 1 > self.params.level_max {
            bail!(OutsideWindow, "cube at level {} is at the finest level", cube.level);
        }
        let start = self.start_cell(cube);
        let half = self.cube_len_cells(cube.level + 1);
        Ok((0..1usize << self.dim())
            .map(|eps| {
                let cell: [u64; MAX_DIM] = core::array::from_fn(|k| start[k] + ((eps >> k) & 1) as u64 * half);
                self.make_cube(cube.level + 1, self.index_of_cell(&cell, cube.level + 1))
            })
            .collect())
    }

    /// All descendants of `cube` at `level` (including `cube` itself when
    /// the levels agree).
    pub fn descendants(&self, cube: &Cube, level: i32) -> Result<Vec<Cube>> {
        self.check_member(cube)?;
        self.params.check_level(level)?;
        if level < cube.level {
            bail!(OutsideWindow, "descendant level {} is coarser than {}", level, cube.level);
        }
        let start = self.start_cell(cube);
        let per_axis = 1u64 << (level - cube.level);
        let len = self.cube_len_cells(level);
        let total = (per_axis as usize).pow(self.dim() as u32);
        Ok((0..total)
            .map(|mut t| {
                let mut cell = [0u64; MAX_DIM];
                for k in (0..self.dim()).rev() {
                    cell[k] = start[k] + (t as u64 % per_axis) * len;
                    t /= per_axis as usize;
                }
                self.make_cube(level, self.index_of_cell(&cell, level))
            })
            .collect())
    }

    /// Whether `outer ⊇ inner` (both cubes of this grid).
    pub fn contains(&self, outer: &Cube, inner: &Cube) -> Result<bool> {
        self.check_member(outer)?;
        self.check_member(inner)?;
        if inner.level < outer.level {
            return Ok(false);
        }
        Ok(self.ancestor(inner, (inner.level - outer.level) as u32)? == *outer)
    }

    /// ℓ∞ distance between the closed cubes on the periodic box.
    pub fn distance(&self, a: &Cube, b: &Cube) -> f64 {
        let side = self.params.side();
        let (sa, sb) = (a.side(), b.side());
        let mut d: f64 = 0.0;
        for k in 0..self.dim() {
            let delta = crate::math::rem_euclid(b.lo[k] - a.lo[k], side);
            let gap = (delta - sa).min(side - delta - sb).max(0.0);
            d = d.max(gap);
        }
        d
    }

    /// `d(inner, ∂outer)` for `inner ⊆ outer`. The top cube of the window is
    /// the whole periodic box and has no boundary.
    pub fn boundary_distance(&self, inner: &Cube, outer: &Cube) -> f64 {
        if outer.level == self.params.level_min {
            return f64::INFINITY;
        }
        let n = self.params.cells_per_axis();
        let si = self.start_cell(inner);
        let so = self.start_cell(outer);
        let li = self.cube_len_cells(inner.level);
        let lo = self.cube_len_cells(outer.level);
        let mut d = u64::MAX;
        for k in 0..self.dim() {
            let rel = (si[k] + n - so[k]) % n;
            d = d.min(rel).min(lo - rel - li);
        }
        d as f64 * self.params.cell_side()
    }

    /// A cube is bad if some `K` in the window with `l(K) >= 2^r l(I)` has
    /// `d(I, ∂K) <= l(I)^gamma l(K)^(1-gamma)`. Only ancestors can witness
    /// badness, so those are the cubes tested.
    pub fn is_good(&self, cube: &Cube) -> Result<bool> {
        self.check_member(cube)?;
        let gamma = self.params.gamma();
        let highest = cube.level - self.params.r as i32;
        let mut level = highest;
        while level > self.params.level_min {
            let anc = self.ancestor(cube, (cube.level - level) as u32)?;
            let d = self.boundary_distance(cube, &anc);
            if d <= goodness_threshold(gamma, cube.level, level) {
                return Ok(false);
            }
            level -= 1;
        }
        Ok(true)
    }

    /// Goodness of every cube of `level`, by linear index.
    pub fn good_mask(&self, level: i32) -> Result<Vec<bool>> {
        self.cubes_at(level)?.iter().map(|c| self.is_good(c)).collect()
    }

    /// Goodness per mesh cell: entry `c` tells whether the `level` cube that
    /// contains cell `c` is good.
    pub fn good_cells(&self, level: i32) -> Result<Vec<bool>> {
        let mask = self.good_mask(level)?;
        Ok((0..self.cell_count()).map(|c| mask[self.linear_of_cell(c, level)]).collect())
    }
}

fn grid_hash(params: &GridParams, shift: &ShiftSequence) -> u64 {
    // FNV-1a over the window and the shift bits.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    feed(params.dim as u8);
    params.level_min.to_le_bytes().iter().for_each(|&b| feed(b));
    params.level_max.to_le_bytes().iter().for_each(|&b| feed(b));
    shift.bits.iter().for_each(|&b| feed(b));
    if h == FREE_GRID {
        h ^= 1;
    }
    h
}

/// Whitney region `W_I = I x (l(I)/2, l(I)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WhitneyRegion {
    pub base: Cube,
}

impl WhitneyRegion {
    pub fn t_interval(&self) -> (f64, f64) {
        let l = self.base.side();
        (l / 2.0, l)
    }

    /// Measure in `dx dt`.
    pub fn volume(&self) -> f64 {
        self.base.volume() * self.base.side() / 2.0
    }
}

/// Carleson box `Î = I x (0, l(I)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CarlesonBox {
    pub base: Cube,
}

impl CarlesonBox {
    pub fn t_interval(&self) -> (f64, f64) {
        (0.0, self.base.side())
    }

    pub fn volume(&self) -> f64 {
        self.base.volume() * self.base.side()
    }

    /// The window part of `Î = ⊔ W_K` over grid cubes `K ⊆ I`, coarse to fine.
    pub fn whitney_cubes(&self, grid: &DyadicGrid) -> Result<Vec<Cube>> {
        let mut out = Vec::new();
        for level in self.base.level..=grid.params.level_max {
            out.extend(grid.descendants(&self.base, level)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiGoodEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub trials: u64,
}

/// Monte-Carlo frequency with which the shifted reference cube `I + w` is
/// good. Trial `k` draws its shift from stream `(seed, k)`.
pub fn estimate_pi_good(params: &GridParams, level: i32, index: &[i64], trials: u64, seed: u64) -> Result<PiGoodEstimate> {
    params.validate()?;
    params.check_level(level)?;
    if trials == 0 {
        return Err(Error::Empty("trials"));
    }
    let mut good = 0u64;
    for k in 0..trials {
        let mut r = rng::stream(seed, k);
        let grid = DyadicGrid::random_from(*params, &mut r)?;
        let cube = grid.cube(level, index)?;
        if grid.is_good(&cube)? {
            good += 1;
        }
    }
    let p = good as f64 / trials as f64;
    Ok(PiGoodEstimate { estimate: p, standard_error: sqrt(p * (1.0 - p) / trials as f64), trials })
}

/// Exact good-cube probability at `level`, by enumerating the relative
/// position of a cube inside its ancestors. Goodness factorises over axes, so
/// the enumeration is one-dimensional.
pub fn exact_pi_good(params: &GridParams, level: i32) -> Result<f64> {
    params.validate()?;
    params.check_level(level)?;
    let top = params.level_min + 1;
    let highest = level - params.r as i32;
    if highest < top {
        return Ok(1.0);
    }
    let span = (level - top) as u32;
    if span > 30 {
        bail!(InvalidParams, "exact enumeration limited to 2^30 positions (got 2^{})", span);
    }
    let gamma = params.gamma();
    let l = exp2i(-level);
    let thresholds: Vec<(u64, f64)> = (top..=highest)
        .map(|a| (1u64 << (level - a), goodness_threshold(gamma, level, a)))
        .collect();
    let positions = 1u64 << span;
    let good = (0..positions)
        .filter(|&p| {
            thresholds.iter().all(|&(m, thr)| {
                let rel = p % m;
                let d = rel.min(m - rel - 1) as f64 * l;
                d > thr
            })
        })
        .count();
    Ok(powf(good as f64 / positions as f64, params.dim as f64))
}
