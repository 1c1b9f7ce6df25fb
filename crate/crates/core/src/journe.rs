//! Strong maximal functions, shadows of open sets, maximal cube families,
//! 2-maximal rectangles and Journé's lemma on a product window.
//!
//! Subsets of the product box are cell indicators: the cell pair
//! `(x1, x2)` of the two factor meshes sits at `x1 * N2 + x2`. Every open
//! set is a finite union of grid rectangles, so rectangle containment is
//! decided exactly on the mesh.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::dyadic::{Cube, DyadicGrid, MAX_DIM};
use crate::engine::{SquareField, WhitneyQuadrature};
use crate::error::{bail, Error, Result};
use crate::haar::{Mesh, ProductMeshFunction};
use crate::kernel::BiParamKernel;
use crate::linalg::{gemm, Matrix};
use crate::math::{exp2i, powi};

pub type Rectangle = (Cube, Cube);

/// Per window level, the linear index of the cube containing each cell.
#[derive(Clone, Debug)]
struct Lattice {
    level_min: i32,
    lin: Vec<Vec<usize>>,
    counts: Vec<usize>,
    /// `parent[l][i]`: linear index at level `l - 1` of the parent of cube
    /// `i` at level `l` (empty at the top level).
    parent: Vec<Vec<usize>>,
    neighbors: Vec<Vec<Vec<usize>>>,
}

impl Lattice {
    fn new(g: &DyadicGrid) -> Result<Self> {
        let p = g.params();
        let cells = g.cell_count();
        let mut lin = Vec::new();
        let mut counts = Vec::new();
        let mut parent = Vec::new();
        let mut neighbors = Vec::new();
        for level in p.level_min..=p.level_max {
            let l: Vec<usize> = (0..cells).map(|c| g.linear_of_cell(c, level)).collect();
            let count = g.cube_count(level);
            let mut par = Vec::new();
            if level > p.level_min {
                let up: &Vec<usize> = lin.last().unwrap_or(&l);
                par = vec![0; count];
                for c in 0..cells {
                    par[l[c]] = up[c];
                }
            }
            neighbors.push((0..count).map(|i| cube_neighbors(g, level, i)).collect::<Result<Vec<_>>>()?);
            lin.push(l);
            counts.push(count);
            parent.push(par);
        }
        Ok(Self { level_min: p.level_min, lin, counts, parent, neighbors })
    }

    fn levels(&self) -> usize {
        self.counts.len()
    }

    fn cells(&self) -> usize {
        self.lin[0].len()
    }
}

/// Linear indices of the cubes whose union is the concentric triple of a
/// cube (wrapped on the periodic box, each cube listed once).
fn cube_neighbors(g: &DyadicGrid, level: i32, lin: usize) -> Result<Vec<usize>> {
    let cube = g.cube_from_linear(level, lin)?;
    let n = g.dim();
    let mut out = Vec::new();
    for code in 0..3usize.pow(n as u32) {
        let mut idx = [0i64; MAX_DIM];
        let mut c = code;
        for k in 0..n {
            idx[k] = cube.index()[k] + (c % 3) as i64 - 1;
            c /= 3;
        }
        out.push(g.linear_index(&g.cube(level, &idx[..n])?));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// For every window level pair `(a, b)` (row-major, coarse to fine), which
/// rectangles lie inside a cell set.
#[derive(Clone, Debug)]
struct ContainmentTable {
    levels2: usize,
    counts2: Vec<usize>,
    inside: Vec<Vec<bool>>,
}

impl ContainmentTable {
    fn new(l1: &Lattice, l2: &Lattice, set: &[bool]) -> Self {
        let (n1, n2) = (l1.cells(), l2.cells());
        let mut inside = Vec::with_capacity(l1.levels() * l2.levels());
        for a in 0..l1.levels() {
            for b in 0..l2.levels() {
                let c2 = l2.counts[b];
                let mut v = vec![true; l1.counts[a] * c2];
                for x1 in 0..n1 {
                    let row = l1.lin[a][x1] * c2;
                    for x2 in 0..n2 {
                        if !set[x1 * n2 + x2] {
                            v[row + l2.lin[b][x2]] = false;
                        }
                    }
                }
                inside.push(v);
            }
        }
        Self { levels2: l2.levels(), counts2: l2.counts.clone(), inside }
    }

    fn get(&self, a: usize, b: usize, i: usize, j: usize) -> bool {
        self.inside[a * self.levels2 + b][i * self.counts2[b] + j]
    }
}

fn check_pair(g1: &DyadicGrid, g2: &DyadicGrid, r: &Rectangle) -> Result<()> {
    g1.check_member(&r.0)?;
    g2.check_member(&r.1)
}

/// A finite union of grid rectangles of a product window.
#[derive(Clone, Debug)]
pub struct OpenSetOmega {
    g1: DyadicGrid,
    g2: DyadicGrid,
    rectangles: Vec<Rectangle>,
    indicator: Vec<bool>,
}

impl OpenSetOmega {
    pub fn new(g1: &DyadicGrid, g2: &DyadicGrid, rectangles: Vec<Rectangle>) -> Result<Self> {
        let n2 = g2.cell_count();
        let mut indicator = vec![false; g1.cell_count() * n2];
        for r in &rectangles {
            check_pair(g1, g2, r)?;
            let c2 = g2.cube_cells(&r.1);
            for x1 in g1.cube_cells(&r.0) {
                for &x2 in &c2 {
                    indicator[x1 * n2 + x2] = true;
                }
            }
        }
        Ok(Self { g1: g1.clone(), g2: g2.clone(), rectangles, indicator })
    }

    pub fn empty(g1: &DyadicGrid, g2: &DyadicGrid) -> Self {
        Self { g1: g1.clone(), g2: g2.clone(), rectangles: Vec::new(), indicator: vec![false; g1.cell_count() * g2.cell_count()] }
    }

    pub fn single(g1: &DyadicGrid, g2: &DyadicGrid, i: Cube, j: Cube) -> Result<Self> {
        Self::new(g1, g2, vec![(i, j)])
    }

    /// Union of `k` rectangles with levels uniform on the window below its
    /// top level and uniform positions.
    pub fn random_union<R: Rng + ?Sized>(g1: &DyadicGrid, g2: &DyadicGrid, k: usize, rng: &mut R) -> Result<Self> {
        let rects = (0..k)
            .map(|_| Ok((random_cube(g1, rng)?, random_cube(g2, rng)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(g1, g2, rects)
    }

    /// A dyadic staircase anchored at a random cell: `I_k x J_k` with `I_k`
    /// growing and `J_k` shrinking by one level per step.
    pub fn staircase<R: Rng + ?Sized>(g1: &DyadicGrid, g2: &DyadicGrid, steps: usize, rng: &mut R) -> Result<Self> {
        let (p1, p2) = (g1.params(), g2.params());
        let c1 = rng.random_range(0..g1.cell_count());
        let c2 = rng.random_range(0..g2.cell_count());
        let start1 = rng.random_range(p1.level_min..=p1.level_max);
        let start2 = rng.random_range(p2.level_min..=p2.level_max);
        let mut rects = Vec::new();
        for s in 0..steps.max(1) as i32 {
            let a = (start1 - s).max(p1.level_min);
            let b = (start2 + s).min(p2.level_max);
            rects.push((cube_of_cell(g1, c1, a)?, cube_of_cell(g2, c2, b)?));
        }
        Self::new(g1, g2, rects)
    }

    pub fn grids(&self) -> (&DyadicGrid, &DyadicGrid) {
        (&self.g1, &self.g2)
    }

    pub fn rectangles(&self) -> &[Rectangle] {
        &self.rectangles
    }

    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    pub fn cell_volume(&self) -> f64 {
        Mesh::of(&self.g1).cell_volume() * Mesh::of(&self.g2).cell_volume()
    }

    pub fn measure(&self) -> f64 {
        set_measure(&self.indicator, self.cell_volume())
    }

    pub fn is_empty(&self) -> bool {
        !self.indicator.iter().any(|&b| b)
    }

    /// Whether `I x J ⊆ Ω`.
    pub fn contains_rectangle(&self, i: &Cube, j: &Cube) -> Result<bool> {
        rectangle_in_set(&self.g1, &self.g2, &self.indicator, i, j)
    }

    /// The set with one more rectangle.
    pub fn with_rectangle(&self, r: Rectangle) -> Result<Self> {
        let mut rects = self.rectangles.clone();
        rects.push(r);
        Self::new(&self.g1, &self.g2, rects)
    }

    /// Translation by whole mesh cells along each axis. Every rectangle must
    /// move onto the lattice of its level; a cube spanning the whole axis is
    /// invariant.
    pub fn translated(&self, shift1: &[i64], shift2: &[i64]) -> Result<Self> {
        let mv = |g: &DyadicGrid, c: &Cube, s: &[i64]| -> Result<Cube> {
            if s.len() != g.dim() {
                return Err(Error::DimensionMismatch { expected: g.dim(), found: s.len() });
            }
            let len = g.cube_len_cells(c.level()) as i64;
            let whole = g.cells_per_axis() as i64;
            let mut idx = [0i64; MAX_DIM];
            for k in 0..g.dim() {
                if len == whole {
                    idx[k] = c.index()[k];
                    continue;
                }
                if s[k] % len != 0 {
                    bail!(InvalidParams, "shift {} is not a multiple of the cube length {}", s[k], len);
                }
                idx[k] = c.index()[k] + s[k] / len;
            }
            g.cube(c.level(), &idx[..g.dim()])
        };
        let rects = self
            .rectangles
            .iter()
            .map(|(i, j)| Ok((mv(&self.g1, i, shift1)?, mv(&self.g2, j, shift2)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(&self.g1, &self.g2, rects)
    }
}

fn random_cube<R: Rng + ?Sized>(g: &DyadicGrid, rng: &mut R) -> Result<Cube> {
    let p = g.params();
    let lo = if p.level_max > p.level_min { p.level_min + 1 } else { p.level_min };
    let level = rng.random_range(lo..=p.level_max);
    let lin = rng.random_range(0..g.cube_count(level));
    g.cube_from_linear(level, lin)
}

fn cube_of_cell(g: &DyadicGrid, cell: usize, level: i32) -> Result<Cube> {
    g.cube_from_linear(level, g.linear_of_cell(cell, level))
}

fn set_measure(set: &[bool], cell_volume: f64) -> f64 {
    set.iter().filter(|&&b| b).count() as f64 * cell_volume
}

/// Whether `I x J` lies inside a cell set of the product mesh.
pub fn rectangle_in_set(g1: &DyadicGrid, g2: &DyadicGrid, set: &[bool], i: &Cube, j: &Cube) -> Result<bool> {
    g1.check_member(i)?;
    g2.check_member(j)?;
    let n2 = g2.cell_count();
    if set.len() != g1.cell_count() * n2 {
        bail!(ShapeMismatch, "set has {} cells, the product mesh {}", set.len(), g1.cell_count() * n2);
    }
    let c2 = g2.cube_cells(j);
    Ok(g1.cube_cells(i).iter().all(|&x1| c2.iter().all(|&x2| set[x1 * n2 + x2])))
}

fn check_nonnegative(f: &ProductMeshFunction, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<()> {
    if f.meshes() != (Mesh::of(g1), Mesh::of(g2)) {
        bail!(ShapeMismatch, "function mesh does not match the grid pair");
    }
    if let Some(&v) = f.values().as_slice().iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::NegativeInput(v));
    }
    Ok(())
}

/// Per level pair, the sum of `f` over every rectangle.
fn rectangle_sums(l1: &Lattice, l2: &Lattice, f: &[f64], a: usize, b: usize) -> Vec<f64> {
    let (n1, n2) = (l1.cells(), l2.cells());
    let c2 = l2.counts[b];
    let mut s = vec![0.0; l1.counts[a] * c2];
    for x1 in 0..n1 {
        let row = l1.lin[a][x1] * c2;
        for x2 in 0..n2 {
            s[row + l2.lin[b][x2]] += f[x1 * n2 + x2];
        }
    }
    s
}

/// `M_D f(x)`: the largest average of `f` over grid rectangles of the window
/// containing `x`.
pub fn dyadic_strong_maximal(f: &ProductMeshFunction, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<ProductMeshFunction> {
    check_nonnegative(f, g1, g2)?;
    let (l1, l2) = (Lattice::new(g1)?, Lattice::new(g2)?);
    Ok(maximal_on(f, &l1, &l2, false))
}

/// The strong maximal function, realised over grid rectangles and their
/// concentric triples: `M f(x)` is the largest average of `f` over `R` or
/// `3R` among grid rectangles `R` with `x ∈ R` (resp. `x ∈ 3R`).
pub fn strong_maximal(f: &ProductMeshFunction, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<ProductMeshFunction> {
    check_nonnegative(f, g1, g2)?;
    let (l1, l2) = (Lattice::new(g1)?, Lattice::new(g2)?);
    Ok(maximal_on(f, &l1, &l2, true))
}

fn maximal_on(f: &ProductMeshFunction, l1: &Lattice, l2: &Lattice, dilate: bool) -> ProductMeshFunction {
    let (m1, m2) = f.meshes();
    let (n1, n2) = (l1.cells(), l2.cells());
    let vals = f.values().as_slice();
    let mut out = vec![0.0f64; n1 * n2];
    for a in 0..l1.levels() {
        let cells1 = n1 / l1.counts[a];
        for b in 0..l2.levels() {
            let c2 = l2.counts[b];
            let cells2 = n2 / c2;
            let sums = rectangle_sums(l1, l2, vals, a, b);
            let mut best: Vec<f64> = sums.iter().map(|s| s / (cells1 * cells2) as f64).collect();
            if dilate {
                let (nb1, nb2) = (&l1.neighbors[a], &l2.neighbors[b]);
                let mut triple = vec![0.0; sums.len()];
                for i in 0..l1.counts[a] {
                    for j in 0..c2 {
                        let s: f64 = nb1[i].iter().map(|&p| nb2[j].iter().map(|&q| sums[p * c2 + q]).sum::<f64>()).sum();
                        triple[i * c2 + j] = s / (nb1[i].len() * cells1 * nb2[j].len() * cells2) as f64;
                    }
                }
                for i in 0..l1.counts[a] {
                    for j in 0..c2 {
                        let m = nb1[i]
                            .iter()
                            .flat_map(|&p| nb2[j].iter().map(move |&q| (p, q)))
                            .map(|(p, q)| triple[p * c2 + q])
                            .fold(0.0, f64::max);
                        best[i * c2 + j] = best[i * c2 + j].max(m);
                    }
                }
            }
            for x1 in 0..n1 {
                let row = l1.lin[a][x1] * c2;
                for x2 in 0..n2 {
                    let o = &mut out[x1 * n2 + x2];
                    *o = o.max(best[row + l2.lin[b][x2]]);
                }
            }
        }
    }
    ProductMeshFunction::from_matrix(m1, m2, Matrix::from_vec(n1, n2, out)).expect("shape matches the meshes")
}

/// `c = 2^{-(n+m+2)}`. With it `2F x 2T ⊆ Ω̂` whenever `F x T ⊆ Ω̃` and
/// `n + m <= 3`.
pub fn default_shadow_constant(n: usize, m: usize) -> f64 {
    exp2i(-((n + m + 2) as i32))
}

/// `Ω̃ = {M_D 1_Ω > 1/2}` and `Ω̂ = {M 1_Ω̃ > c}` as cell sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSets {
    pub c: f64,
    pub omega: Vec<bool>,
    pub omega_tilde: Vec<bool>,
    pub omega_hat: Vec<bool>,
    /// `|Ω|`, `|Ω̃|`, `|Ω̂|`.
    pub measures: [f64; 3],
}

fn indicator_function(set: &[bool], m1: Mesh, m2: Mesh) -> ProductMeshFunction {
    let v: Vec<f64> = set.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    ProductMeshFunction::from_matrix(m1, m2, Matrix::from_vec(m1.cell_count(), m2.cell_count(), v))
        .expect("shape matches the meshes")
}

fn shadows_on(omega: &OpenSetOmega, l1: &Lattice, l2: &Lattice, c: f64) -> Result<ShadowSets> {
    if !(c > 0.0 && c < 1.0) {
        bail!(InvalidParams, "shadow constant must lie in (0, 1), got {}", c);
    }
    let (m1, m2) = (Mesh::of(&omega.g1), Mesh::of(&omega.g2));
    let md = maximal_on(&indicator_function(&omega.indicator, m1, m2), l1, l2, false);
    let tilde: Vec<bool> = md.values().as_slice().iter().map(|&v| v > 0.5).collect();
    let mm = maximal_on(&indicator_function(&tilde, m1, m2), l1, l2, true);
    let hat: Vec<bool> = mm.values().as_slice().iter().map(|&v| v > c).collect();
    let vol = omega.cell_volume();
    Ok(ShadowSets {
        c,
        measures: [omega.measure(), set_measure(&tilde, vol), set_measure(&hat, vol)],
        omega: omega.indicator.clone(),
        omega_tilde: tilde,
        omega_hat: hat,
    })
}

pub fn build_shadows(omega: &OpenSetOmega, c: f64) -> Result<ShadowSets> {
    shadows_on(omega, &Lattice::new(&omega.g1)?, &Lattice::new(&omega.g2)?, c)
}

/// A rectangle `I x J ⊆ Ω` whose `J` cannot be enlarged inside `Ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoMaximalRectangle {
    pub i: Cube,
    pub j: Cube,
    pub emb1: u32,
    /// The ancestor chain reached the top of the window, so `emb1` is a
    /// window cap rather than a true supremum.
    pub capped: bool,
}

impl TwoMaximalRectangle {
    pub fn area(&self) -> f64 {
        self.i.volume() * self.j.volume()
    }
}

/// `I_G` together with whether the window top stopped the ascent.
#[derive(Clone, Debug, PartialEq)]
pub struct PartnerCube {
    pub cube: Cube,
    pub capped: bool,
}

/// Decreasing weights `ω: N -> [0, ∞)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    /// `ω(k) = scale ratio^k`, `0 <= ratio < 1`.
    Geometric { scale: f64, ratio: f64 },
    /// Explicit values, zero beyond the table.
    Table(Vec<f64>),
}

impl Weights {
    pub fn validate(&self) -> Result<()> {
        match self {
            Weights::Geometric { scale, ratio } => {
                if !(scale.is_finite() && *scale >= 0.0) {
                    bail!(InvalidParams, "weight scale must be finite and nonnegative, got {}", scale);
                }
                if *ratio > 1.0 && *scale > 0.0 {
                    return Err(Error::NotDecreasing(1));
                }
                if !(*ratio >= 0.0 && *ratio < 1.0) {
                    bail!(InvalidParams, "weight ratio must lie in [0, 1), got {}", ratio);
                }
            }
            Weights::Table(w) => {
                if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    bail!(InvalidParams, "weights must be finite and nonnegative, got {}", v);
                }
                if let Some(k) = (1..w.len()).find(|&k| w[k] > w[k - 1]) {
                    return Err(Error::NotDecreasing(k));
                }
            }
        }
        Ok(())
    }

    pub fn at(&self, k: u32) -> f64 {
        match self {
            Weights::Geometric { scale, ratio } => scale * powi(*ratio, k as i32),
            Weights::Table(w) => w.get(k as usize).copied().unwrap_or(0.0),
        }
    }

    /// `sum_{k >= 0} ω(k)`.
    pub fn total(&self) -> f64 {
        match self {
            Weights::Geometric { scale, ratio } => scale / (1.0 - ratio),
            Weights::Table(w) => w.iter().sum(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JourneResult {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
    pub rectangles: usize,
    pub capped: usize,
}

/// An open set together with its shadows and the rectangle containment
/// tables of `Ω` and `Ω̃`.
#[derive(Clone, Debug)]
pub struct OmegaAnalysis {
    omega: OpenSetOmega,
    shadows: ShadowSets,
    l1: Lattice,
    l2: Lattice,
    in_omega: ContainmentTable,
    in_tilde: ContainmentTable,
}

impl OmegaAnalysis {
    pub fn new(omega: &OpenSetOmega, c: f64) -> Result<Self> {
        let l1 = Lattice::new(&omega.g1)?;
        let l2 = Lattice::new(&omega.g2)?;
        let shadows = shadows_on(omega, &l1, &l2, c)?;
        let in_omega = ContainmentTable::new(&l1, &l2, &shadows.omega);
        let in_tilde = ContainmentTable::new(&l1, &l2, &shadows.omega_tilde);
        Ok(Self { omega: omega.clone(), shadows, l1, l2, in_omega, in_tilde })
    }

    pub fn omega(&self) -> &OpenSetOmega {
        &self.omega
    }

    pub fn shadows(&self) -> &ShadowSets {
        &self.shadows
    }

    fn key(&self, i: &Cube, j: &Cube) -> Result<(usize, usize, usize, usize)> {
        let (g1, g2) = self.omega.grids();
        g1.check_member(i)?;
        g2.check_member(j)?;
        Ok((
            (i.level() - self.l1.level_min) as usize,
            (j.level() - self.l2.level_min) as usize,
            g1.linear_index(i),
            g2.linear_index(j),
        ))
    }

    pub fn rectangle_in_omega(&self, i: &Cube, j: &Cube) -> Result<bool> {
        let (a, b, x, y) = self.key(i, j)?;
        Ok(self.in_omega.get(a, b, x, y))
    }

    pub fn rectangle_in_tilde(&self, i: &Cube, j: &Cube) -> Result<bool> {
        let (a, b, x, y) = self.key(i, j)?;
        Ok(self.in_tilde.get(a, b, x, y))
    }

    fn maximal_family_idx(&self, b: usize, j: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.l1.levels() {
            for f in 0..self.l1.counts[a] {
                if self.in_tilde.get(a, b, f, j) && (a == 0 || !self.in_tilde.get(a - 1, b, self.l1.parent[a][f], j)) {
                    out.push((a, f));
                }
            }
        }
        out
    }

    /// `F_J`: the maximal `F` with `F x J ⊆ Ω̃`, coarse to fine.
    pub fn maximal_family(&self, j: &Cube) -> Result<Vec<Cube>> {
        let g2 = &self.omega.g2;
        g2.check_member(j)?;
        let b = (j.level() - self.l2.level_min) as usize;
        self.maximal_family_idx(b, g2.linear_index(j))
            .into_iter()
            .map(|(a, f)| self.omega.g1.cube_from_linear(self.l1.level_min + a as i32, f))
            .collect()
    }

    fn f_union_idx(&self, b: usize, j: usize) -> Result<Vec<bool>> {
        let g1 = &self.omega.g1;
        let mut set = vec![false; g1.cell_count()];
        for (a, f) in self.maximal_family_idx(b, j) {
            let cube = g1.cube_from_linear(self.l1.level_min + a as i32, f)?;
            for c in doubled_cells(g1, &cube) {
                set[c] = true;
            }
        }
        Ok(set)
    }

    /// `⋃_{F ∈ F_J} 2F` as cells of the first factor, with periodic
    /// dilations.
    pub fn f_union(&self, j: &Cube) -> Result<Vec<bool>> {
        let g2 = &self.omega.g2;
        g2.check_member(j)?;
        self.f_union_idx((j.level() - self.l2.level_min) as usize, g2.linear_index(j))
    }

    /// `I_G`: the maximal ancestor of `I` with `I_G x G ⊆ Ω̃`.
    pub fn partner_cube(&self, i: &Cube, g: &Cube) -> Result<PartnerCube> {
        if !self.rectangle_in_omega(i, g)? {
            bail!(Precondition, "I x G is not contained in Ω");
        }
        let (mut a, b, mut x, y) = self.key(i, g)?;
        while a > 0 && self.in_tilde.get(a - 1, b, self.l1.parent[a][x], y) {
            x = self.l1.parent[a][x];
            a -= 1;
        }
        Ok(PartnerCube { cube: self.omega.g1.cube_from_linear(self.l1.level_min + a as i32, x)?, capped: a == 0 })
    }

    /// `emb_1(I x J; Ω)` against `Ω̃`, or `None` if `I x J ⊄ Ω̃`.
    pub fn emb1(&self, i: &Cube, j: &Cube) -> Result<Option<(u32, bool)>> {
        let (a, b, x, y) = self.key(i, j)?;
        Ok(self.emb1_idx(a, b, x, y))
    }

    fn emb1_idx(&self, mut a: usize, b: usize, mut x: usize, y: usize) -> Option<(u32, bool)> {
        if !self.in_tilde.get(a, b, x, y) {
            return None;
        }
        let mut k = 0;
        while a > 0 && self.in_tilde.get(a - 1, b, self.l1.parent[a][x], y) {
            x = self.l1.parent[a][x];
            a -= 1;
            k += 1;
        }
        Some((k, a == 0))
    }

    /// Every 2-maximal rectangle of `Ω`, annotated with `emb_1`.
    pub fn two_maximal_rectangles(&self) -> Result<Vec<TwoMaximalRectangle>> {
        let (g1, g2) = self.omega.grids();
        let mut out = Vec::new();
        for a in 0..self.l1.levels() {
            for b in 0..self.l2.levels() {
                for i in 0..self.l1.counts[a] {
                    for j in 0..self.l2.counts[b] {
                        if !self.in_omega.get(a, b, i, j) {
                            continue;
                        }
                        if b > 0 && self.in_omega.get(a, b - 1, i, self.l2.parent[b][j]) {
                            continue;
                        }
                        let (emb1, capped) = self.emb1_idx(a, b, i, j).expect("Ω ⊆ Ω̃");
                        out.push(TwoMaximalRectangle {
                            i: g1.cube_from_linear(self.l1.level_min + a as i32, i)?,
                            j: g2.cube_from_linear(self.l2.level_min + b as i32, j)?,
                            emb1,
                            capped,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// `sum_{R 2-maximal} ω(emb_1 R) |R|` against `2 (sum_k ω(k)) |Ω|`.
    pub fn journe_check(&self, weights: &Weights) -> Result<JourneResult> {
        weights.validate()?;
        let rects = self.two_maximal_rectangles()?;
        let lhs: f64 = rects.iter().map(|r| weights.at(r.emb1) * r.area()).sum();
        let rhs = 2.0 * weights.total() * self.omega.measure();
        Ok(JourneResult { lhs, rhs, pass: lhs <= rhs, rectangles: rects.len(), capped: rects.iter().filter(|r| r.capped).count() })
    }

    /// `sum_{I x J ⊆ Ω} (sum over W_I x W_J of the level fields)`.
    pub fn rectangle_sum(&self, field: &SquareField) -> Result<f64> {
        masked_field_sum(field, &self.omega, &self.l1, &self.l2, &self.in_omega)
    }
}

fn masked_field_sum(field: &SquareField, omega: &OpenSetOmega, l1: &Lattice, l2: &Lattice, table: &ContainmentTable) -> Result<f64> {
    if field.meshes() != (Mesh::of(&omega.g1), Mesh::of(&omega.g2)) {
        bail!(ShapeMismatch, "field meshes do not match the grid pair");
    }
    let n2 = l2.cells();
    let mut total = 0.0;
    for a in 0..l1.levels() {
        for b in 0..l2.levels() {
            let e = field.level_pair(l1.level_min + a as i32, l2.level_min + b as i32)?;
            for x1 in 0..l1.cells() {
                let i = l1.lin[a][x1];
                for x2 in 0..n2 {
                    if table.get(a, b, i, l2.lin[b][x2]) {
                        total += e.get(x1, x2);
                    }
                }
            }
        }
    }
    Ok(total)
}

/// `sum_{I x J ⊆ Ω}` of the Whitney integrals of a square field. With the
/// field of `theta 1` this is the Carleson sum of `C_IJ` over `Ω`.
pub fn rectangle_sum(field: &SquareField, omega: &OpenSetOmega) -> Result<f64> {
    let (l1, l2) = (Lattice::new(&omega.g1)?, Lattice::new(&omega.g2)?);
    let table = ContainmentTable::new(&l1, &l2, &omega.indicator);
    masked_field_sum(field, omega, &l1, &l2, &table)
}

/// Cells of the concentric double of a cube, wrapped on the box. A cube of
/// one cell grows by one cell on each side.
fn doubled_cells(g: &DyadicGrid, cube: &Cube) -> Vec<usize> {
    let n = g.cells_per_axis() as i64;
    let len = g.cube_len_cells(cube.level()) as i64;
    let grow = (len + 1) / 2;
    let start = g.start_cell(cube);
    let span = (len + 2 * grow).min(n);
    let mut out = vec![0usize];
    for k in 0..g.dim() {
        let first = start[k] as i64 - if span == n { 0 } else { grow };
        let mut next = Vec::new();
        for &base in &out {
            for t in 0..span {
                next.push(base * n as usize + (first + t).rem_euclid(n) as usize);
            }
        }
        out = next;
    }
    out
}

/// Left side of the necessity estimate and its diagnostic split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NecessityReport {
    pub omega_measure: f64,
    pub tilde_measure: f64,
    pub hat_measure: f64,
    /// `sum_{I x J ⊆ Ω} C_IJ`.
    pub sum: f64,
    /// `sum / |Ω|` (0 for empty `Ω`).
    pub ratio: f64,
    /// The same sum with `1` replaced by `1_Ω̂`.
    pub hat_sum: f64,
    /// The same sum with `1` replaced by `1_{Ω̂^c}`.
    pub hat_c_sum: f64,
    /// With `1_{Ω̂^c} 1_{F_J}` (first factor) for the rectangle's `J`.
    pub s1: f64,
    /// With `1_{Ω̂^c} 1_{F_J^c}`.
    pub s2: f64,
}

/// Necessity of the bi-parameter Carleson condition, measured for a tensor
/// kernel: `sum_{I x J ⊆ Ω} ∬∬ |theta 1|^2` over the Whitney regions,
/// divided by `|Ω|`.
pub fn necessity_check(kernel: &BiParamKernel, analysis: &OmegaAnalysis, quad: &WhitneyQuadrature) -> Result<NecessityReport> {
    if !kernel.is_tensor() {
        return Err(Error::NotTensor);
    }
    let (g1, g2) = analysis.omega.grids();
    let (m1, m2) = (Mesh::of(g1), Mesh::of(g2));
    let sh = &analysis.shadows;
    let field_of = |set: &[bool]| SquareField::compute(kernel, &indicator_function(set, m1, m2), quad);
    let all = vec![true; sh.omega.len()];
    let sum = analysis.rectangle_sum(&field_of(&all)?)?;
    let hat_sum = analysis.rectangle_sum(&field_of(&sh.omega_hat)?)?;
    let hat_c: Vec<bool> = sh.omega_hat.iter().map(|&b| !b).collect();
    let hat_c_sum = analysis.rectangle_sum(&field_of(&hat_c)?)?;
    let (s1, s2) = split_sums(kernel, analysis, &hat_c, quad)?;
    let measure = analysis.omega.measure();
    Ok(NecessityReport {
        omega_measure: measure,
        tilde_measure: sh.measures[1],
        hat_measure: sh.measures[2],
        sum,
        ratio: if measure > 0.0 { sum / measure } else { 0.0 },
        hat_sum,
        hat_c_sum,
        s1,
        s2,
    })
}

/// `S_1` and `S_2`: the input depends on `J` through the first-factor mask
/// `F_J`, so each active `J` is handled on its own columns.
fn split_sums(kernel: &BiParamKernel, an: &OmegaAnalysis, hat_c: &[bool], quad: &WhitneyQuadrature) -> Result<(f64, f64)> {
    let (g1, g2) = an.omega.grids();
    let (m1, m2) = (Mesh::of(g1), Mesh::of(g2));
    let n1 = m1.cell_count();
    let vol = m1.cell_volume() * m2.cell_volume();
    let h = kernel.premodulate(&indicator_function(hat_c, m1, m2).into_matrix())?;
    let a1: Vec<Vec<(Matrix, f64)>> = (0..an.l1.levels())
        .map(|a| {
            quad.nodes(exp2i(-(an.l1.level_min + a as i32)))
                .into_iter()
                .map(|(t, w)| Ok((kernel.factor_operator(0, &m1, t)?, w)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let (mut s1, mut s2) = (0.0, 0.0);
    for b in 0..an.l2.levels() {
        let level_b = an.l2.level_min + b as i32;
        let q2: Vec<(Matrix, f64)> = quad
            .nodes(exp2i(-level_b))
            .into_iter()
            .map(|(t, w)| Ok((h.matmul_t(&kernel.factor_operator(1, &m2, t)?), w)))
            .collect::<Result<_>>()?;
        for j in 0..an.l2.counts[b] {
            let rows: Vec<Vec<bool>> = (0..an.l1.levels())
                .map(|a| (0..n1).map(|x1| an.in_omega.get(a, b, an.l1.lin[a][x1], j)).collect())
                .collect();
            if !rows.iter().any(|r| r.iter().any(|&v| v)) {
                continue;
            }
            let cols: Vec<usize> = g2.cube_cells(&g2.cube_from_linear(level_b, j)?);
            let fj = an.f_union_idx(b, j)?;
            for (q, w2) in &q2 {
                let sub = Matrix::from_fn(n1, cols.len(), |x1, c| q.get(x1, cols[c]));
                let inside = Matrix::from_fn(n1, cols.len(), |x1, c| if fj[x1] { sub.get(x1, c) } else { 0.0 });
                let outside = Matrix::from_fn(n1, cols.len(), |x1, c| if fj[x1] { 0.0 } else { sub.get(x1, c) });
                let mut buf = Matrix::zeros(n1, cols.len());
                for (a, nodes) in a1.iter().enumerate() {
                    for (k1, w1) in nodes {
                        let s = w1 * w2 * vol;
                        for (src, acc) in [(&inside, &mut s1), (&outside, &mut s2)] {
                            gemm(1.0, k1.view(), src.view(), 0.0, &mut buf);
                            for x1 in (0..n1).filter(|&x| rows[a][x]) {
                                *acc += s * buf.row(x1).iter().map(|v| v * v).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((s1, s2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::GridParams;
    use crate::kernel::MultiplierSpec;
    use crate::rng::stream;

    fn grids(depth: i32) -> (DyadicGrid, DyadicGrid) {
        let p = GridParams::new(1, 1.0, 2, 0, depth).unwrap();
        (DyadicGrid::standard(p).unwrap(), DyadicGrid::random(p, 3).unwrap())
    }

    #[test]
    fn maximal_of_rectangle_indicator_is_one_on_it() {
        let (g1, g2) = grids(3);
        let (i, j) = (g1.cube(1, &[1]).unwrap(), g2.cube(2, &[3]).unwrap());
        let omega = OpenSetOmega::single(&g1, &g2, i, j).unwrap();
        let f = indicator_function(omega.indicator(), Mesh::of(&g1), Mesh::of(&g2));
        let md = dyadic_strong_maximal(&f, &g1, &g2).unwrap();
        let mm = strong_maximal(&f, &g1, &g2).unwrap();
        for (k, &inside) in omega.indicator().iter().enumerate() {
            let v = md.values().as_slice()[k];
            assert!(v >= f.values().as_slice()[k]);
            assert!(mm.values().as_slice()[k] >= v);
            if inside {
                assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn negative_input_is_rejected() {
        let (g1, g2) = grids(2);
        let f = ProductMeshFunction::from_fn(Mesh::of(&g1), Mesh::of(&g2), |x, _| x[0] - 0.5);
        assert!(matches!(dyadic_strong_maximal(&f, &g1, &g2), Err(Error::NegativeInput(_))));
    }

    #[test]
    fn empty_set_has_empty_shadows_and_no_rectangles() {
        let (g1, g2) = grids(3);
        let an = OmegaAnalysis::new(&OpenSetOmega::empty(&g1, &g2), 0.25).unwrap();
        assert_eq!(an.shadows().measures, [0.0, 0.0, 0.0]);
        assert!(an.two_maximal_rectangles().unwrap().is_empty());
        let r = an.journe_check(&Weights::Geometric { scale: 1.0, ratio: 0.5 }).unwrap();
        assert!(r.pass && r.lhs == 0.0 && r.rhs == 0.0);
    }

    #[test]
    fn containment_chain_and_double_dilates() {
        let (g1, g2) = grids(4);
        let c = default_shadow_constant(1, 1);
        for s in 0..20 {
            let mut rng = stream(11, s);
            let omega = OpenSetOmega::random_union(&g1, &g2, 3, &mut rng).unwrap();
            let an = OmegaAnalysis::new(&omega, c).unwrap();
            let sh = an.shadows();
            for k in 0..sh.omega.len() {
                assert!(!sh.omega[k] || sh.omega_tilde[k]);
                assert!(!sh.omega_tilde[k] || sh.omega_hat[k]);
            }
            let n2 = g2.cell_count();
            for t in g2.all_cubes() {
                for f in an.maximal_family(&t).unwrap() {
                    for x1 in doubled_cells(&g1, &f) {
                        for x2 in doubled_cells(&g2, &t) {
                            assert!(sh.omega_hat[x1 * n2 + x2]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_rectangle_family_and_two_maximal_set() {
        let (g1, g2) = grids(3);
        let (f0, j) = (g1.cube(1, &[0]).unwrap(), g2.cube(1, &[1]).unwrap());
        let an = OmegaAnalysis::new(&OpenSetOmega::single(&g1, &g2, f0, j).unwrap(), 0.25).unwrap();
        assert_eq!(an.maximal_family(&j).unwrap(), vec![f0]);
        let rects = an.two_maximal_rectangles().unwrap();
        let expected: usize = (1..=3).map(|l| 1usize << (l - 1)).sum();
        assert_eq!(rects.len(), expected);
        for r in &rects {
            assert_eq!(r.j, j);
            assert!(g1.contains(&f0, &r.i).unwrap());
            assert_eq!(r.emb1, (r.i.level() - 1) as u32);
        }
        let res = an.journe_check(&Weights::Geometric { scale: 1.0, ratio: 0.5 }).unwrap();
        assert!(res.pass);
        let zero = an.journe_check(&Weights::Table(vec![0.0])).unwrap();
        assert_eq!((zero.lhs, zero.rhs), (0.0, 0.0));
        assert!(zero.pass);
    }

    #[test]
    fn increasing_weights_are_rejected() {
        assert_eq!(Weights::Table(vec![1.0, 0.5, 0.7]).validate(), Err(Error::NotDecreasing(2)));
        assert_eq!(Weights::Geometric { scale: 1.0, ratio: 2.0 }.validate(), Err(Error::NotDecreasing(1)));
        assert!(Weights::Geometric { scale: 1.0, ratio: 1.0 }.validate().is_err());
    }

    #[test]
    fn partner_cube_requires_containment() {
        let (g1, g2) = grids(3);
        let (i, g) = (g1.cube(3, &[2]).unwrap(), g2.cube(2, &[0]).unwrap());
        let big = g1.ancestor(&i, 2).unwrap();
        let omega = OpenSetOmega::single(&g1, &g2, big, g).unwrap();
        let an = OmegaAnalysis::new(&omega, 0.25).unwrap();
        assert_eq!(an.partner_cube(&i, &g).unwrap().cube, big);
        let other = g1.cube(3, &[6]).unwrap();
        assert!(matches!(an.partner_cube(&other, &g), Err(Error::Precondition(_))));
    }

    #[test]
    fn necessity_for_cancellative_vanishes_and_split_is_consistent() {
        let (g1, g2) = grids(4);
        let mut rng = stream(5, 0);
        let omega = OpenSetOmega::random_union(&g1, &g2, 3, &mut rng).unwrap();
        let an = OmegaAnalysis::new(&omega, default_shadow_constant(1, 1)).unwrap();
        let quad = WhitneyQuadrature::default();
        let k = BiParamKernel::builtin_cancellative(1, 1, 1.0, 1.0).unwrap();
        let r = necessity_check(&k, &an, &quad).unwrap();
        assert!(r.ratio < 1e-20, "{:?}", r);
        let spec = MultiplierSpec::RandomSigns { level: 2, period_level: 0, seed: 4 };
        let (m1, m2) = (Mesh::of(&g1), Mesh::of(&g2));
        let k = BiParamKernel::tensor_paraproduct(1.0, 1.0, spec.sample(&m1).unwrap(), spec.sample(&m2).unwrap()).unwrap();
        let r = necessity_check(&k, &an, &quad).unwrap();
        assert!(r.sum > 0.0 && r.ratio.is_finite());
        assert!(r.hat_c_sum <= 2.0 * (r.s1 + r.s2) * (1.0 + 1e-12));
        assert!(r.sum <= 2.0 * (r.hat_sum + r.hat_c_sum) * (1.0 + 1e-12));
    }

    #[test]
    fn necessity_rejects_non_tensor() {
        let (g1, g2) = grids(3);
        let an = OmegaAnalysis::new(&OpenSetOmega::empty(&g1, &g2), 0.25).unwrap();
        let b = ProductMeshFunction::from_fn(Mesh::of(&g1), Mesh::of(&g2), |x, y| if x[0] < y[0] { 1.0 } else { -1.0 });
        let k = BiParamKernel::builtin_paraproduct(1, 1, 1.0, 1.0, b).unwrap();
        assert_eq!(necessity_check(&k, &an, &WhitneyQuadrature::default()).unwrap_err(), Error::NotTensor);
    }
}
