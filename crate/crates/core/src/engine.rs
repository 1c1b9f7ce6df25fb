//! Whitney quadrature of the bi-parameter square function.
//!
//! Everything is organised around the *level field*: for a window level pair
//! `(a, b)` and every product mesh cell `x`,
//!
//! `E_ab(x) = sum_{i,j} w_i w_j |theta_{t_i(a), t_j(b)} f(x)|^2 |cell|`,
//!
//! where `t_i(a)` are the Whitney nodes of `(2^{-a-1}, 2^{-a}]`. The Whitney
//! integral of a rectangle `I x J` is the sum of `E_ab` over its cells, and
//! since the nodes depend only on the level, one field serves every grid.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::dyadic::{a_coefficient_from, cube_distance, exact_pi_good, goodness_threshold, Cube, DyadicGrid, GridParams};
use crate::error::{bail, Error, Result};
use crate::haar::{haar_function, s_k_correction, HaarBasis, HaarCoefficients, Mesh, ProductMeshFunction};
use crate::kernel::BiParamKernel;
use crate::linalg::{gemm, norm2, Matrix};
use crate::math::{exp2i, powf, sqrt, LN_2};
use crate::rng;
use crate::verify::EstimateReport;

/// Log-uniform midpoint nodes for `dt/t` on `(l/2, l]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WhitneyQuadrature {
    q: usize,
}

impl Default for WhitneyQuadrature {
    fn default() -> Self {
        Self { q: Self::DEFAULT_Q }
    }
}

impl WhitneyQuadrature {
    pub const DEFAULT_Q: usize = 4;

    pub fn new(q: usize) -> Result<Self> {
        if q == 0 {
            bail!(InvalidParams, "Whitney quadrature needs q >= 1");
        }
        Ok(Self { q })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// `(t_i, w_i)` with `t_i = l 2^{-(i + 1/2)/q}` and `w_i = ln 2 / q`.
    pub fn nodes(&self, side: f64) -> Vec<(f64, f64)> {
        let w = LN_2 / self.q as f64;
        (0..self.q).map(|i| (side * powf(2.0, -(i as f64 + 0.5) / self.q as f64), w)).collect()
    }

    pub fn doubled(&self) -> Self {
        Self { q: 2 * self.q }
    }
}

fn level_side(level: i32) -> f64 {
    exp2i(-level)
}

fn check_grid_mesh(grid: &DyadicGrid, mesh: &Mesh) -> Result<()> {
    if Mesh::of(grid) != *mesh {
        bail!(ShapeMismatch, "grid window does not match the mesh of the function");
    }
    Ok(())
}

/// `E_ab` for one level pair.
fn level_pair_field(
    kernel: &BiParamKernel,
    g: &Matrix,
    m1: &Mesh,
    m2: &Mesh,
    a: i32,
    b: i32,
    quad: &WhitneyQuadrature,
) -> Result<Matrix> {
    let vol = m1.cell_volume() * m2.cell_volume();
    let a2: Vec<(Matrix, f64)> = quad
        .nodes(level_side(b))
        .into_iter()
        .map(|(t, w)| Ok((kernel.factor_operator(1, m2, t)?, w)))
        .collect::<Result<_>>()?;
    let mut e = Matrix::zeros(m1.cell_count(), m2.cell_count());
    let mut buf = Matrix::zeros(m1.cell_count(), m2.cell_count());
    for (t1, w1) in quad.nodes(level_side(a)) {
        let p = kernel.factor_operator(0, m1, t1)?.matmul(g);
        for (k2, w2) in &a2 {
            gemm(1.0, p.view(), k2.view().t(), 0.0, &mut buf);
            let s = w1 * w2 * vol;
            for (acc, v) in e.as_mut_slice().iter_mut().zip(buf.as_slice()) {
                *acc += s * v * v;
            }
        }
    }
    Ok(e)
}

/// The level fields of `|theta f|^2` for every window level pair.
#[derive(Clone, Debug)]
pub struct SquareField {
    mesh1: Mesh,
    mesh2: Mesh,
    q: usize,
    fields: Vec<Matrix>,
}

impl SquareField {
    pub fn compute(kernel: &BiParamKernel, f: &ProductMeshFunction, quad: &WhitneyQuadrature) -> Result<Self> {
        let (m1, m2) = f.meshes();
        if m1.dim() != kernel.n || m2.dim() != kernel.m {
            return Err(Error::DimensionMismatch { expected: kernel.n, found: m1.dim() });
        }
        let g = kernel.premodulate(f.values())?;
        let (n1, n2) = (m1.cell_count(), m2.cell_count());
        let vol = m1.cell_volume() * m2.cell_volume();
        let levels2: Vec<i32> = (m2.level_min()..=m2.level_max()).collect();
        let a2: Vec<Vec<(Matrix, f64)>> = levels2
            .iter()
            .map(|&b| {
                quad.nodes(level_side(b))
                    .into_iter()
                    .map(|(t, w)| Ok((kernel.factor_operator(1, &m2, t)?, w)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut fields = Vec::new();
        let mut buf = Matrix::zeros(n1, n2);
        for a in m1.level_min()..=m1.level_max() {
            let mut row: Vec<Matrix> = levels2.iter().map(|_| Matrix::zeros(n1, n2)).collect();
            for (t1, w1) in quad.nodes(level_side(a)) {
                let p = kernel.factor_operator(0, &m1, t1)?.matmul(&g);
                for (e, nodes) in row.iter_mut().zip(&a2) {
                    for (k2, w2) in nodes {
                        gemm(1.0, p.view(), k2.view().t(), 0.0, &mut buf);
                        let s = w1 * w2 * vol;
                        for (acc, v) in e.as_mut_slice().iter_mut().zip(buf.as_slice()) {
                            *acc += s * v * v;
                        }
                    }
                }
            }
            fields.extend(row);
        }
        Ok(Self { mesh1: m1, mesh2: m2, q: quad.q(), fields })
    }

    pub fn meshes(&self) -> (Mesh, Mesh) {
        (self.mesh1, self.mesh2)
    }

    pub fn q(&self) -> usize {
        self.q
    }

    fn levels2(&self) -> usize {
        (self.mesh2.level_max() - self.mesh2.level_min() + 1) as usize
    }

    fn index(&self, a: i32, b: i32) -> Result<usize> {
        let (m1, m2) = (&self.mesh1, &self.mesh2);
        if a < m1.level_min() || a > m1.level_max() || b < m2.level_min() || b > m2.level_max() {
            bail!(OutsideWindow, "level pair ({}, {}) outside the window", a, b);
        }
        Ok((a - m1.level_min()) as usize * self.levels2() + (b - m2.level_min()) as usize)
    }

    pub fn level_pair(&self, a: i32, b: i32) -> Result<&Matrix> {
        Ok(&self.fields[self.index(a, b)?])
    }

    pub fn level_total(&self, a: i32, b: i32) -> Result<f64> {
        Ok(self.level_pair(a, b)?.as_slice().iter().sum())
    }

    /// The window truncation of the full square function integral.
    pub fn total(&self) -> f64 {
        self.fields.iter().map(|e| e.as_slice().iter().sum::<f64>()).sum()
    }

    /// Whitney integral of `W_I x W_J`.
    pub fn rectangle(&self, g1: &DyadicGrid, g2: &DyadicGrid, i: &Cube, j: &Cube) -> Result<f64> {
        check_grid_mesh(g1, &self.mesh1)?;
        check_grid_mesh(g2, &self.mesh2)?;
        g1.check_member(i)?;
        g2.check_member(j)?;
        let e = self.level_pair(i.level(), j.level())?;
        let c2 = g2.cube_cells(j);
        Ok(g1.cube_cells(i).iter().map(|&x| c2.iter().map(|&y| e.get(x, y)).sum::<f64>()).sum())
    }

    /// Per level pair, the sum over good `I` x good `J`; rows are levels of
    /// factor 1 (coarse to fine).
    pub fn good_level_sums(&self, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<Matrix> {
        check_grid_mesh(g1, &self.mesh1)?;
        check_grid_mesh(g2, &self.mesh2)?;
        let (m1, m2) = (&self.mesh1, &self.mesh2);
        let good2: Vec<Vec<bool>> = (m2.level_min()..=m2.level_max()).map(|b| g2.good_cells(b)).collect::<Result<_>>()?;
        let mut out = Matrix::zeros((m1.level_max() - m1.level_min() + 1) as usize, self.levels2());
        for a in m1.level_min()..=m1.level_max() {
            let good1 = g1.good_cells(a)?;
            for (bi, b) in (m2.level_min()..=m2.level_max()).enumerate() {
                let e = self.level_pair(a, b)?;
                let mut s = 0.0;
                for (x, _) in good1.iter().enumerate().filter(|(_, &g)| g) {
                    s += e.row(x).iter().zip(&good2[bi]).filter(|(_, &g)| g).map(|(v, _)| v).sum::<f64>();
                }
                out.set((a - m1.level_min()) as usize, bi, s);
            }
        }
        Ok(out)
    }

    pub fn good_sum(&self, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<f64> {
        Ok(self.good_level_sums(g1, g2)?.as_slice().iter().sum())
    }
}

/// Whitney integral of `|theta g|^2` over `W_I x W_J`.
pub fn whitney_integral(
    kernel: &BiParamKernel,
    g: &ProductMeshFunction,
    g1: &DyadicGrid,
    g2: &DyadicGrid,
    i: &Cube,
    j: &Cube,
    quad: &WhitneyQuadrature,
) -> Result<f64> {
    let (m1, m2) = g.meshes();
    check_grid_mesh(g1, &m1)?;
    check_grid_mesh(g2, &m2)?;
    g1.check_member(i)?;
    g2.check_member(j)?;
    let e = level_pair_field(kernel, &kernel.premodulate(g.values())?, &m1, &m2, i.level(), j.level(), quad)?;
    let c2 = g2.cube_cells(j);
    Ok(g1.cube_cells(i).iter().map(|&x| c2.iter().map(|&y| e.get(x, y)).sum::<f64>()).sum())
}

/// Sum of the Whitney integrals over every window rectangle.
pub fn full_square_norm(kernel: &BiParamKernel, f: &ProductMeshFunction, quad: &WhitneyQuadrature) -> Result<f64> {
    Ok(SquareField::compute(kernel, f, quad)?.total())
}

/// Sum of the Whitney integrals over good `I` x good `J`.
pub fn good_whitney_sum(
    kernel: &BiParamKernel,
    f: &ProductMeshFunction,
    g1: &DyadicGrid,
    g2: &DyadicGrid,
    quad: &WhitneyQuadrature,
) -> Result<f64> {
    SquareField::compute(kernel, f, quad)?.good_sum(g1, g2)
}

/// Outcome of the Monte-Carlo averaging identity.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragingResult {
    pub lhs: f64,
    pub rhs: f64,
    pub standard_error: f64,
    pub trials: u64,
    pub per_trial: Vec<f64>,
    /// Good-cube probabilities per window level, coarse to fine.
    pub pi1: Vec<f64>,
    pub pi2: Vec<f64>,
    /// Level pairs dropped from both sides because no cube of one of the
    /// levels can be good, and the part of the full integral they carry.
    pub excluded_pairs: Vec<(i32, i32)>,
    pub excluded_mass: f64,
}

impl AveragingResult {
    pub fn deviation_in_se(&self) -> f64 {
        let d = (self.lhs - self.rhs).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.standard_error
        }
    }
}

pub const MIN_MC_TRIALS: u64 = 30;

/// Compare the full integral with the mean over random grid pairs of the
/// good-cube sum, reweighted level pair by level pair with the exact
/// good-cube probabilities. Trial `k` draws both grids from stream `(seed, k)`.
pub fn averaging_identity_mc(
    kernel: &BiParamKernel,
    f: &ProductMeshFunction,
    p1: &GridParams,
    p2: &GridParams,
    trials: u64,
    seed: u64,
    quad: &WhitneyQuadrature,
) -> Result<AveragingResult> {
    if trials < MIN_MC_TRIALS {
        bail!(InvalidParams, "averaging identity needs at least {} trials, got {}", MIN_MC_TRIALS, trials);
    }
    let field = SquareField::compute(kernel, f, quad)?;
    averaging_identity_from_field(&field, p1, p2, trials, seed)
}

pub fn averaging_identity_from_field(
    field: &SquareField,
    p1: &GridParams,
    p2: &GridParams,
    trials: u64,
    seed: u64,
) -> Result<AveragingResult> {
    if trials < MIN_MC_TRIALS {
        bail!(InvalidParams, "averaging identity needs at least {} trials, got {}", MIN_MC_TRIALS, trials);
    }
    let (m1, m2) = field.meshes();
    if Mesh::new(p1) != m1 || Mesh::new(p2) != m2 {
        bail!(ShapeMismatch, "grid parameters do not match the field meshes");
    }
    let pi1: Vec<f64> = (p1.level_min..=p1.level_max).map(|a| exact_pi_good(p1, a)).collect::<Result<_>>()?;
    let pi2: Vec<f64> = (p2.level_min..=p2.level_max).map(|b| exact_pi_good(p2, b)).collect::<Result<_>>()?;
    let mut lhs = 0.0;
    let mut excluded_pairs = Vec::new();
    let mut excluded_mass = 0.0;
    for (ai, a) in (p1.level_min..=p1.level_max).enumerate() {
        for (bi, b) in (p2.level_min..=p2.level_max).enumerate() {
            let t = field.level_total(a, b)?;
            if pi1[ai] == 0.0 || pi2[bi] == 0.0 {
                excluded_pairs.push((a, b));
                excluded_mass += t;
            } else {
                lhs += t;
            }
        }
    }
    let mut per_trial = Vec::with_capacity(trials as usize);
    for k in 0..trials {
        let mut r = rng::stream(seed, k);
        let g1 = DyadicGrid::random_from(*p1, &mut r)?;
        let g2 = DyadicGrid::random_from(*p2, &mut r)?;
        let sums = field.good_level_sums(&g1, &g2)?;
        let mut v = 0.0;
        for (ai, &pa) in pi1.iter().enumerate() {
            for (bi, &pb) in pi2.iter().enumerate() {
                if pa > 0.0 && pb > 0.0 {
                    v += sums.get(ai, bi) / (pa * pb);
                }
            }
        }
        per_trial.push(v);
    }
    let n = trials as f64;
    let rhs = per_trial.iter().sum::<f64>() / n;
    let var = per_trial.iter().map(|v| (v - rhs) * (v - rhs)).sum::<f64>() / (n - 1.0);
    Ok(AveragingResult {
        lhs,
        rhs,
        standard_error: sqrt(var / n),
        trials,
        per_trial,
        pi1,
        pi2,
        excluded_pairs,
        excluded_mass,
    })
}

/// Side-condition class of an ordered pair `(I1, I2)` of one grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PairClass {
    /// `l(I1) < l(I2)`.
    Lt,
    /// `l(I1) >= l(I2)` and `d(I1, I2) > l(I2)^gamma l(I1)^(1-gamma)`.
    GeSep,
    /// `I2 ⊊ I1`.
    Sup,
    /// `I1 = I2`, or `l(I1) >= l(I2)`, disjoint and not separated.
    Sim,
}

/// The four side conditions, evaluated independently of each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairPredicates {
    pub lt: bool,
    pub sep: bool,
    pub sup: bool,
    pub sim: bool,
}

impl PairPredicates {
    pub fn count(&self) -> usize {
        [self.lt, self.sep, self.sup, self.sim].iter().filter(|&&b| b).count()
    }
}

pub fn pair_predicates(grid: &DyadicGrid, i1: &Cube, i2: &Cube) -> Result<PairPredicates> {
    grid.check_member(i1)?;
    grid.check_member(i2)?;
    let gamma = grid.params().gamma();
    let (l1, l2) = (i1.side(), i2.side());
    let d = grid.distance(i1, i2);
    let ge = l1 >= l2;
    let nested = grid.contains(i1, i2)?;
    let thr = goodness_threshold(gamma, i2.level(), i1.level());
    Ok(PairPredicates {
        lt: l1 < l2,
        sep: ge && d > thr,
        sup: nested && i1 != i2,
        sim: i1 == i2 || (ge && !nested && d <= thr),
    })
}

pub fn classify_pair(grid: &DyadicGrid, i1: &Cube, i2: &Cube) -> Result<PairClass> {
    let p = pair_predicates(grid, i1, i2)?;
    if p.count() != 1 {
        bail!(Precondition, "side conditions overlap or leave a gap: {:?}", p);
    }
    Ok(if p.lt {
        PairClass::Lt
    } else if p.sep {
        PairClass::GeSep
    } else if p.sup {
        PairClass::Sup
    } else {
        PairClass::Sim
    })
}

/// Exhaustive scan of ordered window pairs `(I1, I2)` with `I2` good.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartitionReport {
    pub pairs: u64,
    /// Counts for `<`, `>=sep`, `sup`, `sim`.
    pub counts: [u64; 4],
    /// Pairs where not exactly one predicate holds.
    pub violations: u64,
    /// `sim` pairs with `l(I1) > 2^r l(I2)` or `d(I1, I2) > 2^r l(I2)`.
    pub scale_violations: u64,
    /// Largest number of `sim` partners of a single good `I2`.
    pub max_sim_partners: usize,
}

pub fn check_class_partition(grid: &DyadicGrid) -> Result<PartitionReport> {
    let p = *grid.params();
    let cubes = grid.all_cubes();
    let reach = exp2i(p.r as i32);
    let mut rep = PartitionReport::default();
    for i2 in &cubes {
        if !grid.is_good(i2)? {
            continue;
        }
        let mut partners = 0;
        for i1 in &cubes {
            let pr = pair_predicates(grid, i1, i2)?;
            rep.pairs += 1;
            if pr.count() != 1 {
                rep.violations += 1;
                continue;
            }
            let k = [pr.lt, pr.sep, pr.sup, pr.sim].iter().position(|&b| b).expect("one predicate");
            rep.counts[k] += 1;
            if pr.sim {
                partners += 1;
                let (l1, l2) = (i1.side(), i2.side());
                if l1 > reach * l2 || grid.distance(i1, i2) > reach * l2 {
                    rep.scale_violations += 1;
                }
            }
        }
        rep.max_sim_partners = rep.max_sim_partners.max(partners);
    }
    Ok(rep)
}

/// Restrictions of the `I1` (or `J1`) summation used by the term splitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TermClass {
    All,
    Lt,
    Ge,
    GeSep,
    Sup,
    Sim,
    /// `sup` with `h_{I^(k)}` replaced by `s^k_I`.
    SupMod,
    /// `sup` with `h_{I^(k)}` replaced by `<h_{I^(k)}>_{I^(k-1)}`.
    SupCar,
}

const ATOMS: usize = 5;

impl TermClass {
    pub const ALL: [TermClass; 8] = [
        TermClass::All,
        TermClass::Lt,
        TermClass::Ge,
        TermClass::GeSep,
        TermClass::Sup,
        TermClass::Sim,
        TermClass::SupMod,
        TermClass::SupCar,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TermClass::All => "all",
            TermClass::Lt => "<",
            TermClass::Ge => ">=",
            TermClass::GeSep => ">=sep",
            TermClass::Sup => "sup",
            TermClass::Sim => "sim",
            TermClass::SupMod => "sup-mod",
            TermClass::SupCar => "car",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Atomic pieces: `<`, `>=sep`, `sup-mod`, `car`, `sim`.
    fn atoms(self) -> &'static [usize] {
        match self {
            TermClass::All => &[0, 1, 2, 3, 4],
            TermClass::Lt => &[0],
            TermClass::Ge => &[1, 2, 3, 4],
            TermClass::GeSep => &[1],
            TermClass::Sup => &[2, 3],
            TermClass::Sim => &[4],
            TermClass::SupMod => &[2],
            TermClass::SupCar => &[3],
        }
    }
}

/// One inequality of the term splitting, evaluated numerically.
#[derive(Clone, Debug, PartialEq)]
pub struct LedgerCheck {
    pub name: String,
    pub lhs: f64,
    pub bound: f64,
    pub holds: bool,
}

/// All restricted sums `S_{C,D}` for one function and grid pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionLedger {
    values: [[f64; 8]; 8],
    /// `S_{all,all}` recomputed from the square field.
    pub good_sum: f64,
    /// `sum_{I,J good} |<f>_{IxJ}|^2 C_IJ`, recomputed from the field of `theta 1`.
    pub car_car_direct: f64,
}

impl DecompositionLedger {
    pub fn get(&self, c: TermClass, d: TermClass) -> f64 {
        self.values[c.index()][d.index()]
    }

    pub fn entries(&self) -> Vec<(TermClass, TermClass, f64)> {
        let mut out = Vec::new();
        for c in TermClass::ALL {
            for d in TermClass::ALL {
                out.push((c, d, self.get(c, d)));
            }
        }
        out
    }

    fn check(&self, name: String, lhs: (TermClass, TermClass), pieces: &[(TermClass, TermClass)]) -> LedgerCheck {
        let v = self.get(lhs.0, lhs.1);
        let sum: f64 = pieces.iter().map(|&(c, d)| self.get(c, d)).sum();
        let bound = pieces.len() as f64 * sum;
        LedgerCheck { name, lhs: v, bound, holds: v <= bound * (1.0 + 1e-9) + 1e-300 }
    }

    /// The Cauchy-Schwarz form of every split: a restricted sum is at most
    /// the number of pieces times the sum of the pieces.
    pub fn checks(&self) -> Vec<LedgerCheck> {
        use TermClass::*;
        let mut out = vec![self.check(
            "S <= 4 (S<,< + S>=,>= + S<,>= + S>=,<)".into(),
            (All, All),
            &[(Lt, Lt), (Ge, Ge), (Lt, Ge), (Ge, Lt)],
        )];
        let three = [GeSep, Sup, Sim];
        out.push(self.check("S>=,< <= 3 (sep + sup + sim)".into(), (Ge, Lt), &three.map(|c| (c, Lt))));
        out.push(self.check("S<,>= <= 3 (sep + sup + sim)".into(), (Lt, Ge), &three.map(|d| (Lt, d))));
        let nine: Vec<(TermClass, TermClass)> = three.iter().flat_map(|&c| three.iter().map(move |&d| (c, d))).collect();
        out.push(self.check("S>=,>= <= 9 (nine pieces)".into(), (Ge, Ge), &nine));
        for other in [Lt, GeSep, Sim] {
            out.push(self.check(
                format!("S_sup,{} <= 2 (mod + car)", other.label()),
                (Sup, other),
                &[(SupMod, other), (SupCar, other)],
            ));
            out.push(self.check(
                format!("S_{},sup <= 2 (mod + car)", other.label()),
                (other, Sup),
                &[(other, SupMod), (other, SupCar)],
            ));
        }
        out.push(self.check(
            "S_sup,sup <= 4 (mod/car pieces)".into(),
            (Sup, Sup),
            &[(SupMod, SupMod), (SupMod, SupCar), (SupCar, SupMod), (SupCar, SupCar)],
        ));
        out
    }

    /// Deviation of the two independent cross-checks, relative to `S`.
    pub fn cross_check_errors(&self) -> (f64, f64) {
        let scale = self.get(TermClass::All, TermClass::All);
        let rel = |a: f64, b: f64| {
            let s = a.abs().max(b.abs()).max(scale);
            if s == 0.0 {
                0.0
            } else {
                (a - b).abs() / s
            }
        };
        (
            rel(self.get(TermClass::All, TermClass::All), self.good_sum),
            rel(self.get(TermClass::SupCar, TermClass::SupCar), self.car_car_direct),
        )
    }
}

/// Per axis data of the decomposition.
struct AxisData {
    values: Matrix,
    /// For each window level: good cells (rows) and, per row, the class of
    /// every slot against the level cube of that cell.
    levels: Vec<(i32, Vec<usize>, Vec<Vec<PairClass>>)>,
}

fn axis_data(grid: &DyadicGrid) -> Result<AxisData> {
    let basis = HaarBasis::new(grid)?;
    let slots = basis.slots();
    let values = basis.value_matrix()?;
    let p = grid.params();
    let mut levels = Vec::new();
    for a in p.level_min..=p.level_max {
        let cubes = grid.cubes_at(a)?;
        let good = grid.good_mask(a)?;
        let table: Vec<Vec<PairClass>> = cubes
            .iter()
            .map(|i2| {
                slots
                    .iter()
                    .enumerate()
                    .map(|(s, (i1, _))| if s == 0 { Ok(PairClass::Sup) } else { classify_pair(grid, i1, i2) })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let rows: Vec<usize> = (0..grid.cell_count()).filter(|&c| good[grid.linear_of_cell(c, a)]).collect();
        let row_classes = rows.iter().map(|&c| table[grid.linear_of_cell(c, a)].clone()).collect();
        levels.push((a, rows, row_classes));
    }
    Ok(AxisData { values, levels })
}

/// Atomic restricted operators `X_c[row, slot]` for one node.
fn atomic_blocks(op: &Matrix, data: &AxisData, rows: &[usize], classes: &[Vec<PairClass>]) -> [Matrix; ATOMS] {
    let h = op.matmul(&data.values);
    let u: Vec<f64> = (0..op.rows()).map(|r| op.row(r).iter().sum()).collect();
    let s = data.values.cols();
    let mut out: [Matrix; ATOMS] = core::array::from_fn(|_| Matrix::zeros(rows.len(), s));
    for (ri, (&x, cls)) in rows.iter().zip(classes).enumerate() {
        let hrow = h.row(x);
        let vrow = data.values.row(x);
        for c in 0..s {
            match cls[c] {
                PairClass::Lt => out[0].set(ri, c, hrow[c]),
                PairClass::GeSep => out[1].set(ri, c, hrow[c]),
                PairClass::Sup => {
                    let car = u[x] * vrow[c];
                    out[2].set(ri, c, hrow[c] - car);
                    out[3].set(ri, c, car);
                }
                PairClass::Sim => out[4].set(ri, c, hrow[c]),
            }
        }
    }
    out
}

/// Restricted sums `S_{C,D}` over good `I2 x J2` for a tensor kernel.
pub fn term_decomposition(
    kernel: &BiParamKernel,
    coefs: &HaarCoefficients,
    g1: &DyadicGrid,
    g2: &DyadicGrid,
    quad: &WhitneyQuadrature,
) -> Result<DecompositionLedger> {
    if !kernel.is_tensor() {
        return Err(Error::NotTensor);
    }
    let (c1, c2) = coefs.grids();
    if c1 != g1 {
        return Err(Error::GridMismatch { expected: g1.id(), found: c1.id() });
    }
    if c2 != g2 {
        return Err(Error::GridMismatch { expected: g2.id(), found: c2.id() });
    }
    let (m1, m2) = (Mesh::of(g1), Mesh::of(g2));
    let d1 = axis_data(g1)?;
    let d2 = axis_data(g2)?;
    let fhat = coefs.matrix();
    let vol = m1.cell_volume() * m2.cell_volume();

    // W_d = fhat Y_d^T for every node of factor 2.
    let mut side2 = Vec::new();
    for (b, rows, classes) in &d2.levels {
        for (t2, w2) in quad.nodes(level_side(*b)) {
            let op = kernel.factor_operator(1, &m2, t2)?;
            let y = atomic_blocks(&op, &d2, rows, classes);
            let w: Vec<Matrix> = y
                .iter()
                .map(|yd| {
                    let mut out = Matrix::zeros(fhat.rows(), yd.rows());
                    gemm(1.0, fhat.view(), yd.view().t(), 0.0, &mut out);
                    out
                })
                .collect();
            side2.push((w, w2));
        }
    }

    let mut values = [[0.0; 8]; 8];
    for (a, rows, classes) in &d1.levels {
        if rows.is_empty() {
            continue;
        }
        for (t1, w1) in quad.nodes(level_side(*a)) {
            let op = kernel.factor_operator(0, &m1, t1)?;
            let x = atomic_blocks(&op, &d1, rows, classes);
            for (w, w2) in &side2 {
                let cols = w[0].cols();
                if cols == 0 {
                    continue;
                }
                let z: Vec<Matrix> = (0..ATOMS * ATOMS)
                    .map(|k| {
                        let mut out = Matrix::zeros(rows.len(), cols);
                        gemm(1.0, x[k / ATOMS].view(), w[k % ATOMS].view(), 0.0, &mut out);
                        out
                    })
                    .collect();
                let scale = w1 * w2 * vol;
                let mut acc = Matrix::zeros(rows.len(), cols);
                for c in TermClass::ALL {
                    for d in TermClass::ALL {
                        acc.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
                        for &ca in c.atoms() {
                            for &da in d.atoms() {
                                for (s, v) in acc.as_mut_slice().iter_mut().zip(z[ca * ATOMS + da].as_slice()) {
                                    *s += v;
                                }
                            }
                        }
                        values[c.index()][d.index()] += scale * acc.sum_sq();
                    }
                }
            }
        }
    }

    let basis1 = HaarBasis::new(g1)?;
    let basis2 = HaarBasis::new(g2)?;
    let f = crate::haar::inverse_product_haar_transform(coefs, &basis1, &basis2)?;
    let field = SquareField::compute(kernel, &f, quad)?;
    let good_sum = field.good_sum(g1, g2)?;
    let one = ProductMeshFunction::from_fn(m1, m2, |_, _| 1.0);
    let field1 = SquareField::compute(kernel, &one, quad)?;
    let car_car_direct = car_car_sum(&field1, &f, g1, g2)?;
    Ok(DecompositionLedger { values, good_sum, car_car_direct })
}

/// Cube sums of a per-cell matrix over level `a` cubes (rows) and level `b`
/// cubes (columns).
fn aggregate(m: &Matrix, g1: &DyadicGrid, g2: &DyadicGrid, a: i32, b: i32) -> Matrix {
    let mut out = Matrix::zeros(g1.cube_count(a), g2.cube_count(b));
    let map2: Vec<usize> = (0..g2.cell_count()).map(|c| g2.linear_of_cell(c, b)).collect();
    for x in 0..g1.cell_count() {
        let qi = g1.linear_of_cell(x, a);
        let row = m.row(x);
        let dst = out.row_mut(qi);
        for (y, v) in row.iter().enumerate() {
            dst[map2[y]] += v;
        }
    }
    out
}

fn car_car_sum(field1: &SquareField, f: &ProductMeshFunction, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<f64> {
    let (p1, p2) = (g1.params(), g2.params());
    let mut total = 0.0;
    for a in p1.level_min..=p1.level_max {
        let good1 = g1.good_mask(a)?;
        let cells1 = (g1.cell_count() / g1.cube_count(a)) as f64;
        for b in p2.level_min..=p2.level_max {
            let good2 = g2.good_mask(b)?;
            let cells2 = (g2.cell_count() / g2.cube_count(b)) as f64;
            let c = aggregate(field1.level_pair(a, b)?, g1, g2, a, b);
            let s = aggregate(f.values(), g1, g2, a, b);
            for i in (0..good1.len()).filter(|&i| good1[i]) {
                for j in (0..good2.len()).filter(|&j| good2[j]) {
                    let avg = s.get(i, j) / (cells1 * cells2);
                    total += avg * avg * c.get(i, j);
                }
            }
        }
    }
    Ok(total)
}

/// How cube distances enter `A_{I1 I2}`.
#[derive(Clone, Copy, Debug)]
pub enum SchurMetric<'a> {
    /// ℓ∞ distance in `R^n` between the cubes as placed in the box.
    Free,
    /// Distance on the periodic box of the grid.
    Periodic(&'a DyadicGrid),
}

pub fn a_matrix(cubes: &[Cube], alpha: f64, metric: SchurMetric<'_>) -> Result<Matrix> {
    let n = cubes.len();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let d = match metric {
                SchurMetric::Free => cube_distance(&cubes[i], &cubes[j])?,
                SchurMetric::Periodic(g) => g.distance(&cubes[i], &cubes[j]),
            };
            let v = a_coefficient_from(cubes[i].side(), cubes[j].side(), d, cubes[i].dim(), alpha);
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    Ok(a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchurReport {
    /// Operator norm of `A` on `l^2` of the family.
    pub norm: f64,
    /// Largest `sum A x y / (|x| |y|)` over the supplied random vectors.
    pub max_ratio: f64,
    pub size: usize,
    pub iterations: usize,
}

pub const MAX_SCHUR_CUBES: usize = 4096;

/// Operator norm of `(A_{I1 I2})` over a cube family, by power iteration
/// (the matrix is symmetric and nonnegative), plus the bilinear ratio on
/// `random_vectors` pairs of nonnegative vectors.
pub fn schur_test<R: Rng + ?Sized>(
    cubes: &[Cube],
    alpha: f64,
    metric: SchurMetric<'_>,
    random_vectors: usize,
    rng: &mut R,
) -> Result<SchurReport> {
    if cubes.is_empty() {
        return Err(Error::Empty("cube family"));
    }
    if cubes.len() > MAX_SCHUR_CUBES {
        bail!(InvalidParams, "cube family of {} exceeds {}", cubes.len(), MAX_SCHUR_CUBES);
    }
    let a = a_matrix(cubes, alpha, metric)?;
    let n = cubes.len();
    let mut v = vec![1.0 / sqrt(n as f64); n];
    let mut norm = 0.0;
    let mut iterations = 0;
    for it in 1..=20_000 {
        let w = a.matvec(&v);
        let next = norm2(&w);
        iterations = it;
        if next == 0.0 {
            norm = 0.0;
            break;
        }
        v = w.iter().map(|x| x / next).collect();
        let done = (next - norm).abs() <= 1e-14 * next;
        norm = next;
        if done {
            break;
        }
    }
    let mut max_ratio: f64 = 0.0;
    for _ in 0..random_vectors {
        let x: Vec<f64> = (0..n).map(|_| rng::uniform(rng, 0.0, 1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng::uniform(rng, 0.0, 1.0)).collect();
        let ay = a.matvec(&y);
        let r = crate::linalg::dot(&x, &ay) / (norm2(&x) * norm2(&y));
        max_ratio = max_ratio.max(r);
    }
    Ok(SchurReport { norm, max_ratio, size: n, iterations })
}

/// The second-factor function of a Carleson number check.
#[derive(Clone, Debug, PartialEq)]
pub enum CarlesonFactor {
    /// `1 ⊗ h_{J1}` with `(x2, t2)` in `W_{J2}`, `l(J1) < l(J2)`.
    Haar { j1: Cube, eta: u8, j2: Cube },
    /// `1 ⊗ s^l_J` with `(x2, t2)` in `W_J`, `J` good, `l >= 1`.
    Correction { j: Cube, l: u32, eta: u8 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CarlesonNumbers {
    pub report: EstimateReport,
    /// Sup of the ratio per `I` level.
    pub level_sup: Vec<(i32, f64)>,
}

/// Sampled Carleson-box sums of `|theta(1 ⊗ g)|^2` over `I`, divided by
/// `|I| A_{J1 J2}^2 / |J2|` (Haar factor) or `|I| 2^{-beta l} / |J^(l)|`
/// (correction). The box sum runs over the Whitney bands of the window and
/// stops at the finest level.
#[allow(clippy::too_many_arguments)]
pub fn carleson_numbers_check(
    kernel: &BiParamKernel,
    factor: &CarlesonFactor,
    g1: &DyadicGrid,
    g2: &DyadicGrid,
    i_levels: &[i32],
    samples: u64,
    seed: u64,
    quad: &WhitneyQuadrature,
) -> Result<CarlesonNumbers> {
    if i_levels.is_empty() {
        return Err(Error::Empty("I levels"));
    }
    if samples == 0 {
        return Err(Error::Empty("samples"));
    }
    let (m1, m2) = (Mesh::of(g1), Mesh::of(g2));
    let p1 = *g1.params();
    for &lv in i_levels {
        if !p1.in_window(lv) {
            bail!(OutsideWindow, "I level {}", lv);
        }
    }
    let (region, g, rhs_unit, id) = match factor {
        CarlesonFactor::Haar { j1, eta, j2 } => {
            g2.check_member(j1)?;
            g2.check_member(j2)?;
            if j1.level() <= j2.level() {
                bail!(Precondition, "the Haar factor needs l(J1) < l(J2)");
            }
            let d = g2.distance(j1, j2);
            let a = a_coefficient_from(j1.side(), j2.side(), d, kernel.m, kernel.beta);
            (*j2, haar_function(g2, j1, *eta)?, a * a / j2.volume(), "carleson-numbers-haar")
        }
        CarlesonFactor::Correction { j, l, eta } => {
            if *l == 0 {
                bail!(Precondition, "correction needs l >= 1");
            }
            if !g2.is_good(j)? {
                bail!(Precondition, "correction needs a good J");
            }
            let top = g2.ancestor(j, *l)?;
            let s = s_k_correction(g2, j, *l, *eta)?;
            (*j, s, powf(2.0, -kernel.beta * *l as f64) / top.volume(), "carleson-numbers-correction")
        }
    };
    let ones = Matrix::from_fn(m1.cell_count(), m2.cell_count(), |_, _| 1.0);
    let bmat = kernel.premodulate(&ones)?;
    let finest = p1.level_max;
    let coarsest = *i_levels.iter().min().expect("non-empty");
    let ops: Vec<Vec<(Matrix, f64)>> = (coarsest..=finest)
        .map(|c| {
            quad.nodes(level_side(c))
                .into_iter()
                .map(|(t, w)| Ok((kernel.factor_operator(0, &m1, t)?, w)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut report = EstimateReport::new(id);
    let mut level_sup: Vec<(i32, f64)> = i_levels.iter().map(|&l| (l, 0.0)).collect();
    let vol1 = m1.cell_volume();
    for s in 0..samples {
        let mut r = rng::stream(seed, s);
        let lo = region.lo();
        let x2: Vec<f64> = (0..kernel.m).map(|k| lo[k] + rng::uniform(&mut r, 0.0, region.side())).collect();
        let t2 = rng::log_uniform(&mut r, region.side() / 2.0, region.side());
        let row = kernel.factor_row(1, &m2, t2, &x2)?;
        let y: Vec<f64> = row.iter().zip(g.values()).map(|(a, b)| a * b).collect();
        let v = bmat.matvec(&y);
        let v_abs: Vec<f64> = v.iter().map(|x| x.abs()).collect();
        // band[c][x1]: Whitney band of level c at cell x1.
        let bands: Vec<Vec<f64>> = ops
            .iter()
            .map(|nodes| {
                let mut band = vec![0.0; m1.cell_count()];
                for (op, w) in nodes {
                    for (x, b) in band.iter_mut().enumerate() {
                        let row = op.row(x);
                        let u = crate::linalg::dot(row, &v);
                        // values at the rounding level of a cancelling sum count as zero
                        let noise: f64 = row.iter().zip(&v_abs).map(|(a, b)| a.abs() * b).sum::<f64>() * 1e-13;
                        if u.abs() > noise {
                            *b += w * u * u * vol1;
                        }
                    }
                }
                band
            })
            .collect();
        for (li, &lv) in i_levels.iter().enumerate() {
            for i in g1.cubes_at(lv)? {
                let cells = g1.cube_cells(&i);
                let lhs: f64 = bands[(lv - coarsest) as usize..]
                    .iter()
                    .map(|band| cells.iter().map(|&c| band[c]).sum::<f64>())
                    .sum();
                let rhs = rhs_unit * i.volume();
                let ratio = lhs / rhs;
                let mut w = vec![t2];
                w.extend_from_slice(&x2);
                w.extend_from_slice(&[lv as f64, lhs, rhs]);
                w.extend(i.index().iter().map(|&k| k as f64));
                report.observe(ratio, &w);
                if ratio > level_sup[li].1 || ratio.is_nan() {
                    level_sup[li].1 = ratio;
                }
            }
        }
    }
    Ok(CarlesonNumbers { report, level_sup })
}

/// The tail bound `l(I)^a d(I, ∂I^(k-1))^{-a}` for a cube and its ancestors.
pub fn goodness_tail_ratio(grid: &DyadicGrid, cube: &Cube, k: u32) -> Result<f64> {
    if k == 0 {
        bail!(Precondition, "k >= 1");
    }
    let outer = grid.ancestor(cube, k - 1)?;
    let d = grid.boundary_distance(cube, &outer);
    let alpha = grid.params().alpha;
    Ok(powf(cube.side(), alpha) * powf(d, -alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar::{product_haar_transform, random_haar_polynomial};
    use crate::kernel::MultiplierSpec;
    use crate::rng::stream;

    fn params(depth: i32, r: u32) -> GridParams {
        GridParams::new(1, 1.0, r, 0, depth).unwrap()
    }

    #[test]
    fn quadrature_weights_sum_to_ln2() {
        for q in [1, 3, 4, 8] {
            let s: f64 = WhitneyQuadrature::new(q).unwrap().nodes(0.25).iter().map(|n| n.1).sum();
            assert!((s - LN_2).abs() < 1e-15);
            assert!(WhitneyQuadrature::new(q).unwrap().nodes(0.25).iter().all(|n| n.0 > 0.125 && n.0 <= 0.25));
        }
        assert!(WhitneyQuadrature::new(0).is_err());
    }

    #[test]
    fn zero_function_and_homogeneity() {
        let p = params(4, 2);
        let m = Mesh::new(&p);
        let k = BiParamKernel::builtin_cancellative(1, 1, 1.0, 1.0).unwrap();
        let quad = WhitneyQuadrature::default();
        assert_eq!(full_square_norm(&k, &ProductMeshFunction::zeros(m, m), &quad).unwrap(), 0.0);
        let g = DyadicGrid::standard(p).unwrap();
        let b = HaarBasis::new(&g).unwrap();
        let f = random_haar_polynomial(&b, &b, 4, &mut stream(1, 0)).unwrap();
        let v = full_square_norm(&k, &f, &quad).unwrap();
        let v3 = full_square_norm(&k, &f.scale(3.0), &quad).unwrap();
        assert!(v > 0.0 && (v3 - 9.0 * v).abs() < 1e-10 * v3);
    }

    #[test]
    fn field_matches_rectangle_enumeration() {
        let p = params(3, 1);
        let g = DyadicGrid::random(p, 3).unwrap();
        let b = HaarBasis::new(&g).unwrap();
        let k = BiParamKernel::builtin_cancellative(1, 1, 1.0, 1.0).unwrap();
        let f = random_haar_polynomial(&b, &b, 1, &mut stream(2, 0)).unwrap();
        let quad = WhitneyQuadrature::new(2).unwrap();
        let field = SquareField::compute(&k, &f, &quad).unwrap();
        let mut brute = 0.0;
        for i in g.all_cubes() {
            for j in g.all_cubes() {
                let w = whitney_integral(&k, &f, &g, &g, &i, &j, &quad).unwrap();
                assert!((w - field.rectangle(&g, &g, &i, &j).unwrap()).abs() <= 1e-12 * (1.0 + w));
                brute += w;
            }
        }
        assert!((brute - field.total()).abs() < 1e-10 * field.total());
    }

    #[test]
    fn tensor_whitney_integral_factorises() {
        let p = params(4, 1);
        let m = Mesh::new(&p);
        let g = DyadicGrid::random(p, 8).unwrap();
        let k = BiParamKernel::builtin_cancellative(1, 1, 1.0, 1.0).unwrap();
        let (o1, o2) = k.tensor_factors().unwrap();
        let mut r = stream(9, 0);
        let u = crate::haar::MeshFunction::from_fn(m, |_| rng::uniform(&mut r, -1.0, 1.0));
        let v = crate::haar::MeshFunction::from_fn(m, |_| rng::uniform(&mut r, -1.0, 1.0));
        let f = ProductMeshFunction::tensor(&u, &v);
        let quad = WhitneyQuadrature::default();
        let i = g.cube(2, &[1]).unwrap();
        let j = g.cube(1, &[0]).unwrap();
        let one_param = |o: &crate::kernel::OneParamKernel, h: &crate::haar::MeshFunction, c: &Cube| {
            let mut s = 0.0;
            for (t, w) in quad.nodes(c.side()) {
                let th = o.apply(h, t).unwrap();
                s += w * g.cube_cells(c).iter().map(|&x| th[x] * th[x]).sum::<f64>() * m.cell_volume();
            }
            s
        };
        let prod = one_param(&o1, &u, &i) * one_param(&o2, &v, &j);
        let w = whitney_integral(&k, &f, &g, &g, &i, &j, &quad).unwrap();
        assert!((w - prod).abs() <= 1e-8 * prod);
    }

    #[test]
    fn good_sum_is_a_subsum_and_full_when_all_good() {
        let p = params(5, 2);
        let g = DyadicGrid::random(p, 11).unwrap();
        let b = HaarBasis::new(&g).unwrap();
        let k = BiParamKernel::builtin_cancellative(1, 1, 1.0, 1.0).unwrap();
        let f = random_haar_polynomial(&b, &b, 5, &mut stream(3, 0)).unwrap();
        let field = SquareField::compute(&k, &f, &WhitneyQuadrature::default()).unwrap();
        assert!(field.good_sum(&g, &g).unwrap() <= field.total() * (1.0 + 1e-12));
        let gall = DyadicGrid::random(p.with_r(10), 11).unwrap();
        assert!((field.good_sum(&gall, &gall).unwrap() - field.total()).abs() < 1e-12 * field.total());
    }

    #[test]
    fn averaging_identity_is_exact_without_bad_cubes() {
        let p = params(4, 10);
        let g = DyadicGrid::standard(p).unwrap();
        let b = HaarBasis::new(&g).unwrap();
        let k = BiParamKernel::builtin_cancellative(1, 1, 1.0, 1.0).unwrap();
        let f = random_haar_polynomial(&b, &b, 3, &mut stream(4, 0)).unwrap();
        let res = averaging_identity_mc(&k, &f, &p, &p, 30, 5, &WhitneyQuadrature::default()).unwrap();
        for v in &res.per_trial {
            assert!((v - res.lhs).abs() <= 1e-10 * res.lhs);
        }
        assert!(averaging_identity_mc(&k, &f, &p, &p, 29, 5, &WhitneyQuadrature::default()).is_err());
        let m = Mesh::new(&p);
        let z = averaging_identity_mc(&k, &ProductMeshFunction::zeros(m, m), &p, &p, 30, 5, &WhitneyQuadrature::default())
            .unwrap();
        assert_eq!((z.lhs, z.rhs, z.standard_error), (0.0, 0.0, 0.0));
    }

    #[test]
    fn class_partition_exhaustive() {
        for seed in 0..4 {
            let g = DyadicGrid::random(params(6, 3), seed).unwrap();
            let rep = check_class_partition(&g).unwrap();
            assert_eq!(rep.violations, 0);
            assert_eq!(rep.scale_violations, 0);
            assert!(rep.pairs > 0 && rep.counts.iter().all(|&c| c > 0));
            assert!(rep.max_sim_partners <= 3usize.pow(1) * (1 << 3) + 1);
        }
    }

    #[test]
    fn single_haar_product_hits_one_class_per_rectangle() {
        // Window of two levels: I1 at level 0 (top) and I2 at level 1.
        let g = DyadicGrid::standard(params(2, 1)).unwrap();
        let top = g.cube(0, &[0]).unwrap();
        let i2 = g.cube(1, &[1]).unwrap();
        assert_eq!(classify_pair(&g, &top, &i2).unwrap(), PairClass::Sup);
        assert_eq!(classify_pair(&g, &i2, &top).unwrap(), PairClass::Lt);
        assert_eq!(classify_pair(&g, &i2, &i2).unwrap(), PairClass::Sim);
        let other = g.cube(1, &[0]).unwrap();
        assert_eq!(classify_pair(&g, &other, &i2).unwrap(), PairClass::Sim);
    }

    #[test]
    fn ledger_checks_and_cross_checks() {
        let p = params(5, 4);
        let g1 = DyadicGrid::random(p, 21).unwrap();
        let g2 = DyadicGrid::random(p, 22).unwrap();
        let (b1, b2) = (HaarBasis::new(&g1).unwrap(), HaarBasis::new(&g2).unwrap());
        let m = Mesh::new(&p);
        let s1 = MultiplierSpec::RandomSigns { level: 2, period_level: 0, seed: 1 }.sample(&m).unwrap();
        let s2 = MultiplierSpec::RandomSigns { level: 3, period_level: 0, seed: 2 }.sample(&m).unwrap();
        let k = BiParamKernel::tensor_paraproduct(1.0, 1.0, s1, s2).unwrap();
        let f = random_haar_polynomial(&b1, &b2, 6, &mut stream(7, 0)).unwrap();
        let c = product_haar_transform(&f, &b1, &b2).unwrap();
        let led = term_decomposition(&k, &c, &g1, &g2, &WhitneyQuadrature::new(2).unwrap()).unwrap();
        for chk in led.checks() {
            assert!(chk.holds, "{:?}", chk);
        }
        let (e1, e2) = led.cross_check_errors();
        assert!(e1 < 1e-10 && e2 < 1e-10, "{} {}", e1, e2);
        assert!(led.entries().iter().all(|e| e.2 >= 0.0));
        assert!(led.get(TermClass::SupCar, TermClass::SupCar) > 0.0);
        let zero = HaarCoefficients::zeros(&g1, &g2);
        let lz = term_decomposition(&k, &zero, &g1, &g2, &WhitneyQuadrature::new(2).unwrap()).unwrap();
        assert!(lz.entries().iter().all(|e| e.2 == 0.0));
        assert!(term_decomposition(&k, &c, &g2, &g1, &WhitneyQuadrature::new(2).unwrap()).is_err());
    }

    #[test]
    fn schur_single_cube() {
        let c = Cube::free(0, &[0]).unwrap();
        let rep = schur_test(&[c], 1.0, SchurMetric::Free, 3, &mut stream(0, 0)).unwrap();
        assert!((rep.norm - 0.25).abs() < 1e-14);
        assert!(rep.max_ratio <= rep.norm * (1.0 + 1e-12));
        assert!(schur_test(&[], 1.0, SchurMetric::Free, 0, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn carleson_numbers_vanish_for_cancellative_kernel() {
        let p = params(5, 1);
        let g = DyadicGrid::random(p, 1).unwrap();
        let k = BiParamKernel::builtin_cancellative(1, 1, 1.0, 1.0).unwrap();
        let f = CarlesonFactor::Haar { j1: g.cube(3, &[2]).unwrap(), eta: 1, j2: g.cube(1, &[0]).unwrap() };
        let res = carleson_numbers_check(&k, &f, &g, &g, &[1, 2], 3, 0, &WhitneyQuadrature::default()).unwrap();
        assert!(res.report.constant < 1e-20);
        let bad = CarlesonFactor::Haar { j1: g.cube(1, &[0]).unwrap(), eta: 1, j2: g.cube(3, &[2]).unwrap() };
        assert!(carleson_numbers_check(&k, &bad, &g, &g, &[1], 3, 0, &WhitneyQuadrature::default()).is_err());
    }
}
