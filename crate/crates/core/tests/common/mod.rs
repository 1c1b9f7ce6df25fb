//! Brute-force oracles shared by the integration and acceptance tests.
//! They use only the public API and enumerate by definition, with no tables.
#![allow(dead_code)]

use biparam_core::dyadic::{goodness_threshold, Cube, DyadicGrid};
use biparam_core::haar::ProductMeshFunction;

/// Goodness by scanning every cube `K` with `l(K) >= 2^r l(I)` strictly
/// below the top of the window, containing `I` or not.
pub fn is_good_oracle(g: &DyadicGrid, cube: &Cube) -> bool {
    let p = g.params();
    let side = p.side();
    for level in (p.level_min + 1)..=(cube.level() - p.r as i32) {
        let thr = goodness_threshold(p.gamma(), cube.level(), level);
        for k in g.cubes_at(level).unwrap() {
            let mut contained = true;
            let mut d = f64::INFINITY;
            for a in 0..g.dim() {
                let rel = (cube.lo()[a] - k.lo()[a]).rem_euclid(side);
                if rel + cube.side() <= k.side() {
                    d = d.min(rel).min(k.side() - rel - cube.side());
                } else {
                    contained = false;
                }
            }
            let dist = if contained { d } else { g.distance(cube, &k) };
            if dist <= thr {
                return false;
            }
        }
    }
    true
}

fn cells_of(g1: &DyadicGrid, g2: &DyadicGrid, i: &Cube, j: &Cube) -> Vec<usize> {
    let n2 = g2.cell_count();
    let c2 = g2.cube_cells(j);
    g1.cube_cells(i).into_iter().flat_map(|x| c2.iter().map(move |&y| x * n2 + y)).collect()
}

pub fn rect_inside(g1: &DyadicGrid, g2: &DyadicGrid, set: &[bool], i: &Cube, j: &Cube) -> bool {
    cells_of(g1, g2, i, j).into_iter().all(|c| set[c])
}

/// `M_D f` by averaging over every window rectangle containing each cell.
pub fn dyadic_maximal_oracle(f: &ProductMeshFunction, g1: &DyadicGrid, g2: &DyadicGrid) -> Vec<f64> {
    let vals = f.values().as_slice();
    let mut out = vec![0.0f64; vals.len()];
    for i in g1.all_cubes() {
        for j in g2.all_cubes() {
            let cells = cells_of(g1, g2, &i, &j);
            let avg = cells.iter().map(|&c| vals[c]).sum::<f64>() / cells.len() as f64;
            for c in cells {
                out[c] = out[c].max(avg);
            }
        }
    }
    out
}

/// Maximal `F` with `F x J ⊆ set`: every strict ancestor fails.
pub fn maximal_family_oracle(g1: &DyadicGrid, g2: &DyadicGrid, set: &[bool], j: &Cube) -> Vec<Cube> {
    let top = g1.params().level_min;
    let mut out: Vec<Cube> = g1
        .all_cubes()
        .into_iter()
        .filter(|f| {
            rect_inside(g1, g2, set, f, j)
                && (1..=(f.level() - top) as u32).all(|k| !rect_inside(g1, g2, set, &g1.ancestor(f, k).unwrap(), j))
        })
        .collect();
    out.sort();
    out
}

/// `I_G`: the coarsest ancestor `A ⊇ I` with `A x G ⊆ set`.
pub fn partner_oracle(g1: &DyadicGrid, g2: &DyadicGrid, set: &[bool], i: &Cube, g: &Cube) -> Cube {
    let top = g1.params().level_min;
    let mut best = *i;
    for k in 0..=(i.level() - top) as u32 {
        let a = g1.ancestor(i, k).unwrap();
        if rect_inside(g1, g2, set, &a, g) {
            best = a;
        } else {
            break;
        }
    }
    best
}

/// `sup{k : I^(k) x J ⊆ set}` scanning every `k`.
pub fn emb1_oracle(g1: &DyadicGrid, g2: &DyadicGrid, set: &[bool], i: &Cube, j: &Cube) -> Option<u32> {
    let top = g1.params().level_min;
    (0..=(i.level() - top) as u32)
        .filter(|&k| rect_inside(g1, g2, set, &g1.ancestor(i, k).unwrap(), j))
        .max()
}

/// 2-maximal rectangles as sorted `(I, J, emb1)`.
pub fn two_maximal_oracle(g1: &DyadicGrid, g2: &DyadicGrid, omega: &[bool], tilde: &[bool]) -> Vec<(Cube, Cube, u32)> {
    let top2 = g2.params().level_min;
    let mut out = Vec::new();
    for i in g1.all_cubes() {
        for j in g2.all_cubes() {
            if !rect_inside(g1, g2, omega, &i, &j) {
                continue;
            }
            let maximal = (1..=(j.level() - top2) as u32).all(|k| !rect_inside(g1, g2, omega, &i, &g2.ancestor(&j, k).unwrap()));
            if maximal {
                let e = emb1_oracle(g1, g2, tilde, &i, &j).expect("Ω ⊆ Ω̃");
                out.push((i, j, e));
            }
        }
    }
    out.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    out
}
