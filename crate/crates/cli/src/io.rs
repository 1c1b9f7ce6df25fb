//! File formats.
//!
//! * Mesh functions: CSV `cell,value` or flat little-endian `f64` binary,
//!   cells in row-major order of the mesh index lattice. For product
//!   functions the flat cell is `c1 * N2 + c2`.
//! * Ω: CSV `i_level,i_index,j_level,j_index`; multi-dimensional indices are
//!   written as `a:b:c`.
//! * Shadows: CSV `cell1,cell2,omega,tilde,hat` with 0/1 entries.
//! * Tabulated kernel profiles: CSV `rho,value`, `rho` starting at 0 and
//!   strictly increasing.

use std::path::Path;

use biparam_core::dyadic::{Cube, DyadicGrid};
use biparam_core::haar::{Mesh, ProductMeshFunction};
use biparam_core::journe::{OpenSetOmega, Rectangle, ShadowSets};
use biparam_core::linalg::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Serialize, Deserialize)]
struct CellValue {
    cell: usize,
    value: f64,
}

pub fn mesh_values_to_csv(values: &[f64]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (cell, &value) in values.iter().enumerate() {
        w.serialize(CellValue { cell, value }).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn mesh_values_to_binary(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn mesh_values_from_csv(bytes: &[u8], len: usize) -> Result<Vec<f64>, String> {
    let mut out = vec![None; len];
    for row in csv::Reader::from_reader(bytes).deserialize::<CellValue>() {
        let row = row.map_err(|e| e.to_string())?;
        let slot = out.get_mut(row.cell).ok_or_else(|| format!("cell {} outside mesh of {len} cells", row.cell))?;
        if slot.replace(row.value).is_some() {
            return Err(format!("cell {} listed twice", row.cell));
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(c, v)| v.ok_or_else(|| format!("cell {c} missing")))
        .collect()
}

pub fn mesh_values_from_binary(bytes: &[u8], len: usize) -> Result<Vec<f64>, String> {
    if bytes.len() != 8 * len {
        return Err(format!("expected {} bytes for {len} cells, found {}", 8 * len, bytes.len()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Reads a product mesh function; `.bin` files are binary, anything else CSV.
pub fn read_product_function(path: &Path, m1: Mesh, m2: Mesh) -> Result<ProductMeshFunction, CliError> {
    let bytes = std::fs::read(path).map_err(|e| input_err(path, e))?;
    let len = m1.cell_count() * m2.cell_count();
    let values = if path.extension().is_some_and(|e| e == "bin") {
        mesh_values_from_binary(&bytes, len)
    } else {
        mesh_values_from_csv(&bytes, len)
    }
    .map_err(|e| input_err(path, e))?;
    Ok(ProductMeshFunction::from_matrix(m1, m2, Matrix::from_vec(m1.cell_count(), m2.cell_count(), values))?)
}

#[derive(Serialize, Deserialize)]
struct RectangleRow {
    i_level: i32,
    i_index: String,
    j_level: i32,
    j_index: String,
}

fn index_string(c: &Cube) -> String {
    c.index().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(":")
}

fn parse_index(s: &str) -> Result<Vec<i64>, String> {
    s.split(':').map(|v| v.trim().parse::<i64>().map_err(|e| format!("bad index {s:?}: {e}"))).collect()
}

pub fn omega_to_csv(omega: &OpenSetOmega) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, j) in omega.rectangles() {
        w.serialize(RectangleRow {
            i_level: i.level(),
            i_index: index_string(i),
            j_level: j.level(),
            j_index: index_string(j),
        })
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn omega_from_csv(bytes: &[u8], g1: &DyadicGrid, g2: &DyadicGrid) -> Result<OpenSetOmega, String> {
    let mut rects: Vec<Rectangle> = Vec::new();
    for row in csv::Reader::from_reader(bytes).deserialize::<RectangleRow>() {
        let row = row.map_err(|e| e.to_string())?;
        let i = g1.cube(row.i_level, &parse_index(&row.i_index)?).map_err(|e| e.to_string())?;
        let j = g2.cube(row.j_level, &parse_index(&row.j_index)?).map_err(|e| e.to_string())?;
        rects.push((i, j));
    }
    OpenSetOmega::new(g1, g2, rects).map_err(|e| e.to_string())
}

pub fn read_omega(path: &Path, g1: &DyadicGrid, g2: &DyadicGrid) -> Result<OpenSetOmega, CliError> {
    let bytes = std::fs::read(path).map_err(|e| input_err(path, e))?;
    omega_from_csv(&bytes, g1, g2).map_err(|e| input_err(path, e))
}

pub fn shadows_to_csv(s: &ShadowSets, cells2: usize) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cell1", "cell2", "omega", "tilde", "hat"]).expect("in-memory write");
    for k in 0..s.omega.len() {
        let b = |v: bool| if v { "1" } else { "0" };
        w.write_record([
            (k / cells2).to_string().as_str(),
            (k % cells2).to_string().as_str(),
            b(s.omega[k]),
            b(s.omega_tilde[k]),
            b(s.omega_hat[k]),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

#[derive(Deserialize)]
struct ProfileRow {
    rho: f64,
    value: f64,
}

pub fn profile_from_csv(bytes: &[u8]) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut rho = Vec::new();
    let mut values = Vec::new();
    for row in csv::Reader::from_reader(bytes).deserialize::<ProfileRow>() {
        let row = row.map_err(|e| e.to_string())?;
        rho.push(row.rho);
        values.push(row.value);
    }
    Ok((rho, values))
}

pub fn read_profile_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let bytes = std::fs::read(path).map_err(|e| input_err(path, e))?;
    profile_from_csv(&bytes).map_err(|e| input_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use biparam_core::dyadic::GridParams;
    use biparam_core::rng::stream;

    #[test]
    fn mesh_round_trips() {
        let v = vec![0.5, -1.25, 3.0e-17, 7.0];
        assert_eq!(mesh_values_from_csv(&mesh_values_to_csv(&v), 4).unwrap(), v);
        assert_eq!(mesh_values_from_binary(&mesh_values_to_binary(&v), 4).unwrap(), v);
        assert!(mesh_values_from_binary(&mesh_values_to_binary(&v), 5).is_err());
        assert!(mesh_values_from_csv(b"cell,value\n0,1\n", 2).unwrap_err().contains("missing"));
        assert!(mesh_values_from_csv(b"cell,value\n0,1\n0,2\n", 1).unwrap_err().contains("twice"));
    }

    #[test]
    fn omega_round_trips() {
        let p = GridParams::new(1, 1.0, 3, 0, 4).unwrap();
        let (g1, g2) = (DyadicGrid::random(p, 3).unwrap(), DyadicGrid::random(p, 4).unwrap());
        let omega = OpenSetOmega::random_union(&g1, &g2, 4, &mut stream(1, 0)).unwrap();
        let back = omega_from_csv(&omega_to_csv(&omega), &g1, &g2).unwrap();
        assert_eq!(back.indicator(), omega.indicator());
        assert_eq!(back.rectangles(), omega.rectangles());
    }

    #[test]
    fn profile_parses() {
        let (r, v) = profile_from_csv(b"rho,value\n0,1\n1,0.5\n").unwrap();
        assert_eq!(r, vec![0.0, 1.0]);
        assert_eq!(v, vec![1.0, 0.5]);
    }
}
