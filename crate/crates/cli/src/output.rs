//! Time-series CSV, legacy VTK snapshots and JSON reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use chdg::dgspace::DgField;
use chdg::diagnostics::StepRecord;
use serde::Serialize;

pub const SERIES_HEADER: &str = "# t: time, m: mean of phi, E: discrete energy, phi_min/phi_max: extrema over limiter \
check points, cells/dofs: mesh size, nonlinear/linear: iteration counts, residual: final nonlinear residual, adapted: \
mesh changed before the step";

/// Per-step CSV, flushed after every row so partial runs stay readable.
pub struct SeriesWriter {
    inner: csv::Writer<BufWriter<File>>,
}

#[derive(Serialize)]
struct SeriesRow {
    step: usize,
    t: f64,
    m: f64,
    #[serde(rename = "E")]
    e: f64,
    phi_min: f64,
    phi_max: f64,
    cells: usize,
    dofs: usize,
    nonlinear: usize,
    linear: usize,
    residual: f64,
    adapted: bool,
}

impl SeriesWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(file, "{SERIES_HEADER}")?;
        Ok(Self {
            inner: csv::Writer::from_writer(file),
        })
    }

    pub fn push(&mut self, r: &StepRecord) -> Result<()> {
        self.inner.serialize(SeriesRow {
            step: r.step,
            t: r.time,
            m: r.mass,
            e: r.energy,
            phi_min: r.phi_min,
            phi_max: r.phi_max,
            cells: r.cells,
            dofs: r.dofs,
            nonlinear: r.nonlinear_iterations,
            linear: r.linear_iterations,
            residual: r.residual,
            adapted: r.adapted,
        })?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Legacy ASCII unstructured grid. Each cell is sampled on an equispaced
/// lattice of `max(p, 1) + 1` points per axis; points are not shared
/// between cells, so jumps stay visible.
pub fn write_vtk(path: &Path, phi: &DgField, upsilon: &DgField, time: f64) -> Result<()> {
    let space = phi.space();
    let mesh = space.mesh();
    let dim = space.dim();
    let mut points: Vec<[f64; 3]> = Vec::new();
    let mut phi_vals = Vec::new();
    let mut ups_vals = Vec::new();
    let mut cells: Vec<Vec<usize>> = Vec::new();
    let mut cell_order = Vec::new();
    let mut cell_level = Vec::new();
    for c in 0..space.num_cells() {
        let m = space.order(c).max(1) + 1;
        let base = points.len();
        let map = space.cell_map(c);
        let n_pts = m.pow(dim as u32);
        for idx in 0..n_pts {
            let mut r = [0.0; 3];
            let mut rest = idx;
            for rk in r.iter_mut().take(dim) {
                *rk = -1.0 + 2.0 * (rest % m) as f64 / (m - 1) as f64;
                rest /= m;
            }
            points.push(map.to_physical(&r, dim));
            phi_vals.push(phi.eval_reference(c, &r));
            ups_vals.push(upsilon.eval_reference(c, &r));
        }
        let at = |i: usize, j: usize, k: usize| base + i + m * (j + m * k);
        let s = m - 1;
        for k in 0..if dim == 3 { s } else { 1 } {
            for j in 0..s {
                for i in 0..s {
                    let mut conn = vec![at(i, j, k), at(i + 1, j, k), at(i + 1, j + 1, k), at(i, j + 1, k)];
                    if dim == 3 {
                        conn.extend([at(i, j, k + 1), at(i + 1, j, k + 1), at(i + 1, j + 1, k + 1), at(i, j + 1, k + 1)]);
                    }
                    cells.push(conn);
                    cell_order.push(space.order(c));
                    cell_level.push(mesh.cell(c).level);
                }
            }
        }
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "phase field at t = {time:e}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", points.len())?;
    for p in &points {
        writeln!(w, "{:e} {:e} {:e}", p[0], p[1], p[2])?;
    }
    let per = if dim == 3 { 8 } else { 4 };
    writeln!(w, "CELLS {} {}", cells.len(), cells.len() * (per + 1))?;
    for conn in &cells {
        write!(w, "{per}")?;
        for i in conn {
            write!(w, " {i}")?;
        }
        writeln!(w)?;
    }
    writeln!(w, "CELL_TYPES {}", cells.len())?;
    let kind = if dim == 3 { 12 } else { 9 };
    for _ in &cells {
        writeln!(w, "{kind}")?;
    }
    writeln!(w, "CELL_DATA {}", cells.len())?;
    writeln!(w, "SCALARS order int 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for o in &cell_order {
        writeln!(w, "{o}")?;
    }
    writeln!(w, "SCALARS level int 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for l in &cell_level {
        writeln!(w, "{l}")?;
    }
    writeln!(w, "POINT_DATA {}", points.len())?;
    for (name, vals) in [("phi", &phi_vals), ("upsilon", &ups_vals)] {
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in vals {
            writeln!(w, "{v:e}")?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chdg::dgspace::DgSpace;
    use chdg::mesh::{AdaptiveMesh, BoxDomain};

    #[test]
    fn vtk_counts_match_lattice() {
        let dir = tempfile::tempdir().unwrap();
        let space = DgSpace::from_mesh(AdaptiveMesh::build_uniform(BoxDomain::unit(2), 2, 2, 2).unwrap());
        let phi = DgField::l2_project(&space, |x| x[0]);
        let path = dir.path().join("f.vtk");
        write_vtk(&path, &phi, &phi, 0.0).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // 4 cells, 3 x 3 points and 2 x 2 quads each.
        assert!(text.contains("POINTS 36 double"));
        assert!(text.contains("CELLS 16 80"));
        assert!(text.contains("POINT_DATA 36"));
    }

    #[test]
    fn vtk_handles_3d_and_constants() {
        let dir = tempfile::tempdir().unwrap();
        let space = DgSpace::from_mesh(AdaptiveMesh::build_uniform(BoxDomain::unit(3), 1, 3, 0).unwrap());
        let phi = DgField::constant(&space, 0.5);
        let path = dir.path().join("f.vtk");
        write_vtk(&path, &phi, &phi, 1.0).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("POINTS 8 double"));
        assert!(text.contains("CELLS 1 9"));
        let vals: Vec<f64> = text
            .lines()
            .skip_while(|l| !l.starts_with("POINT_DATA"))
            .filter_map(|l| l.parse().ok())
            .collect();
        assert_eq!(vals.len(), 16);
        assert!(vals.iter().all(|v| (v - 0.5).abs() < 1e-14));
    }
}
