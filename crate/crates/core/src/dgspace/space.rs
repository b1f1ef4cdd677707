//! Broken polynomial spaces over an [`AdaptiveMesh`] with cached quadrature data.

use std::sync::Arc;

use crate::dgspace::basis::{num_modes, Tabulation};
use crate::dgspace::quadrature::{tensor_rule, GaussRule};
use crate::mesh::{AdaptiveMesh, Cell, Face, Point, MAX_DIM};

/// Volume quadrature and reference tabulation for one polynomial degree.
#[derive(Clone, Debug)]
pub struct VolumeRule {
    pub order: usize,
    /// Reference points in `[-1, 1]^d`.
    pub points: Vec<[f64; 3]>,
    /// Reference weights (sum `2^d`).
    pub weights: Vec<f64>,
    pub tab: Tabulation,
}

/// Affine map of a box cell to the reference cell, and the scalings that turn
/// reference-orthonormal modes into physically orthonormal ones.
#[derive(Clone, Copy, Debug)]
pub struct CellMap {
    pub center: Point,
    /// `2 / h_k`
    pub inv_half: Point,
    /// `prod h_k / 2`
    pub jacobian: f64,
    /// `prod sqrt(2 / h_k)`
    pub scale: f64,
}

impl CellMap {
    pub fn new(cell: &Cell, dim: usize) -> Self {
        let center = cell.bounds.center(dim);
        let mut inv_half = [0.0; MAX_DIM];
        let mut jacobian = 1.0;
        for k in 0..dim {
            let h = cell.size(k);
            inv_half[k] = 2.0 / h;
            jacobian *= h / 2.0;
        }
        Self {
            center,
            inv_half,
            jacobian,
            scale: 1.0 / jacobian.sqrt(),
        }
    }

    pub fn to_reference(&self, x: &Point, dim: usize) -> [f64; 3] {
        let mut r = [0.0; 3];
        for k in 0..dim {
            r[k] = (x[k] - self.center[k]) * self.inv_half[k];
        }
        r
    }

    pub fn to_physical(&self, r: &[f64; 3], dim: usize) -> Point {
        let mut x = [0.0; MAX_DIM];
        for k in 0..dim {
            x[k] = self.center[k] + r[k] / self.inv_half[k];
        }
        x
    }
}

/// Physical basis traces on one side of a face.
#[derive(Clone, Debug)]
pub struct FaceSide {
    pub cell: usize,
    pub n_modes: usize,
    /// `vals[q * n_modes + i]`
    pub vals: Vec<f64>,
    /// Derivative along the face normal, `dn[q * n_modes + i]`.
    pub dn: Vec<f64>,
}

/// Quadrature on a face with both sides' traces.
#[derive(Clone, Debug)]
pub struct FaceQuad {
    pub points: Vec<Point>,
    /// Physical weights (sum `|e|`).
    pub weights: Vec<f64>,
    pub minus: FaceSide,
    /// `None` on the boundary.
    pub plus: Option<FaceSide>,
}

/// A mesh together with a DOF numbering and cached quadrature tabulations.
#[derive(Debug)]
pub struct DgSpace {
    mesh: Arc<AdaptiveMesh>,
    offsets: Vec<usize>,
    maps: Vec<CellMap>,
    rules: Vec<VolumeRule>,
    faces: Vec<FaceQuad>,
}

impl DgSpace {
    pub fn new(mesh: Arc<AdaptiveMesh>) -> Arc<Self> {
        let dim = mesh.dim();
        let mut offsets = Vec::with_capacity(mesh.num_cells() + 1);
        offsets.push(0);
        for c in mesh.cells() {
            offsets.push(offsets.last().unwrap() + num_modes(c.order, dim));
        }
        let maps: Vec<CellMap> = mesh.cells().iter().map(|c| CellMap::new(c, dim)).collect();
        let p_max = mesh.cells().iter().map(|c| c.order).max().unwrap_or(0);
        let rules = (0..=p_max).map(|p| volume_rule(p, dim)).collect();
        let faces = mesh
            .faces()
            .iter()
            .map(|f| face_quad(&mesh, &maps, f))
            .collect();
        Arc::new(Self {
            mesh,
            offsets,
            maps,
            rules,
            faces,
        })
    }

    pub fn from_mesh(mesh: AdaptiveMesh) -> Arc<Self> {
        Self::new(Arc::new(mesh))
    }

    pub fn mesh(&self) -> &Arc<AdaptiveMesh> {
        &self.mesh
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn num_cells(&self) -> usize {
        self.mesh.num_cells()
    }

    pub fn ndofs(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn offset(&self, cell: usize) -> usize {
        self.offsets[cell]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn cell_dofs(&self, cell: usize) -> std::ops::Range<usize> {
        self.offsets[cell]..self.offsets[cell + 1]
    }

    pub fn order(&self, cell: usize) -> usize {
        self.mesh.cell(cell).order
    }

    pub fn cell_map(&self, cell: usize) -> &CellMap {
        &self.maps[cell]
    }

    pub fn rule(&self, order: usize) -> &VolumeRule {
        &self.rules[order]
    }

    pub fn cell_rule(&self, cell: usize) -> &VolumeRule {
        &self.rules[self.order(cell)]
    }

    pub fn face_quad(&self, face: usize) -> &FaceQuad {
        &self.faces[face]
    }

    pub fn face(&self, face: usize) -> &Face {
        &self.mesh.faces()[face]
    }

    /// Physical quadrature points of a cell's volume rule.
    pub fn volume_points(&self, cell: usize) -> Vec<Point> {
        let dim = self.dim();
        let map = &self.maps[cell];
        self.cell_rule(cell)
            .points
            .iter()
            .map(|r| map.to_physical(r, dim))
            .collect()
    }

    /// True if both spaces share the same mesh object.
    pub fn same_mesh(&self, other: &DgSpace) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh)
    }
}

pub fn volume_rule(p: usize, dim: usize) -> VolumeRule {
    let rule = GaussRule::new(GaussRule::volume_points(p));
    let (points, weights) = tensor_rule(&rule, dim);
    let tab = Tabulation::new(p, dim, &points);
    VolumeRule {
        order: p,
        points,
        weights,
        tab,
    }
}

/// Physical values and full gradients of all modes of `cell` at physical points.
pub fn tabulate_physical(
    cell: &Cell,
    map: &CellMap,
    dim: usize,
    points: &[Point],
) -> (usize, Vec<f64>, Vec<f64>) {
    let refs: Vec<[f64; 3]> = points.iter().map(|x| map.to_reference(x, dim)).collect();
    let tab = Tabulation::new(cell.order, dim, &refs);
    let n = tab.n_modes;
    let mut vals = tab.vals;
    let mut grads = tab.grads;
    for v in vals.iter_mut() {
        *v *= map.scale;
    }
    for (idx, g) in grads.iter_mut().enumerate() {
        *g *= map.scale * map.inv_half[idx % dim];
    }
    (n, vals, grads)
}

fn face_quad(mesh: &AdaptiveMesh, maps: &[CellMap], face: &Face) -> FaceQuad {
    let dim = mesh.dim();
    let (mi, pl) = face.sides();
    let p = mesh.cell(mi).order.max(mesh.cell(pl).order);
    let rule = GaussRule::new(GaussRule::volume_points(p));
    let (ref_pts, ref_w) = tensor_rule(&rule, dim - 1);
    let tangential: Vec<usize> = (0..dim).filter(|&k| k != face.axis).collect();
    let mut points = Vec::with_capacity(ref_pts.len());
    let mut weights = Vec::with_capacity(ref_pts.len());
    for (r, w) in ref_pts.iter().zip(&ref_w) {
        let mut x = [0.0; MAX_DIM];
        x[face.axis] = face.bounds.lower[face.axis];
        let mut jac = 1.0;
        for (j, &k) in tangential.iter().enumerate() {
            let lo = face.bounds.lower[k];
            let hi = face.bounds.upper[k];
            x[k] = 0.5 * (lo + hi) + 0.5 * (hi - lo) * r[j];
            jac *= 0.5 * (hi - lo);
        }
        points.push(x);
        weights.push(w * jac);
    }
    let side = |cell: usize| -> FaceSide {
        let c = mesh.cell(cell);
        let (n, vals, grads) = tabulate_physical(c, &maps[cell], dim, &points);
        let mut dn = vec![0.0; vals.len()];
        for q in 0..points.len() {
            for i in 0..n {
                dn[q * n + i] = (0..dim)
                    .map(|k| grads[(q * n + i) * dim + k] * face.normal[k])
                    .sum();
            }
        }
        FaceSide {
            cell,
            n_modes: n,
            vals,
            dn,
        }
    };
    FaceQuad {
        minus: side(mi),
        plus: face.plus_cell().map(side),
        points,
        weights,
    }
}
