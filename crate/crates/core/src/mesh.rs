//! Axis-aligned quadtree (2D) / octree (3D) meshes with hanging faces.
//!
//! Cells are leaves of a forest whose roots form an `N_1 x .. x N_d` grid over
//! the domain box. Every leaf is addressed by its refinement level and integer
//! index at that level, which makes neighbour queries a hash lookup. Faces are
//! rebuilt from scratch after every adaptation: a conforming contact produces
//! one face, a coarse/fine contact produces one face per fine sub-face.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};

/// Maximum supported spatial dimension.
pub const MAX_DIM: usize = 3;

pub type Point = [f64; MAX_DIM];

/// Axis-aligned box. Only the first `dim` coordinates are meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoxDomain {
    pub lower: Point,
    pub upper: Point,
}

impl BoxDomain {
    pub fn new(lower: &[f64], upper: &[f64]) -> Self {
        let mut lo = [0.0; MAX_DIM];
        let mut hi = [0.0; MAX_DIM];
        lo[..lower.len()].copy_from_slice(lower);
        hi[..upper.len()].copy_from_slice(upper);
        Self {
            lower: lo,
            upper: hi,
        }
    }

    /// `[0, 1]^d`.
    pub fn unit(dim: usize) -> Self {
        Self::new(&vec![0.0; dim], &vec![1.0; dim])
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn volume(&self, dim: usize) -> f64 {
        (0..dim).map(|k| self.extent(k)).product()
    }

    pub fn center(&self, dim: usize) -> Point {
        let mut c = [0.0; MAX_DIM];
        for k in 0..dim {
            c[k] = 0.5 * (self.lower[k] + self.upper[k]);
        }
        c
    }
}

/// Leaf cell of the forest.
#[derive(Clone, Debug, Serialize)]
pub struct Cell {
    pub level: u32,
    /// Integer index of the cell at its level, per axis.
    pub index: [u64; MAX_DIM],
    pub bounds: BoxDomain,
    /// Local polynomial degree `p_K`.
    pub order: usize,
}

impl Cell {
    pub fn volume(&self, dim: usize) -> f64 {
        self.bounds.volume(dim)
    }

    pub fn size(&self, axis: usize) -> f64 {
        self.bounds.extent(axis)
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            level: self.level,
            index: self.index,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub level: u32,
    pub index: [u64; MAX_DIM],
}

impl CellKey {
    fn parent(&self, dim: usize) -> Option<CellKey> {
        if self.level == 0 {
            return None;
        }
        let mut index = self.index;
        for v in index.iter_mut().take(dim) {
            *v /= 2;
        }
        Some(CellKey {
            level: self.level - 1,
            index,
        })
    }

    /// Position of this cell among its siblings (bit `k` = upper half in axis `k`).
    fn child_slot(&self, dim: usize) -> usize {
        (0..dim).map(|k| ((self.index[k] & 1) as usize) << k).sum()
    }

    fn child(&self, slot: usize, dim: usize) -> CellKey {
        let mut index = self.index;
        for (k, v) in index.iter_mut().enumerate().take(dim) {
            *v = 2 * *v + ((slot >> k) & 1) as u64;
        }
        CellKey {
            level: self.level + 1,
            index,
        }
    }
}

/// Cell on the far side of a face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Neighbor {
    Cell(usize),
    Boundary,
}

/// Interior or boundary face. Interior faces are oriented from the lower
/// (`minus`) side to the upper (`plus`) side along `axis`.
#[derive(Clone, Debug, Serialize)]
pub struct Face {
    pub minus: usize,
    pub plus: Neighbor,
    pub axis: usize,
    /// Unit normal pointing out of `minus` (into `plus` for interior faces).
    pub normal: Point,
    /// The face as a degenerate box (`lower[axis] == upper[axis]`).
    pub bounds: BoxDomain,
    pub area: f64,
    /// Intersection width `h_e`.
    pub width: f64,
}

impl Face {
    pub fn is_interior(&self) -> bool {
        matches!(self.plus, Neighbor::Cell(_))
    }

    pub fn plus_cell(&self) -> Option<usize> {
        match self.plus {
            Neighbor::Cell(c) => Some(c),
            Neighbor::Boundary => None,
        }
    }

    /// Cell ids on both sides; boundary faces repeat the minus cell.
    pub fn sides(&self) -> (usize, usize) {
        (self.minus, self.plus_cell().unwrap_or(self.minus))
    }
}

/// `h_e = 2|K-||K+| / (|e| (|K-| + |K+|))`.
pub fn face_width(volume_minus: f64, volume_plus: f64, face_area: f64) -> Result<f64> {
    if !(volume_minus > 0.0 && volume_plus > 0.0 && face_area > 0.0) {
        return Err(Error::InvalidInput(format!(
            "face_width needs positive measures, got |K-|={volume_minus}, |K+|={volume_plus}, |e|={face_area}"
        )));
    }
    Ok(2.0 * volume_minus * volume_plus / (face_area * (volume_minus + volume_plus)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum HMark {
    #[default]
    Keep,
    Refine,
    Coarsen,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum PMark {
    #[default]
    Keep,
    Raise,
    Lower,
}

/// Requested change for one cell. A cell may carry an `h` and a `p` request
/// at the same time; `keep` is the default for both.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct CellAction {
    pub h: HMark,
    pub p: PMark,
}

impl CellAction {
    pub const KEEP: Self = Self {
        h: HMark::Keep,
        p: PMark::Keep,
    };
    pub const REFINE_H: Self = Self {
        h: HMark::Refine,
        p: PMark::Keep,
    };
    pub const COARSEN_H: Self = Self {
        h: HMark::Coarsen,
        p: PMark::Keep,
    };
    pub const RAISE_P: Self = Self {
        h: HMark::Keep,
        p: PMark::Raise,
    };
    pub const LOWER_P: Self = Self {
        h: HMark::Keep,
        p: PMark::Lower,
    };
}

/// Bounds applied while adapting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptLimits {
    pub p_min: usize,
    pub p_max: usize,
    pub max_level: u32,
}

/// Where a cell of the adapted mesh came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum CellOrigin {
    Kept(usize),
    Refined { parent: usize, slot: usize },
    Coarsened { children: Vec<usize> },
}

/// Changes made by [`AdaptiveMesh::adapt`] beyond the literal marks.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AdaptLog {
    /// Old cells refined only to restore 2:1 balance.
    pub forced_refinements: Vec<usize>,
    /// Old cells whose coarsen mark was dropped.
    pub demoted_coarsenings: usize,
    /// Order changes clipped to `[p_min, p_max]`.
    pub clipped_order_changes: usize,
}

#[derive(Clone, Debug)]
pub struct Adapted {
    pub mesh: AdaptiveMesh,
    pub origin: Vec<CellOrigin>,
    pub log: AdaptLog,
}

#[derive(Clone, Debug)]
pub struct AdaptiveMesh {
    dim: usize,
    domain: BoxDomain,
    roots: [u64; MAX_DIM],
    cells: Vec<Cell>,
    faces: Vec<Face>,
    cell_faces: Vec<Vec<usize>>,
    lookup: HashMap<CellKey, usize>,
}

impl AdaptiveMesh {
    /// `n_per_axis^d` congruent cells of degree `order`.
    pub fn build_uniform(domain: BoxDomain, n_per_axis: usize, dim: usize, order: usize) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::InvalidInput(format!("dimension must be 2 or 3, got {dim}")));
        }
        if n_per_axis == 0 {
            return Err(Error::InvalidInput("n_per_axis must be at least 1".into()));
        }
        for k in 0..dim {
            let e = domain.extent(k);
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::InvalidInput(format!("degenerate domain extent {e} in axis {k}")));
            }
        }
        let mut roots = [1u64; MAX_DIM];
        for r in roots.iter_mut().take(dim) {
            *r = n_per_axis as u64;
        }
        let n_cells = n_per_axis.pow(dim as u32);
        let mut keys = Vec::with_capacity(n_cells);
        for flat in 0..n_cells {
            let mut index = [0u64; MAX_DIM];
            let mut rest = flat;
            for v in index.iter_mut().take(dim) {
                *v = (rest % n_per_axis) as u64;
                rest /= n_per_axis;
            }
            keys.push((CellKey { level: 0, index }, order));
        }
        Ok(Self::from_leaves(dim, domain, roots, keys))
    }

    fn from_leaves(dim: usize, domain: BoxDomain, roots: [u64; MAX_DIM], leaves: Vec<(CellKey, usize)>) -> Self {
        let cells: Vec<Cell> = leaves
            .into_iter()
            .map(|(key, order)| Cell {
                level: key.level,
                index: key.index,
                bounds: key_bounds(&domain, &roots, dim, &key),
                order,
            })
            .collect();
        let lookup = cells.iter().enumerate().map(|(i, c)| (c.key(), i)).collect();
        let mut mesh = Self {
            dim,
            domain,
            roots,
            cells,
            faces: Vec::new(),
            cell_faces: Vec::new(),
            lookup,
        };
        mesh.build_faces();
        mesh
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, id: usize) -> &Cell {
        &self.cells[id]
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Faces touching a cell (interior and boundary).
    pub fn cell_faces(&self, cell: usize) -> &[usize] {
        &self.cell_faces[cell]
    }

    pub fn interior_faces(&self) -> impl Iterator<Item = (usize, &Face)> {
        self.faces.iter().enumerate().filter(|(_, f)| f.is_interior())
    }

    /// Global mesh width `h = max_e h_e`.
    pub fn mesh_width(&self) -> f64 {
        self.faces.iter().map(|f| f.width).fold(0.0, f64::max)
    }

    pub fn total_volume(&self) -> f64 {
        self.cells.iter().map(|c| c.volume(self.dim)).sum()
    }

    pub fn max_level(&self) -> u32 {
        self.cells.iter().map(|c| c.level).max().unwrap_or(0)
    }

    /// Number of root cells per axis.
    pub fn roots(&self) -> [u64; MAX_DIM] {
        self.roots
    }

    /// True when every cell has the same level and order.
    pub fn is_uniform(&self) -> bool {
        let first = &self.cells[0];
        self.cells
            .iter()
            .all(|c| c.level == first.level && c.order == first.order)
    }

    /// Cell size a cell at `level` has along `axis`.
    pub fn level_size(&self, level: u32, axis: usize) -> f64 {
        self.domain.extent(axis) / (self.roots[axis] as f64 * (1u64 << level) as f64)
    }

    /// Returns the same geometry with new per-cell orders.
    pub fn with_orders(&self, orders: &[usize]) -> Self {
        let mut m = self.clone();
        for (c, &p) in m.cells.iter_mut().zip(orders) {
            c.order = p;
        }
        m
    }

    /// Leaf covering the region adjacent to `key` across its face in `axis`
    /// (`dir` = +1 or -1). Returns `Ok(None)` at the domain boundary and
    /// `Err(())` if that region is covered by finer cells.
    fn neighbor_leaf(&self, key: &CellKey, axis: usize, dir: i64) -> std::result::Result<Option<usize>, ()> {
        let n_at_level = self.roots[axis] << key.level;
        let target = key.index[axis] as i64 + dir;
        if target < 0 || target >= n_at_level as i64 {
            return Ok(None);
        }
        let mut probe = *key;
        probe.index[axis] = target as u64;
        loop {
            if let Some(&id) = self.lookup.get(&probe) {
                return Ok(Some(id));
            }
            match probe.parent(self.dim) {
                Some(p) => probe = p,
                None => return Err(()),
            }
        }
    }

    fn build_faces(&mut self) {
        let dim = self.dim;
        let mut faces = Vec::new();
        for (id, cell) in self.cells.iter().enumerate() {
            let key = cell.key();
            for axis in 0..dim {
                for dir in [-1i64, 1] {
                    match self.neighbor_leaf(&key, axis, dir) {
                        Ok(None) => {
                            faces.push(self.make_face(id, Neighbor::Boundary, axis, dir));
                        }
                        Ok(Some(nb)) => {
                            let other = &self.cells[nb];
                            // Same level: the lower cell creates the face.
                            // Coarser neighbour: the fine cell creates it.
                            if other.level == cell.level {
                                if dir == 1 {
                                    faces.push(self.make_face(id, Neighbor::Cell(nb), axis, dir));
                                }
                            } else if dir == 1 {
                                faces.push(self.make_face(id, Neighbor::Cell(nb), axis, dir));
                            } else {
                                faces.push(self.make_face(nb, Neighbor::Cell(id), axis, 1));
                            }
                        }
                        // Finer neighbours create the sub-faces themselves.
                        Err(()) => {}
                    }
                }
            }
        }
        let mut cell_faces = vec![Vec::new(); self.cells.len()];
        for (fid, f) in faces.iter().enumerate() {
            cell_faces[f.minus].push(fid);
            if let Some(p) = f.plus_cell() {
                cell_faces[p].push(fid);
            }
        }
        self.faces = faces;
        self.cell_faces = cell_faces;
    }

    /// Face of `minus` in direction `dir` along `axis`. The geometry is the
    /// finer of the two cells' faces.
    fn make_face(&self, minus: usize, plus: Neighbor, axis: usize, dir: i64) -> Face {
        let dim = self.dim;
        let cm = &self.cells[minus];
        let fine = match plus {
            Neighbor::Cell(p) if self.cells[p].level > cm.level => &self.cells[p],
            _ => cm,
        };
        let mut bounds = fine.bounds;
        let plane = if dir > 0 { cm.bounds.upper[axis] } else { cm.bounds.lower[axis] };
        bounds.lower[axis] = plane;
        bounds.upper[axis] = plane;
        let area: f64 = (0..dim).filter(|&k| k != axis).map(|k| bounds.extent(k)).product();
        let mut normal = [0.0; MAX_DIM];
        normal[axis] = dir as f64;
        let vm = cm.volume(dim);
        let vp = match plus {
            Neighbor::Cell(p) => self.cells[p].volume(dim),
            Neighbor::Boundary => vm,
        };
        let width = face_width(vm, vp, area).expect("cells have positive volume");
        Face {
            minus,
            plus,
            axis,
            normal,
            bounds,
            area,
            width,
        }
    }

    /// Face-adjacent cells of every cell (sorted, without the cell itself).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.cells.len()];
        for f in &self.faces {
            if let Some(p) = f.plus_cell() {
                adj[f.minus].push(p);
                adj[p].push(f.minus);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }

    /// Largest level difference across any interior face.
    pub fn max_level_jump(&self) -> u32 {
        self.faces
            .iter()
            .filter_map(|f| f.plus_cell().map(|p| self.cells[f.minus].level.abs_diff(self.cells[p].level)))
            .max()
            .unwrap_or(0)
    }

    /// Applies refinement, coarsening and order marks. Illegal coarsenings are
    /// dropped, and cells are refined further where needed to keep 2:1 balance.
    pub fn adapt(&self, marks: &[CellAction], limits: AdaptLimits) -> Result<Adapted> {
        if marks.len() != self.cells.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} marks, got {}",
                self.cells.len(),
                marks.len()
            )));
        }
        let dim = self.dim;
        let n_children = 1usize << dim;
        let mut log = AdaptLog::default();

        // Refinement with balance closure.
        let mut refine: Vec<bool> = marks
            .iter()
            .zip(&self.cells)
            .map(|(m, c)| m.h == HMark::Refine && c.level < limits.max_level)
            .collect();
        let mut stack: Vec<usize> = (0..self.cells.len()).filter(|&i| refine[i]).collect();
        while let Some(id) = stack.pop() {
            let key = self.cells[id].key();
            for axis in 0..dim {
                for dir in [-1i64, 1] {
                    if let Ok(Some(nb)) = self.neighbor_leaf(&key, axis, dir) {
                        if self.cells[nb].level < key.level && !refine[nb] {
                            refine[nb] = true;
                            log.forced_refinements.push(nb);
                            stack.push(nb);
                        }
                    }
                }
            }
        }
        log.forced_refinements.sort_unstable();

        // Coarsening: whole sibling families only, none of them refined, and
        // the parent must stay within one level of its post-refinement neighbours.
        let mut families: HashMap<CellKey, Vec<usize>> = HashMap::new();
        for (id, c) in self.cells.iter().enumerate() {
            if marks[id].h == HMark::Coarsen {
                if let Some(parent) = c.key().parent(dim) {
                    families.entry(parent).or_default().push(id);
                } else {
                    log.demoted_coarsenings += 1;
                }
            }
        }
        let mut coarsen_parent: HashMap<usize, CellKey> = HashMap::new();
        let mut family_keys: Vec<_> = families.keys().copied().collect();
        family_keys.sort_unstable();
        for parent in family_keys {
            let members = &families[&parent];
            let complete = members.len() == n_children && members.iter().all(|&m| !refine[m]);
            let balanced = complete
                && members.iter().all(|&m| {
                    let key = self.cells[m].key();
                    (0..dim).all(|axis| {
                        [-1i64, 1].iter().all(|&dir| match self.neighbor_leaf(&key, axis, dir) {
                            Ok(None) => true,
                            Ok(Some(nb)) => {
                                let lvl = self.cells[nb].level + u32::from(refine[nb]);
                                lvl <= key.level
                            }
                            Err(()) => false,
                        })
                    })
                });
            if balanced {
                for &m in members {
                    coarsen_parent.insert(m, parent);
                }
            } else {
                log.demoted_coarsenings += members.len();
            }
        }

        let clip = |p: usize, mark: PMark, log: &mut AdaptLog| -> usize {
            let want = match mark {
                PMark::Keep => p as i64,
                PMark::Raise => p as i64 + 1,
                PMark::Lower => p as i64 - 1,
            };
            let clipped = want.clamp(limits.p_min as i64, limits.p_max as i64) as usize;
            if mark != PMark::Keep && clipped as i64 != want {
                log.clipped_order_changes += 1;
            }
            clipped
        };

        let mut leaves = Vec::with_capacity(self.cells.len());
        let mut origin = Vec::with_capacity(self.cells.len());
        let mut emitted_parents: HashSet<CellKey> = HashSet::new();
        for (id, c) in self.cells.iter().enumerate() {
            if let Some(parent) = coarsen_parent.get(&id) {
                if !emitted_parents.insert(*parent) {
                    continue;
                }
                let mut children: Vec<usize> = families[parent].clone();
                children.sort_by_key(|&m| self.cells[m].key().child_slot(dim));
                let order = children.iter().map(|&m| self.cells[m].order).max().unwrap_or(0);
                let mark = if children.iter().all(|&m| marks[m].p == PMark::Lower) {
                    PMark::Lower
                } else if children.iter().any(|&m| marks[m].p == PMark::Raise) {
                    PMark::Raise
                } else {
                    PMark::Keep
                };
                leaves.push((*parent, clip(order, mark, &mut log)));
                origin.push(CellOrigin::Coarsened { children });
            } else if refine[id] {
                let order = clip(c.order, marks[id].p, &mut log);
                for slot in 0..n_children {
                    leaves.push((c.key().child(slot, dim), order));
                    origin.push(CellOrigin::Refined { parent: id, slot });
                }
            } else {
                leaves.push((c.key(), clip(c.order, marks[id].p, &mut log)));
                origin.push(CellOrigin::Kept(id));
            }
        }
        let mesh = Self::from_leaves(dim, self.domain, self.roots, leaves);
        Ok(Adapted { mesh, origin, log })
    }
}

fn key_bounds(domain: &BoxDomain, roots: &[u64; MAX_DIM], dim: usize, key: &CellKey) -> BoxDomain {
    let mut b = BoxDomain {
        lower: [0.0; MAX_DIM],
        upper: [0.0; MAX_DIM],
    };
    for k in 0..dim {
        let n = (roots[k] << key.level) as f64;
        let h = domain.extent(k) / n;
        b.lower[k] = domain.lower[k] + key.index[k] as f64 * h;
        b.upper[k] = if key.index[k] + 1 == roots[k] << key.level {
            domain.upper[k]
        } else {
            domain.lower[k] + (key.index[k] + 1) as f64 * h
        };
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square(n: usize) -> AdaptiveMesh {
        AdaptiveMesh::build_uniform(BoxDomain::unit(2), n, 2, 1).unwrap()
    }

    const LIMITS: AdaptLimits = AdaptLimits {
        p_min: 0,
        p_max: 2,
        max_level: 6,
    };

    fn closed_surface_defect(mesh: &AdaptiveMesh) -> f64 {
        let dim = mesh.dim();
        let mut acc = vec![[0.0; MAX_DIM]; mesh.num_cells()];
        for f in mesh.faces() {
            for k in 0..dim {
                acc[f.minus][k] += f.area * f.normal[k];
                if let Some(p) = f.plus_cell() {
                    acc[p][k] -= f.area * f.normal[k];
                }
            }
        }
        acc.iter().flat_map(|a| a.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn uniform_counts() {
        let m = unit_square(2);
        assert_eq!(m.num_cells(), 4);
        assert_eq!(m.faces().iter().filter(|f| f.is_interior()).count(), 4);
        assert_eq!(m.faces().iter().filter(|f| !f.is_interior()).count(), 8);
        let cube = AdaptiveMesh::build_uniform(BoxDomain::unit(3), 8, 3, 1).unwrap();
        assert_eq!(cube.num_cells(), 512);
    }

    #[test]
    fn uniform_widths_equal_cell_size() {
        let m = unit_square(32);
        for f in m.faces() {
            assert_eq!(f.width, 1.0 / 32.0);
        }
        assert_eq!(m.mesh_width(), 1.0 / 32.0);
    }

    #[test]
    fn face_width_formula() {
        let s: f64 = 0.37;
        assert!((face_width(s * s, s * s, s).unwrap() - s).abs() < 1e-15);
        assert!((face_width(1.0 / 16.0, 1.0 / 64.0, 1.0 / 8.0).unwrap() - 0.2).abs() < 1e-15);
        assert!((face_width(s.powi(3), s.powi(3), s * s).unwrap() - s).abs() < 1e-15);
        assert!(face_width(0.0, 1.0, 1.0).is_err());
        assert!(face_width(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(AdaptiveMesh::build_uniform(BoxDomain::unit(2), 0, 2, 1).is_err());
        let flat = BoxDomain::new(&[0.0, 0.0], &[1.0, 0.0]);
        assert!(AdaptiveMesh::build_uniform(flat, 4, 2, 1).is_err());
    }

    #[test]
    fn refine_one_cell_of_two_by_two() {
        let m = unit_square(2);
        let mut marks = vec![CellAction::KEEP; 4];
        marks[0] = CellAction::REFINE_H;
        let a = m.adapt(&marks, LIMITS).unwrap();
        assert_eq!(a.mesh.num_cells(), 7);
        // The two coarse neighbours of the refined cell see two sub-faces each.
        for coarse in [1usize, 2] {
            let new_id = a
                .origin
                .iter()
                .position(|o| *o == CellOrigin::Kept(coarse))
                .unwrap();
            let hanging = a
                .mesh
                .cell_faces(new_id)
                .iter()
                .filter(|&&f| {
                    let face = &a.mesh.faces()[f];
                    face.is_interior() && {
                        let (mi, pl) = face.sides();
                        a.mesh.cell(mi).level != a.mesh.cell(pl).level
                    }
                })
                .count();
            assert_eq!(hanging, 2);
        }
        let sub = a
            .mesh
            .faces()
            .iter()
            .find(|f| {
                let (mi, pl) = f.sides();
                f.is_interior() && a.mesh.cell(mi).level != a.mesh.cell(pl).level
            })
            .unwrap();
        // |K-| = 1/16, |K+| = 1/4 (or reversed), |e| = 1/4.
        let expect = 2.0 * (1.0 / 16.0) * 0.25 / (0.25 * (1.0 / 16.0 + 0.25));
        assert!((sub.width - expect).abs() < 1e-15);
        assert!(closed_surface_defect(&a.mesh) < 1e-12);
        assert!((a.mesh.total_volume() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn balance_restored_by_forced_refinement() {
        let m = unit_square(4);
        let marks = vec![CellAction::REFINE_H; 16];
        let fine = m.adapt(&marks, LIMITS).unwrap().mesh;
        // Refine one corner twice more; its neighbours must follow.
        let mut mesh = fine;
        for _ in 0..2 {
            let mut marks = vec![CellAction::KEEP; mesh.num_cells()];
            let corner = mesh
                .cells()
                .iter()
                .position(|c| c.index[0] == 0 && c.index[1] == 0 && c.level == mesh.max_level())
                .unwrap();
            marks[corner] = CellAction::REFINE_H;
            let a = mesh.adapt(&marks, LIMITS).unwrap();
            mesh = a.mesh;
            assert!(mesh.max_level_jump() <= 1);
        }
        assert!(closed_surface_defect(&mesh) < 1e-12);
        assert!((mesh.total_volume() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_neighbours_of_four_by_four() {
        let m = unit_square(4);
        let mut marks = vec![CellAction::KEEP; 16];
        marks[5] = CellAction::REFINE_H;
        marks[10] = CellAction::REFINE_H;
        let a = m.adapt(&marks, LIMITS).unwrap();
        assert!(a.mesh.max_level_jump() <= 1);
        assert_eq!(a.mesh.num_cells(), 16 + 6);
    }

    #[test]
    fn raise_p_keeps_geometry() {
        let m = unit_square(2);
        let mut marks = vec![CellAction::KEEP; 4];
        marks[3] = CellAction::RAISE_P;
        let a = m.adapt(&marks, LIMITS).unwrap();
        assert_eq!(a.mesh.cell(3).order, 2);
        assert_eq!(a.mesh.cell(3).bounds, m.cell(3).bounds);
        let mut marks = vec![CellAction::RAISE_P; 4];
        marks[0] = CellAction::KEEP;
        let b = a.mesh.adapt(&marks, LIMITS).unwrap();
        assert_eq!(b.mesh.cell(3).order, 2);
        assert_eq!(b.log.clipped_order_changes, 1);
    }

    #[test]
    fn coarsen_requires_whole_family() {
        let m = unit_square(2);
        let fine = m.adapt(&[CellAction::REFINE_H; 4], LIMITS).unwrap().mesh;
        assert_eq!(fine.num_cells(), 16);
        // Mark three of four siblings of the first family only.
        let family: Vec<usize> = (0..16).filter(|&i| matches!(fine.cell(i).index, [0 | 1, 0 | 1, _])).collect();
        let mut marks = vec![CellAction::KEEP; 16];
        for &i in &family[..3] {
            marks[i] = CellAction::COARSEN_H;
        }
        let a = fine.adapt(&marks, LIMITS).unwrap();
        assert_eq!(a.mesh.num_cells(), 16);
        assert_eq!(a.log.demoted_coarsenings, 3);
        marks[family[3]] = CellAction::COARSEN_H;
        let b = fine.adapt(&marks, LIMITS).unwrap();
        assert_eq!(b.mesh.num_cells(), 13);
        assert!(b.origin.iter().any(|o| matches!(o, CellOrigin::Coarsened { children } if children.len() == 4)));
    }

    #[test]
    fn coarsening_blocked_by_fine_neighbour() {
        let m = unit_square(2);
        let fine = m.adapt(&[CellAction::REFINE_H; 4], LIMITS).unwrap().mesh;
        // Refine a cell next to family 0, then try to coarsen family 0.
        let mut marks = vec![CellAction::KEEP; 16];
        let target = fine.cells().iter().position(|c| c.index[0] == 2 && c.index[1] == 0).unwrap();
        marks[target] = CellAction::REFINE_H;
        let finer = fine.adapt(&marks, LIMITS).unwrap().mesh;
        let mut marks = vec![CellAction::KEEP; finer.num_cells()];
        for (i, c) in finer.cells().iter().enumerate() {
            if c.level == 1 && c.index[0] < 2 && c.index[1] < 2 {
                marks[i] = CellAction::COARSEN_H;
            }
        }
        let a = finer.adapt(&marks, LIMITS).unwrap();
        assert_eq!(a.mesh.num_cells(), finer.num_cells());
        assert!(a.mesh.max_level_jump() <= 1);
    }

    #[test]
    fn three_d_hanging_faces_close() {
        let m = AdaptiveMesh::build_uniform(BoxDomain::unit(3), 2, 3, 1).unwrap();
        let mut marks = vec![CellAction::KEEP; 8];
        marks[0] = CellAction::REFINE_H;
        let a = m.adapt(&marks, LIMITS).unwrap();
        assert_eq!(a.mesh.num_cells(), 15);
        assert!(closed_surface_defect(&a.mesh) < 1e-12);
        assert!((a.mesh.total_volume() - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn random_adapt_cycles_keep_invariants(seed_marks in proptest::collection::vec(0u8..5, 64..256)) {
                let mut mesh = unit_square(4);
                let mut cursor = 0usize;
                for _ in 0..3 {
                    let marks: Vec<CellAction> = (0..mesh.num_cells())
                        .map(|_| {
                            let v = seed_marks[cursor % seed_marks.len()];
                            cursor += 1;
                            match v {
                                0 => CellAction::REFINE_H,
                                1 | 2 => CellAction::COARSEN_H,
                                3 => CellAction::RAISE_P,
                                _ => CellAction::LOWER_P,
                            }
                        })
                        .collect();
                    mesh = mesh.adapt(&marks, LIMITS).unwrap().mesh;
                    prop_assert!(mesh.max_level_jump() <= 1);
                    prop_assert!(((mesh.total_volume() - 1.0) / 1.0).abs() < 1e-12);
                    prop_assert!(closed_surface_defect(&mesh) < 1e-12);
                    prop_assert!(mesh.cells().iter().all(|c| c.order <= LIMITS.p_max));
                    for f in mesh.faces() {
                        let (mi, pl) = f.sides();
                        let d = mesh.dim();
                        let expect = face_width(mesh.cell(mi).volume(d), mesh.cell(pl).volume(d), f.area).unwrap();
                        prop_assert_eq!(f.width, expect);
                    }
                }
            }
        }
    }
}
