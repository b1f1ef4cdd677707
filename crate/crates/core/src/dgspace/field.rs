use std::sync::Arc;

use crate::dgspace::basis::{legendre_1d, mode_degrees, MAX_ORDER};
use crate::dgspace::space::{tabulate_physical, DgSpace};
use crate::error::{Error, Result};
use crate::mesh::{Point, MAX_DIM};

/// Piecewise polynomial scalar field: one coefficient vector per cell in the
/// physically orthonormal Legendre basis of that cell.
#[derive(Clone, Debug)]
pub struct DgField {
    space: Arc<DgSpace>,
    coeffs: Vec<f64>,
}

/// Traces of a field on both sides of a face at the face quadrature points.
#[derive(Clone, Debug, Default)]
pub struct FaceTraces {
    pub values_minus: Vec<f64>,
    pub values_plus: Vec<f64>,
    pub gradients_minus: Vec<Point>,
    pub gradients_plus: Vec<Point>,
}

impl FaceTraces {
    pub fn jumps(&self) -> Vec<f64> {
        self.values_minus
            .iter()
            .zip(&self.values_plus)
            .map(|(a, b)| jump(*a, *b))
            .collect()
    }

    pub fn averages(&self) -> Vec<f64> {
        self.values_minus
            .iter()
            .zip(&self.values_plus)
            .map(|(a, b)| average(*a, *b))
            .collect()
    }

    pub fn harmonic_averages(&self) -> Vec<f64> {
        self.values_minus
            .iter()
            .zip(&self.values_plus)
            .map(|(a, b)| harmonic_average(*a, *b))
            .collect()
    }
}

/// `[[v]] = v- - v+`
#[inline]
pub fn jump(minus: f64, plus: f64) -> f64 {
    minus - plus
}

/// `{v} = (v- + v+) / 2`
#[inline]
pub fn average(minus: f64, plus: f64) -> f64 {
    0.5 * (minus + plus)
}

/// `{v}_H = 2 v- v+ / (v- + v+)`, zero when both sides vanish.
#[inline]
pub fn harmonic_average(minus: f64, plus: f64) -> f64 {
    let s = minus + plus;
    if s == 0.0 {
        0.0
    } else {
        2.0 * minus * plus / s
    }
}

impl DgField {
    pub fn zeros(space: &Arc<DgSpace>) -> Self {
        Self {
            space: space.clone(),
            coeffs: vec![0.0; space.ndofs()],
        }
    }

    pub fn from_coeffs(space: &Arc<DgSpace>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.ndofs() {
            return Err(Error::InvalidInput(format!(
                "coefficient vector has length {}, space has {} dofs",
                coeffs.len(),
                space.ndofs()
            )));
        }
        Ok(Self {
            space: space.clone(),
            coeffs,
        })
    }

    /// Constant field.
    pub fn constant(space: &Arc<DgSpace>, value: f64) -> Self {
        let mut f = Self::zeros(space);
        for c in 0..space.num_cells() {
            let vol = space.mesh().cell(c).volume(space.dim());
            f.coeffs[space.offset(c)] = value * vol.sqrt();
        }
        f
    }

    /// L2 projection of `f` evaluated at volume quadrature points.
    pub fn l2_project(space: &Arc<DgSpace>, f: impl Fn(&Point) -> f64) -> Self {
        let mut out = Self::zeros(space);
        let dim = space.dim();
        for c in 0..space.num_cells() {
            let rule = space.cell_rule(c);
            let map = space.cell_map(c);
            let n = rule.tab.n_modes;
            let off = space.offset(c);
            for (q, r) in rule.points.iter().enumerate() {
                let x = map.to_physical(r, dim);
                let wf = rule.weights[q] * map.jacobian * map.scale * f(&x);
                for i in 0..n {
                    out.coeffs[off + i] += wf * rule.tab.val(q, i);
                }
            }
        }
        out
    }

    pub fn space(&self) -> &Arc<DgSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn cell_coeffs(&self, cell: usize) -> &[f64] {
        &self.coeffs[self.space.cell_dofs(cell)]
    }

    pub fn cell_coeffs_mut(&mut self, cell: usize) -> &mut [f64] {
        let r = self.space.cell_dofs(cell);
        &mut self.coeffs[r]
    }

    /// Mean value over a cell.
    pub fn cell_mean(&self, cell: usize) -> f64 {
        let vol = self.space.mesh().cell(cell).volume(self.space.dim());
        self.coeffs[self.space.offset(cell)] / vol.sqrt()
    }

    /// Values at the volume quadrature points of `cell`.
    pub fn volume_values(&self, cell: usize) -> Vec<f64> {
        let rule = self.space.cell_rule(cell);
        let scale = self.space.cell_map(cell).scale;
        let c = self.cell_coeffs(cell);
        let n = rule.tab.n_modes;
        (0..rule.points.len())
            .map(|q| scale * (0..n).map(|i| c[i] * rule.tab.val(q, i)).sum::<f64>())
            .collect()
    }

    /// Gradients at the volume quadrature points of `cell`.
    pub fn volume_gradients(&self, cell: usize) -> Vec<Point> {
        let dim = self.space.dim();
        let rule = self.space.cell_rule(cell);
        let map = self.space.cell_map(cell);
        let c = self.cell_coeffs(cell);
        let n = rule.tab.n_modes;
        (0..rule.points.len())
            .map(|q| {
                let mut g = [0.0; MAX_DIM];
                for (k, gk) in g.iter_mut().enumerate().take(dim) {
                    *gk = map.scale * map.inv_half[k] * (0..n).map(|i| c[i] * rule.tab.grad(q, i, k)).sum::<f64>();
                }
                g
            })
            .collect()
    }

    /// Value at a reference point of `cell`.
    pub fn eval_reference(&self, cell: usize, r: &[f64; 3]) -> f64 {
        let dim = self.space.dim();
        let p = self.space.order(cell);
        let map = self.space.cell_map(cell);
        let mut v1 = [[0.0; MAX_ORDER]; 3];
        let mut scratch = [0.0; MAX_ORDER];
        for k in 0..dim {
            legendre_1d(p, r[k], &mut v1[k], &mut scratch);
        }
        let c = self.cell_coeffs(cell);
        let mut s = 0.0;
        for (i, ci) in c.iter().enumerate() {
            let a = mode_degrees(i, p, dim);
            let mut v = *ci;
            for k in 0..dim {
                v *= v1[k][a[k]];
            }
            s += v;
        }
        s * map.scale
    }

    /// Value at a physical point inside `cell`.
    pub fn eval(&self, cell: usize, x: &Point) -> f64 {
        let r = self.space.cell_map(cell).to_reference(x, self.space.dim());
        self.eval_reference(cell, &r)
    }

    /// Value and gradient at physical points inside `cell`.
    pub fn eval_with_gradient(&self, cell: usize, points: &[Point]) -> (Vec<f64>, Vec<Point>) {
        let dim = self.space.dim();
        let c = self.space.mesh().cell(cell);
        let (n, vals, grads) = tabulate_physical(c, self.space.cell_map(cell), dim, points);
        let coeffs = self.cell_coeffs(cell);
        let mut v = vec![0.0; points.len()];
        let mut g = vec![[0.0; MAX_DIM]; points.len()];
        for q in 0..points.len() {
            for i in 0..n {
                v[q] += coeffs[i] * vals[q * n + i];
                for k in 0..dim {
                    g[q][k] += coeffs[i] * grads[(q * n + i) * dim + k];
                }
            }
        }
        (v, g)
    }

    /// Traces from both sides at the face quadrature points. On boundary
    /// faces the plus side repeats the minus side.
    pub fn face_traces(&self, face: usize) -> FaceTraces {
        let fq = self.space.face_quad(face);
        let (vm, gm) = self.eval_with_gradient(fq.minus.cell, &fq.points);
        let (vp, gp) = match &fq.plus {
            Some(side) => self.eval_with_gradient(side.cell, &fq.points),
            None => (vm.clone(), gm.clone()),
        };
        FaceTraces {
            values_minus: vm,
            values_plus: vp,
            gradients_minus: gm,
            gradients_plus: gp,
        }
    }

    /// Axpy on coefficients: `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &DgField) -> Result<()> {
        if !self.space.same_mesh(&other.space) || self.coeffs.len() != other.coeffs.len() {
            return Err(Error::MeshMismatch);
        }
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Integral over the mesh.
    pub fn integral(&self) -> f64 {
        (0..self.space.num_cells())
            .map(|c| self.cell_mean(c) * self.space.mesh().cell(c).volume(self.space.dim()))
            .sum()
    }

    /// `(self, other)_{L2}`; both fields must live on the same space.
    pub fn inner(&self, other: &DgField) -> Result<f64> {
        if !self.space.same_mesh(&other.space) || self.coeffs.len() != other.coeffs.len() {
            return Err(Error::MeshMismatch);
        }
        Ok(self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{AdaptLimits, AdaptiveMesh, BoxDomain, CellAction};

    fn space(n: usize, p: usize) -> Arc<DgSpace> {
        DgSpace::from_mesh(AdaptiveMesh::build_uniform(BoxDomain::unit(2), n, 2, p).unwrap())
    }

    #[test]
    fn projecting_one_gives_unit_means() {
        let s = space(3, 2);
        let f = DgField::l2_project(&s, |_| 1.0);
        for c in 0..s.num_cells() {
            assert!((f.cell_mean(c) - 1.0).abs() < 1e-14);
        }
        let g = DgField::constant(&s, 1.0);
        for (a, b) in f.coeffs().iter().zip(g.coeffs()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_function_reproduced_at_quadrature_points() {
        let s = space(4, 1);
        let f = DgField::l2_project(&s, |x| x[0]);
        for c in 0..s.num_cells() {
            let vals = f.volume_values(c);
            for (v, x) in vals.iter().zip(s.volume_points(c)) {
                assert!((v - x[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_has_zero_jumps_on_hanging_faces() {
        let mesh = AdaptiveMesh::build_uniform(BoxDomain::unit(2), 2, 2, 2).unwrap();
        let mut marks = vec![CellAction::KEEP; 4];
        marks[1] = CellAction::REFINE_H;
        marks[2] = CellAction::RAISE_P;
        let limits = AdaptLimits {
            p_min: 0,
            p_max: 3,
            max_level: 2,
        };
        let s = DgSpace::from_mesh(mesh.adapt(&marks, limits).unwrap().mesh);
        let f = DgField::constant(&s, 0.7);
        for fid in 0..s.mesh().faces().len() {
            let t = f.face_traces(fid);
            for j in t.jumps() {
                assert!(j.abs() < 1e-14);
            }
            for a in t.averages().into_iter().chain(t.harmonic_averages()) {
                assert!((a - 0.7).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn averages_of_scalars() {
        assert!((harmonic_average(1.0, 1.0 / 3.0) - 0.5).abs() < 1e-15);
        assert_eq!(harmonic_average(1.0, 0.0), 0.0);
        assert_eq!(harmonic_average(0.0, 0.0), 0.0);
        assert_eq!(average(1.0, 0.0), 0.5);
        assert_eq!(jump(1.0, 0.25), 0.75);
    }

    #[test]
    fn eval_matches_volume_values() {
        let s = space(2, 2);
        let f = DgField::l2_project(&s, |x| (3.0 * x[0]).sin() * x[1]);
        for c in 0..s.num_cells() {
            let vals = f.volume_values(c);
            for (v, x) in vals.iter().zip(s.volume_points(c)) {
                assert!((v - f.eval(c, &x)).abs() < 1e-13);
            }
        }
    }
}
