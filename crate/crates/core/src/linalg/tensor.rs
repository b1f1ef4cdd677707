//! Fast diagonalization of separable operators on uniform tensor meshes.
//!
//! If `A = sum_k I x .. x A_k x .. x I` with symmetric one-dimensional `A_k`,
//! then any polynomial `g(A)` is diagonal in the tensor eigenbasis of the
//! `A_k`, so `g(A)^{-1}` costs a handful of dense one-dimensional transforms.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::linalg::iterative::Preconditioner;

pub struct TensorDiagonalizer {
    dim: usize,
    sizes: [usize; 3],
    bases: Vec<DMatrix<f64>>,
    eigenvalues: Vec<Vec<f64>>,
    /// Global dof -> position in the axis-0-fastest tensor layout.
    perm: Vec<usize>,
    inv_weights: Vec<f64>,
}

impl TensorDiagonalizer {
    /// `axis_ops[k]` is the one-dimensional operator along axis `k`;
    /// `perm[dof]` the tensor position of each global dof.
    pub fn new(axis_ops: &[DMatrix<f64>], perm: Vec<usize>) -> Self {
        let dim = axis_ops.len();
        let mut sizes = [1; 3];
        let mut bases = Vec::with_capacity(dim);
        let mut eigenvalues = Vec::with_capacity(dim);
        for (k, op) in axis_ops.iter().enumerate() {
            sizes[k] = op.nrows();
            let sym = (op + op.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            eigenvalues.push(eig.eigenvalues.iter().copied().collect());
            bases.push(eig.eigenvectors);
        }
        let total: usize = sizes.iter().product();
        assert_eq!(perm.len(), total, "permutation must cover the tensor space");
        Self {
            dim,
            sizes,
            bases,
            eigenvalues,
            perm,
            inv_weights: vec![1.0; total],
        }
    }

    /// Sets the spectral multiplier: the preconditioner becomes `g(A)^{-1}`.
    pub fn set_symbol(&mut self, g: impl Fn(f64) -> f64) {
        let [n0, n1, n2] = self.sizes;
        for j2 in 0..n2 {
            for j1 in 0..n1 {
                for j0 in 0..n0 {
                    let mut mu = self.eigenvalues[0][j0];
                    if self.dim > 1 {
                        mu += self.eigenvalues[1][j1];
                    }
                    if self.dim > 2 {
                        mu += self.eigenvalues[2][j2];
                    }
                    self.inv_weights[j0 + n0 * (j1 + n1 * j2)] = 1.0 / g(mu);
                }
            }
        }
    }

    /// Eigenvalues of the full separable operator, unsorted.
    pub fn spectrum(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let [n0, n1, n2] = self.sizes;
        for j2 in 0..n2 {
            for j1 in 0..n1 {
                for j0 in 0..n0 {
                    let mut mu = self.eigenvalues[0][j0];
                    if self.dim > 1 {
                        mu += self.eigenvalues[1][j1];
                    }
                    if self.dim > 2 {
                        mu += self.eigenvalues[2][j2];
                    }
                    out.push(mu);
                }
            }
        }
        out
    }

    fn transform(&self, data: Vec<f64>, transpose: bool) -> Vec<f64> {
        let [n0, n1, n2] = self.sizes;
        let pick = |k: usize| -> DMatrix<f64> {
            if transpose {
                self.bases[k].transpose()
            } else {
                self.bases[k].clone()
            }
        };
        // Axis 0: left-multiply the n0 x (n1 n2) view.
        let m = DMatrix::from_vec(n0, n1 * n2, data);
        let mut data = (pick(0) * m).data.as_vec().clone();
        if self.dim > 1 {
            // Axis 1: right-multiply each n0 x n1 slice by the transpose.
            let q1t = pick(1).transpose();
            let mut out = vec![0.0; data.len()];
            for j2 in 0..n2 {
                let s = j2 * n0 * n1;
                let slice = DMatrix::from_column_slice(n0, n1, &data[s..s + n0 * n1]);
                let r = slice * &q1t;
                out[s..s + n0 * n1].copy_from_slice(r.as_slice());
            }
            data = out;
        }
        if self.dim > 2 {
            let m = DMatrix::from_vec(n0 * n1, n2, data);
            data = (m * pick(2).transpose()).data.as_vec().clone();
        }
        data
    }
}

impl Preconditioner for TensorDiagonalizer {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let mut t = vec![0.0; r.len()];
        for (dof, &pos) in self.perm.iter().enumerate() {
            t[pos] = r[dof];
        }
        // Coefficients in the eigenbasis: Q^T r along every axis.
        let mut c = self.transform(t, true);
        for (v, w) in c.iter_mut().zip(&self.inv_weights) {
            *v *= w;
        }
        let back = self.transform(c, false);
        for (dof, &pos) in self.perm.iter().enumerate() {
            z[dof] = back[pos];
        }
    }
}
