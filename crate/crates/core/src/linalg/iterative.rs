//! Krylov solvers and the ILU(0) preconditioner.

use crate::error::{Error, Result};
use crate::linalg::dense::{dot, norm2};
use crate::linalg::sparse::BlockCsr;

/// Something that can compute `y = A x`.
pub trait LinearOperator {
    fn size(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// Approximate inverse `z = P^{-1} r`.
pub trait Preconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

impl LinearOperator for BlockCsr {
    fn size(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y);
    }
}

pub struct Identity;

impl Preconditioner for Identity {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

/// Outcome of an iterative solve.
#[derive(Clone, Copy, Debug)]
pub struct KrylovStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Incomplete LU factorization with the sparsity of `A`.
pub struct Ilu0 {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    diag: Vec<usize>,
    values: Vec<f64>,
}

impl Ilu0 {
    pub fn new(a: &BlockCsr) -> Result<Self> {
        let n = a.nrows();
        let row_ptr = a.row_ptr().to_vec();
        let col_idx = a.col_idx().to_vec();
        let mut values = a.values().to_vec();
        let mut diag = vec![0; n];
        for i in 0..n {
            let r = row_ptr[i]..row_ptr[i + 1];
            diag[i] = r.start
                + col_idx[r.clone()]
                    .binary_search(&i)
                    .map_err(|_| Error::LinearSolveFailure(format!("row {i} has no diagonal entry")))?;
        }
        let mut where_in_row = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (row_ptr[i], row_ptr[i + 1]);
            for k in start..end {
                where_in_row[col_idx[k]] = k;
            }
            for k in start..end {
                let j = col_idx[k];
                if j >= i {
                    break;
                }
                let piv = values[diag[j]];
                if piv == 0.0 {
                    return Err(Error::LinearSolveFailure(format!("zero pivot in ILU(0) at row {j}")));
                }
                let f = values[k] / piv;
                values[k] = f;
                for kk in diag[j] + 1..row_ptr[j + 1] {
                    let w = where_in_row[col_idx[kk]];
                    if w != usize::MAX {
                        values[w] -= f * values[kk];
                    }
                }
            }
            for k in start..end {
                where_in_row[col_idx[k]] = usize::MAX;
            }
        }
        Ok(Self {
            row_ptr,
            col_idx,
            diag,
            values,
        })
    }
}

impl Preconditioner for Ilu0 {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = r.len();
        for i in 0..n {
            let mut s = r[i];
            for k in self.row_ptr[i]..self.diag[i] {
                s -= self.values[k] * z[self.col_idx[k]];
            }
            z[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in self.diag[i] + 1..self.row_ptr[i + 1] {
                s -= self.values[k] * z[self.col_idx[k]];
            }
            z[i] = s / self.values[self.diag[i]];
        }
    }
}

/// Right-preconditioned BiCGStab. `x` holds the initial guess.
pub fn bicgstab(
    a: &dyn LinearOperator,
    pc: &dyn Preconditioner,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<KrylovStats> {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(KrylovStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    a.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let r0 = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut rel = norm2(&r) / bnorm;
    for it in 0..max_iter {
        if rel <= rel_tol {
            return Ok(KrylovStats {
                iterations: it,
                relative_residual: rel,
            });
        }
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || omega == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        pc.apply(&p, &mut phat);
        a.apply(&phat, &mut v);
        let denom = dot(&r0, &v);
        if denom == 0.0 {
            break;
        }
        alpha = rho / denom;
        for i in 0..n {
            r[i] -= alpha * v[i];
            x[i] += alpha * phat[i];
        }
        rel = norm2(&r) / bnorm;
        if rel <= rel_tol {
            return Ok(KrylovStats {
                iterations: it + 1,
                relative_residual: rel,
            });
        }
        pc.apply(&r, &mut shat);
        a.apply(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt == 0.0 { 0.0 } else { dot(&t, &r) / tt };
        for i in 0..n {
            x[i] += omega * shat[i];
            r[i] -= omega * t[i];
        }
        rel = norm2(&r) / bnorm;
    }
    if rel <= rel_tol {
        return Ok(KrylovStats {
            iterations: max_iter,
            relative_residual: rel,
        });
    }
    Err(Error::LinearSolveFailure(format!(
        "BiCGStab reached relative residual {rel:.3e} (target {rel_tol:.1e})"
    )))
}

/// Restarted right-preconditioned GMRES. `x` holds the initial guess.
pub fn gmres(
    a: &dyn LinearOperator,
    pc: &dyn Preconditioner,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<KrylovStats> {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(KrylovStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let m = restart.max(1);
    let mut total = 0;
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    loop {
        a.apply(x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let beta = norm2(&r);
        let mut rel = beta / bnorm;
        if rel <= rel_tol || total >= max_iter {
            if rel <= rel_tol {
                return Ok(KrylovStats {
                    iterations: total,
                    relative_residual: rel,
                });
            }
            return Err(Error::LinearSolveFailure(format!(
                "GMRES reached relative residual {rel:.3e} (target {rel_tol:.1e})"
            )));
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            pc.apply(&basis[k], &mut z);
            a.apply(&z, &mut w);
            for j in 0..=k {
                let hjk = dot(&w, &basis[j]);
                h[j][k] = hjk;
                for i in 0..n {
                    w[i] -= hjk * basis[j][i];
                }
            }
            let hn = norm2(&w);
            h[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom == 0.0 {
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            total += 1;
            rel = g[k + 1].abs() / bnorm;
            if rel <= rel_tol || total >= max_iter || hn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        let mut comb = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                comb[i] += yj * basis[j][i];
            }
        }
        pc.apply(&comb, &mut z);
        for i in 0..n {
            x[i] += z[i];
        }
        if k_used == 0 {
            return Err(Error::LinearSolveFailure("GMRES breakdown".into()));
        }
    }
}
