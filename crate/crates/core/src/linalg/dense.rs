//! Small dense kernels on row-major slices, used for per-cell blocks.

use crate::error::{Error, Result};

/// In-place inverse of an `n x n` row-major matrix by Gauss-Jordan
/// elimination with partial pivoting.
pub fn invert(n: usize, a: &mut [f64]) -> Result<()> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best <= 1e-300 * scale || !best.is_finite() {
            return Err(Error::LinearSolveFailure(format!(
                "singular {n}x{n} block (pivot {best:.3e} in column {col})"
            )));
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
                inv.swap(col * n + k, piv * n + k);
            }
        }
        let d = 1.0 / a[col * n + col];
        for k in 0..n {
            a[col * n + k] *= d;
            inv[col * n + k] *= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                a[r * n + k] -= f * a[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    a.copy_from_slice(&inv);
    Ok(())
}

/// `c -= a * b` with `a: m x k`, `b: k x n`, `c: m x n`.
pub fn gemm_sub(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    match n {
        2 => gemm_sub_fixed::<2>(c, a, b, m, k),
        8 => gemm_sub_fixed::<8>(c, a, b, m, k),
        16 => gemm_sub_fixed::<16>(c, a, b, m, k),
        18 => gemm_sub_fixed::<18>(c, a, b, m, k),
        32 => gemm_sub_fixed::<32>(c, a, b, m, k),
        _ => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for l in 0..k {
                    let f = a[i * k + l];
                    if f == 0.0 {
                        continue;
                    }
                    let brow = &b[l * n..(l + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv -= f * bv;
                    }
                }
            }
        }
    }
}

/// Row kernel with the accumulator held in registers.
#[inline(always)]
fn gemm_sub_fixed<const N: usize>(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize) {
    let b = &b[..k * N];
    for i in 0..m {
        let crow: &mut [f64; N] = (&mut c[i * N..(i + 1) * N]).try_into().unwrap();
        let mut acc = *crow;
        let arow = &a[i * k..(i + 1) * k];
        for (l, &f) in arow.iter().enumerate() {
            let brow: &[f64; N] = b[l * N..(l + 1) * N].try_into().unwrap();
            for j in 0..N {
                acc[j] -= f * brow[j];
            }
        }
        *crow = acc;
    }
}

/// `c = a * b` with `a: m x k`, `b: k x n`.
pub fn gemm(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    c[..m * n].iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let f = a[i * k + l];
            if f == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                *cv += f * bv;
            }
        }
    }
}

/// `y -= a * x` with `a: m x n`.
pub fn gemv_sub(y: &mut [f64], a: &[f64], x: &[f64], m: usize, n: usize) {
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        y[i] -= row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>();
    }
}

/// `y = a * x` with `a: m x n`.
pub fn gemv(y: &mut [f64], a: &[f64], x: &[f64], m: usize, n: usize) {
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        y[i] = row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>();
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
