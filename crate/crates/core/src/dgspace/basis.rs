//! Orthonormal tensor-product Legendre bases on `[-1, 1]^d`.

/// Exclusive upper bound on the polynomial degree.
pub const MAX_ORDER: usize = 12;

/// Values of the orthonormal Legendre polynomials `l_0..=l_p` at `x`, and
/// their derivatives. `l_k = sqrt((2k+1)/2) P_k`, so that `int l_i l_j = delta_ij`.
pub fn legendre_1d(p: usize, x: f64, vals: &mut [f64], ders: &mut [f64]) {
    assert!(p < MAX_ORDER, "degree {p} exceeds supported maximum");
    let mut pk = [0.0; MAX_ORDER];
    let mut dk = [0.0; MAX_ORDER];
    pk[0] = 1.0;
    dk[0] = 0.0;
    if p >= 1 {
        pk[1] = x;
        dk[1] = 1.0;
    }
    for k in 2..=p {
        let kf = k as f64;
        pk[k] = ((2.0 * kf - 1.0) * x * pk[k - 1] - (kf - 1.0) * pk[k - 2]) / kf;
        // P_k' = P_{k-2}' + (2k-1) P_{k-1}
        dk[k] = dk[k - 2] + (2.0 * kf - 1.0) * pk[k - 1];
    }
    for k in 0..=p {
        let s = ((2 * k + 1) as f64 / 2.0).sqrt();
        vals[k] = s * pk[k];
        ders[k] = s * dk[k];
    }
}

/// Number of tensor modes for degree `p` in `dim` dimensions.
pub fn num_modes(p: usize, dim: usize) -> usize {
    (p + 1).pow(dim as u32)
}

/// Per-axis degrees of mode `i` (axis 0 fastest).
pub fn mode_degrees(i: usize, p: usize, dim: usize) -> [usize; 3] {
    let mut a = [0; 3];
    let mut rest = i;
    for v in a.iter_mut().take(dim) {
        *v = rest % (p + 1);
        rest /= p + 1;
    }
    a
}

/// Index of the mode with per-axis degrees `a` in the degree-`p` basis, if present.
pub fn mode_index(a: &[usize; 3], p: usize, dim: usize) -> Option<usize> {
    let mut idx = 0;
    let mut stride = 1;
    for &ak in a.iter().take(dim) {
        if ak > p {
            return None;
        }
        idx += ak * stride;
        stride *= p + 1;
    }
    Some(idx)
}

/// Reference-cell values and gradients of all modes at a set of points.
#[derive(Clone, Debug)]
pub struct Tabulation {
    pub n_modes: usize,
    pub n_points: usize,
    pub dim: usize,
    /// `vals[q * n_modes + i]`
    pub vals: Vec<f64>,
    /// `grads[(q * n_modes + i) * dim + k]`
    pub grads: Vec<f64>,
}

impl Tabulation {
    pub fn new(p: usize, dim: usize, points: &[[f64; 3]]) -> Self {
        let n_modes = num_modes(p, dim);
        let n_points = points.len();
        let mut vals = vec![0.0; n_points * n_modes];
        let mut grads = vec![0.0; n_points * n_modes * dim];
        let mut v1 = vec![[0.0; 3]; p + 1];
        let mut d1 = vec![[0.0; 3]; p + 1];
        let mut tv = vec![0.0; p + 1];
        let mut td = vec![0.0; p + 1];
        for (q, x) in points.iter().enumerate() {
            for k in 0..dim {
                legendre_1d(p, x[k], &mut tv, &mut td);
                for j in 0..=p {
                    v1[j][k] = tv[j];
                    d1[j][k] = td[j];
                }
            }
            for i in 0..n_modes {
                let a = mode_degrees(i, p, dim);
                let mut v = 1.0;
                for k in 0..dim {
                    v *= v1[a[k]][k];
                }
                vals[q * n_modes + i] = v;
                for k in 0..dim {
                    let mut g = d1[a[k]][k];
                    for l in 0..dim {
                        if l != k {
                            g *= v1[a[l]][l];
                        }
                    }
                    grads[(q * n_modes + i) * dim + k] = g;
                }
            }
        }
        Self {
            n_modes,
            n_points,
            dim,
            vals,
            grads,
        }
    }

    #[inline]
    pub fn val(&self, q: usize, i: usize) -> f64 {
        self.vals[q * self.n_modes + i]
    }

    #[inline]
    pub fn grad(&self, q: usize, i: usize, k: usize) -> f64 {
        self.grads[(q * self.n_modes + i) * self.dim + k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgspace::quadrature::{tensor_rule, GaussRule};

    #[test]
    fn reference_gram_is_identity() {
        for dim in [2, 3] {
            for p in 0..4 {
                let rule = GaussRule::new(GaussRule::volume_points(p));
                let (pts, w) = tensor_rule(&rule, dim);
                let tab = Tabulation::new(p, dim, &pts);
                let n = tab.n_modes;
                for i in 0..n {
                    for j in 0..n {
                        let g: f64 = (0..pts.len()).map(|q| w[q] * tab.val(q, i) * tab.val(q, j)).sum();
                        let e = if i == j { 1.0 } else { 0.0 };
                        assert!((g - e).abs() < 1e-12, "dim={dim} p={p} ({i},{j}) = {g}");
                    }
                }
            }
        }
    }

    #[test]
    fn mode_index_roundtrip() {
        for p in 0..4 {
            for i in 0..num_modes(p, 3) {
                assert_eq!(mode_index(&mode_degrees(i, p, 3), p, 3), Some(i));
            }
        }
        assert_eq!(mode_index(&[2, 0, 0], 1, 2), None);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let p = 4;
        let mut v = vec![0.0; p + 1];
        let mut d = vec![0.0; p + 1];
        let mut vp = vec![0.0; p + 1];
        let mut vm = vec![0.0; p + 1];
        let mut scratch = vec![0.0; p + 1];
        let h = 1e-6;
        for &x in &[-1.0, -0.2, 0.7, 1.0] {
            legendre_1d(p, x, &mut v, &mut d);
            legendre_1d(p, x + h, &mut vp, &mut scratch);
            legendre_1d(p, x - h, &mut vm, &mut scratch);
            for k in 0..=p {
                assert!((d[k] - (vp[k] - vm[k]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }
}
