//! Block-sparse direct LU factorization.
//!
//! Elimination runs over cell blocks in a nested-dissection order. The fill
//! pattern is computed symbolically with the elimination tree, and the
//! numeric phase performs right-looking dense block updates. Diagonal
//! blocks are stored inverted.

use crate::error::Result;
use crate::linalg::dense::{gemm, gemm_sub, gemv, gemv_sub, invert};
use crate::linalg::sparse::BlockCsr;
use crate::mesh::Point;

/// Nested-dissection ordering of cells from their centres: recursively split
/// along the widest coordinate, number both halves first and the separator
/// (cells of the lower half touching the upper half) last.
pub fn nested_dissection(centers: &[Point], dim: usize, adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = centers.len();
    let mut order = Vec::with_capacity(n);
    let mut side = vec![0u64; n];
    let all: Vec<usize> = (0..n).collect();
    dissect(all, centers, dim, adjacency, &mut side, 1, &mut order);
    order
}

fn dissect(
    cells: Vec<usize>,
    centers: &[Point],
    dim: usize,
    adjacency: &[Vec<usize>],
    side: &mut [u64],
    tag: u64,
    order: &mut Vec<usize>,
) {
    if cells.len() <= 16 {
        order.extend(cells);
        return;
    }
    let mut axis = 0;
    let mut best = -1.0;
    for k in 0..dim {
        let lo = cells.iter().map(|&c| centers[c][k]).fold(f64::INFINITY, f64::min);
        let hi = cells.iter().map(|&c| centers[c][k]).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > best {
            best = hi - lo;
            axis = k;
        }
    }
    let mut sorted = cells;
    sorted.sort_by(|&a, &b| centers[a][axis].total_cmp(&centers[b][axis]).then(a.cmp(&b)));
    let mid = sorted.len() / 2;
    let split = centers[sorted[mid]][axis];
    let (low, high): (Vec<usize>, Vec<usize>) = sorted.iter().partition(|&&c| centers[c][axis] < split);
    if low.is_empty() || high.is_empty() {
        order.extend(sorted);
        return;
    }
    let low_tag = 2 * tag;
    let high_tag = 2 * tag + 1;
    for &c in &high {
        side[c] = high_tag;
    }
    for &c in &low {
        side[c] = low_tag;
    }
    let mut low_inner = Vec::with_capacity(low.len());
    let mut separator = Vec::new();
    for &c in &low {
        if adjacency[c].iter().any(|&nb| side[nb] == high_tag) {
            separator.push(c);
        } else {
            low_inner.push(c);
        }
    }
    dissect(low_inner, centers, dim, adjacency, side, low_tag, order);
    dissect(high, centers, dim, adjacency, side, high_tag, order);
    for &c in &separator {
        side[c] = 0;
    }
    order.extend(separator);
}

/// Factorization `P A P^T = L U` in cell blocks.
pub struct BlockLu {
    order: Vec<usize>,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    /// Positions (in elimination order) of the off-diagonal blocks of each
    /// pivot, sorted ascending.
    structure: Vec<Vec<usize>>,
    dinv: Vec<Vec<f64>>,
    /// `lower[k][s]`: block `L(structure[k][s], k)`, `n_i x n_k`.
    lower: Vec<Vec<Vec<f64>>>,
    /// `upper[k][s]`: block `U(k, structure[k][s])`, `n_k x n_j`.
    upper: Vec<Vec<Vec<f64>>>,
}

impl BlockLu {
    /// Factorizes `a` eliminating blocks in the given cell order.
    pub fn factor(a: &BlockCsr, order: Vec<usize>) -> Result<Self> {
        let nb = a.num_blocks();
        assert_eq!(order.len(), nb, "ordering must cover every block");
        let mut pos = vec![0; nb];
        for (k, &c) in order.iter().enumerate() {
            pos[c] = k;
        }
        // Symbolic phase.
        let mut structure: Vec<Vec<usize>> = vec![Vec::new(); nb];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); nb];
        for k in 0..nb {
            let c = order[k];
            let mut s: Vec<usize> = a.neighbors(c).iter().map(|&j| pos[j]).filter(|&j| j > k).collect();
            for &ch in &children[k] {
                s.extend(structure[ch].iter().copied().filter(|&j| j > k));
            }
            s.sort_unstable();
            s.dedup();
            if let Some(&parent) = s.first() {
                children[parent].push(k);
            }
            structure[k] = s;
        }
        drop(children);

        let sizes: Vec<usize> = order.iter().map(|&c| a.block_size(c)).collect();
        let offsets = a.offsets().to_vec();
        let mut diag: Vec<Vec<f64>> = Vec::with_capacity(nb);
        let mut lower: Vec<Vec<Vec<f64>>> = Vec::with_capacity(nb);
        let mut upper: Vec<Vec<Vec<f64>>> = Vec::with_capacity(nb);
        for k in 0..nb {
            let c = order[k];
            let nk = sizes[k];
            let mut d = vec![0.0; nk * nk];
            a.get_block(c, c, &mut d);
            diag.push(d);
            let mut lk = Vec::with_capacity(structure[k].len());
            let mut uk = Vec::with_capacity(structure[k].len());
            for &i in &structure[k] {
                let ci = order[i];
                let ni = sizes[i];
                let mut l = vec![0.0; ni * nk];
                let mut u = vec![0.0; nk * ni];
                if a.neighbors(ci).binary_search(&c).is_ok() {
                    a.get_block(ci, c, &mut l);
                }
                if a.neighbors(c).binary_search(&ci).is_ok() {
                    a.get_block(c, ci, &mut u);
                }
                lk.push(l);
                uk.push(u);
            }
            lower.push(lk);
            upper.push(uk);
        }

        // Numeric phase.
        let mut tmp = Vec::new();
        for k in 0..nb {
            let nk = sizes[k];
            invert(nk, &mut diag[k])?;
            for s in 0..structure[k].len() {
                let ni = sizes[structure[k][s]];
                tmp.resize(ni * nk, 0.0);
                gemm(&mut tmp, &lower[k][s], &diag[k], ni, nk, nk);
                lower[k][s].copy_from_slice(&tmp[..ni * nk]);
            }
            let sk = structure[k].clone();
            let (done, rest_l) = lower.split_at_mut(k + 1);
            let (done_u, rest_u) = upper.split_at_mut(k + 1);
            let lk = &done[k];
            let uk = &done_u[k];
            let (_, rest_d) = diag.split_at_mut(k + 1);
            for (si, &i) in sk.iter().enumerate() {
                let ni = sizes[i];
                for (sj, &j) in sk.iter().enumerate() {
                    let nj = sizes[j];
                    let target: &mut [f64] = if i == j {
                        &mut rest_d[i - k - 1]
                    } else if i < j {
                        let slot = structure[i].binary_search(&j).expect("fill pattern closed");
                        &mut rest_u[i - k - 1][slot]
                    } else {
                        let slot = structure[j].binary_search(&i).expect("fill pattern closed");
                        &mut rest_l[j - k - 1][slot]
                    };
                    gemm_sub(target, &lk[si], &uk[sj], ni, nk, nj);
                }
            }
        }
        Ok(Self {
            order,
            sizes,
            offsets,
            structure,
            dinv: diag,
            lower,
            upper,
        })
    }

    /// Number of stored block entries, for diagnostics.
    pub fn stored_values(&self) -> usize {
        let mut s = 0;
        for k in 0..self.sizes.len() {
            s += self.dinv[k].len();
            s += self.lower[k].iter().map(Vec::len).sum::<usize>() * 2;
        }
        s
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let nb = self.sizes.len();
        let range = |k: usize| {
            let c = self.order[k];
            self.offsets[c]..self.offsets[c + 1]
        };
        let mut zk = Vec::new();
        for k in 0..nb {
            zk.clear();
            zk.extend_from_slice(&b[range(k)]);
            let nk = self.sizes[k];
            for (s, &i) in self.structure[k].iter().enumerate() {
                let ni = self.sizes[i];
                let r = range(i);
                gemv_sub(&mut b[r], &self.lower[k][s], &zk, ni, nk);
            }
        }
        let mut xk = Vec::new();
        for k in (0..nb).rev() {
            let nk = self.sizes[k];
            zk.clear();
            zk.extend_from_slice(&b[range(k)]);
            for (s, &j) in self.structure[k].iter().enumerate() {
                let nj = self.sizes[j];
                let r = range(j);
                gemv_sub(&mut zk, &self.upper[k][s], &b[r], nk, nj);
            }
            xk.resize(nk, 0.0);
            gemv(&mut xk, &self.dinv[k], &zk, nk, nk);
            b[range(k)].copy_from_slice(&xk);
        }
    }
}
