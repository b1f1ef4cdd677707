//! Compressed sparse row storage with a cell-block layout.
//!
//! Rows and columns are grouped by mesh cell. Each block row lists its
//! neighbour cells (including itself) in ascending order, so every row's
//! column indices come out sorted.

use std::sync::Arc;

#[derive(Debug)]
struct Pattern {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    nbrs: Vec<Vec<usize>>,
    /// Column offset of each neighbour block inside a row of the block row.
    nbr_start: Vec<Vec<usize>>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

/// CSR matrix whose sparsity is a union of dense cell blocks. Copies share
/// the sparsity pattern.
#[derive(Clone, Debug)]
pub struct BlockCsr {
    pattern: Arc<Pattern>,
    values: Vec<f64>,
}

impl BlockCsr {
    /// Zero matrix with blocks of `sizes[c]` rows/columns and block couplings
    /// from `adjacency` (self-couplings are added automatically).
    pub fn new(sizes: Vec<usize>, adjacency: &[Vec<usize>]) -> Self {
        let n_cells = sizes.len();
        let mut offsets = Vec::with_capacity(n_cells + 1);
        offsets.push(0);
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let mut nbrs = Vec::with_capacity(n_cells);
        let mut nbr_start = Vec::with_capacity(n_cells);
        let mut row_ptr = Vec::with_capacity(offsets[n_cells] + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for c in 0..n_cells {
            let mut list: Vec<usize> = adjacency[c].clone();
            list.push(c);
            list.sort_unstable();
            list.dedup();
            let mut starts = Vec::with_capacity(list.len());
            let mut acc = 0;
            for &nb in &list {
                starts.push(acc);
                acc += sizes[nb];
            }
            for _ in 0..sizes[c] {
                for &nb in &list {
                    col_idx.extend(offsets[nb]..offsets[nb + 1]);
                }
                row_ptr.push(col_idx.len());
            }
            nbrs.push(list);
            nbr_start.push(starts);
        }
        let nnz = col_idx.len();
        Self {
            pattern: Arc::new(Pattern {
                sizes,
                offsets,
                nbrs,
                nbr_start,
                row_ptr,
                col_idx,
            }),
            values: vec![0.0; nnz],
        }
    }

    /// Same pattern, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            pattern: self.pattern.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn nrows(&self) -> usize {
        *self.pattern.offsets.last().unwrap()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.pattern.sizes.len()
    }

    pub fn block_size(&self, cell: usize) -> usize {
        self.pattern.sizes[cell]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.pattern.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.pattern.offsets
    }

    pub fn neighbors(&self, cell: usize) -> &[usize] {
        &self.pattern.nbrs[cell]
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.pattern.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.pattern.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn slot(&self, row_cell: usize, col_cell: usize) -> usize {
        self.pattern.nbrs[row_cell]
            .binary_search(&col_cell)
            .unwrap_or_else(|_| panic!("cell {col_cell} is not coupled to cell {row_cell}"))
    }

    /// Adds `scale * block` (row-major, `sizes[rc] x sizes[cc]`) to block `(rc, cc)`.
    pub fn add_block(&mut self, rc: usize, cc: usize, block: &[f64], scale: f64) {
        let slot = self.slot(rc, cc);
        let start = self.pattern.nbr_start[rc][slot];
        let nc = self.pattern.sizes[cc];
        for i in 0..self.pattern.sizes[rc] {
            let base = self.pattern.row_ptr[self.pattern.offsets[rc] + i] + start;
            let row = &mut self.values[base..base + nc];
            for (v, b) in row.iter_mut().zip(&block[i * nc..(i + 1) * nc]) {
                *v += scale * b;
            }
        }
    }

    /// Copies block `(rc, cc)` into `out` (row-major).
    pub fn get_block(&self, rc: usize, cc: usize, out: &mut [f64]) {
        let slot = self.slot(rc, cc);
        let start = self.pattern.nbr_start[rc][slot];
        let nc = self.pattern.sizes[cc];
        for i in 0..self.pattern.sizes[rc] {
            let base = self.pattern.row_ptr[self.pattern.offsets[rc] + i] + start;
            out[i * nc..(i + 1) * nc].copy_from_slice(&self.values[base..base + nc]);
        }
    }

    /// Entry `(i, j)`, zero if outside the pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1];
        match self.pattern.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1] {
                s += self.values[k] * x[self.pattern.col_idx[k]];
            }
            *yi = s;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows()];
        self.matvec(x, &mut y);
        y
    }

    /// `x^T A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.mul(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    /// `self += alpha * other`; both must share the same pattern.
    pub fn add_scaled(&mut self, alpha: f64, other: &BlockCsr) {
        assert_eq!(self.values.len(), other.values.len(), "pattern mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Adds `alpha` to every diagonal entry.
    pub fn shift_diagonal(&mut self, alpha: f64) {
        for i in 0..self.nrows() {
            let r = self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1];
            let k = self.pattern.col_idx[r.clone()].binary_search(&i).expect("diagonal in pattern");
            self.values[r.start + k] += alpha;
        }
    }

    /// Dense copy, for small verification problems.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.nrows();
        let mut d = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for k in self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1] {
                d[(i, self.pattern.col_idx[k])] += self.values[k];
            }
        }
        d
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows() {
            for k in self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1] {
                let j = self.pattern.col_idx[k];
                worst = worst.max((self.values[k] - self.get(j, i)).abs());
            }
        }
        worst
    }
}
