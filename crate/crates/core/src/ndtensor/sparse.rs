use super::{Tensor, TensorError};

/// Binary sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePattern {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparsePattern {
    /// Builds the pattern from (row, col) pairs; duplicates collapse to one entry.
    pub fn from_pairs(
        rows: usize,
        cols: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TensorError> {
        let mut per_row: Vec<Vec<usize>> = vec![Vec::new(); rows];
        for (r, c) in pairs {
            if r >= rows || c >= cols {
                return Err(TensorError::InvalidArgument(format!(
                    "sparse entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            per_row[r].push(c);
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut cs in per_row {
            cs.sort_unstable();
            cs.dedup();
            col_idx.extend(cs);
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
        })
    }

    /// Nonzero pattern of a dense matrix (entries != 0).
    pub fn from_dense(m: &Tensor) -> Result<Self, TensorError> {
        if m.ndim() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "expected a matrix, got shape {:?}",
                m.shape()
            )));
        }
        let (r, c) = (m.shape()[0], m.shape()[1]);
        let pairs = (0..r).flat_map(|i| (0..c).map(move |j| (i, j)));
        let data = m.data();
        Self::from_pairs(r, c, pairs.filter(|&(i, j)| data[i * c + j] != 0.0))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row(r).binary_search(&c).is_ok()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).iter().map(move |&c| (r, c)))
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        let cols = self.cols;
        for (r, c) in self.pairs() {
            t.data_mut()[r * cols + c] = 1.0;
        }
        t
    }

    pub fn transpose(&self) -> Self {
        Self::from_pairs(self.cols, self.rows, self.pairs().map(|(r, c)| (c, r)))
            .expect("transposed indices stay in range")
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.pairs().all(|(r, c)| self.contains(c, r))
    }

    /// `out[o, r, f] = sum_{c in row r} x[o, c, f]` for `x` viewed as (outer, cols, inner).
    pub(crate) fn apply(&self, x: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let mut out = vec![0.0; outer * self.rows * inner];
        for o in 0..outer {
            let src = &x[o * self.cols * inner..(o + 1) * self.cols * inner];
            let dst = &mut out[o * self.rows * inner..(o + 1) * self.rows * inner];
            for r in 0..self.rows {
                let d = &mut dst[r * inner..(r + 1) * inner];
                for &c in self.row(r) {
                    let s = &src[c * inner..(c + 1) * inner];
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): scatters row gradients back to columns.
    pub(crate) fn apply_transpose(&self, g: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let mut out = vec![0.0; outer * self.cols * inner];
        for o in 0..outer {
            let src = &g[o * self.rows * inner..(o + 1) * self.rows * inner];
            let dst = &mut out[o * self.cols * inner..(o + 1) * self.cols * inner];
            for r in 0..self.rows {
                let s = &src[r * inner..(r + 1) * inner];
                for &c in self.row(r) {
                    let d = &mut dst[c * inner..(c + 1) * inner];
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
        out
    }
}
