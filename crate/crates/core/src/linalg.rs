//! Sparse triplet matrices and a row-equilibrated banded LU.
//!
//! The transcribed KKT systems couple only neighbouring stages, so once rows and
//! columns are sorted by stage the matrix is banded. [`BandedLu`] factors it with
//! partial pivoting confined to the band.

use std::io::Write;

use nalgebra::DMatrix;

#[derive(Clone, Debug, Default)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    /// `(row, col, value)`; duplicates are summed.
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            debug_assert!(row < self.nrows && col < self.ncols);
            self.entries.push((row, col, value));
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        for &(r, c, v) in &self.entries {
            y[c] += v * x[r];
        }
        y
    }

    /// Sort by `(row, col)` and merge duplicates.
    pub fn compress(&mut self) {
        self.entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for &(r, c, v) in &self.entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        merged.retain(|e| e.2 != 0.0);
        self.entries = merged;
    }

    /// Submatrix on the given rows and columns, re-indexed in the given order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> SparseMatrix {
        let mut row_map = vec![usize::MAX; self.nrows];
        let mut col_map = vec![usize::MAX; self.ncols];
        for (k, &r) in rows.iter().enumerate() {
            row_map[r] = k;
        }
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k;
        }
        let mut out = SparseMatrix::new(rows.len(), cols.len());
        for &(r, c, v) in &self.entries {
            let (nr, nc) = (row_map[r], col_map[c]);
            if nr != usize::MAX && nc != usize::MAX {
                out.entries.push((nr, nc, v));
            }
        }
        out
    }

    /// Matrix Market coordinate format (1-based indices).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut m = self.clone();
        m.compress();
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", m.nrows, m.ncols, m.entries.len())?;
        for (r, c, v) in &m.entries {
            writeln!(w, "{} {} {:.17e}", r + 1, c + 1, v)?;
        }
        Ok(())
    }
}

/// Factorization failure: a pivot fell below tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Singular {
    pub position: usize,
    pub pivot: f64,
}

/// LU factors of `D P_r A P_c` where `D` equilibrates rows.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    width: usize,
    upper: usize,
    band: Vec<f64>,
    lower: Vec<f64>,
    pivots: Vec<usize>,
    row_order: Vec<usize>,
    col_order: Vec<usize>,
    row_scale: Vec<f64>,
    min_pivot: f64,
    max_pivot: f64,
}

impl BandedLu {
    /// Factor the square matrix `m` after reordering rows/columns into `row_order`/`col_order`
    /// (entry `k` names the original index placed at position `k`). `diag_shift` is added to
    /// the diagonal of the reordered, equilibrated matrix.
    pub fn factor(
        m: &SparseMatrix,
        row_order: &[usize],
        col_order: &[usize],
        diag_shift: f64,
        pivot_tol: f64,
    ) -> Result<Self, Singular> {
        let n = m.nrows;
        assert_eq!(m.ncols, n, "banded LU needs a square matrix");
        assert_eq!(row_order.len(), n);
        assert_eq!(col_order.len(), n);
        let mut row_pos = vec![0; n];
        let mut col_pos = vec![0; n];
        for (k, &r) in row_order.iter().enumerate() {
            row_pos[r] = k;
        }
        for (k, &c) in col_order.iter().enumerate() {
            col_pos[c] = k;
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for &(r, c, _) in &m.entries {
            let (pr, pc) = (row_pos[r], col_pos[c]);
            if pr > pc {
                kl = kl.max(pr - pc);
            } else {
                ku = ku.max(pc - pr);
            }
        }
        let upper = kl + ku;
        let width = kl + upper + 1;
        let mut band = vec![0.0; n * width];
        for &(r, c, v) in &m.entries {
            let (pr, pc) = (row_pos[r], col_pos[c]);
            band[pr * width + pc + kl - pr] += v;
        }
        let mut row_scale = vec![1.0; n];
        for i in 0..n {
            let row = &mut band[i * width..(i + 1) * width];
            let big = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if big > 0.0 && big.is_finite() {
                row_scale[i] = 1.0 / big;
                row.iter_mut().for_each(|v| *v /= big);
            }
            if diag_shift != 0.0 {
                row[kl] += diag_shift;
            }
        }

        let mut lower = vec![0.0; n * kl.max(1)];
        let mut pivots = vec![0; n];
        let (mut min_pivot, mut max_pivot) = (f64::INFINITY, 0.0f64);
        let at = |i: usize, j: usize| i * width + j + kl - i;
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = band[at(k, k)].abs();
            for i in k + 1..=last {
                let v = band[at(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > pivot_tol) {
                return Err(Singular {
                    position: k,
                    pivot: best,
                });
            }
            pivots[k] = p;
            let col_end = (k + upper).min(n - 1);
            if p != k {
                for j in k..=col_end {
                    band.swap(at(k, j), at(p, j));
                }
            }
            let pivot = band[at(k, k)];
            min_pivot = min_pivot.min(pivot.abs());
            max_pivot = max_pivot.max(pivot.abs());
            for i in k + 1..=last {
                let mult = band[at(i, k)] / pivot;
                lower[k * kl + (i - k - 1)] = mult;
                band[at(i, k)] = 0.0;
                if mult != 0.0 {
                    for j in k + 1..=col_end {
                        let u = band[at(k, j)];
                        band[at(i, j)] -= mult * u;
                    }
                }
            }
        }
        Ok(Self {
            n,
            kl,
            width,
            upper,
            band,
            lower,
            pivots,
            row_order: row_order.to_vec(),
            col_order: col_order.to_vec(),
            row_scale,
            min_pivot,
            max_pivot,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.upper - self.kl)
    }

    /// Ratio of largest to smallest pivot magnitude; a cheap conditioning indicator.
    pub fn condition_estimate(&self) -> f64 {
        self.max_pivot / self.min_pivot
    }

    /// Solve `A x = b` in the original ordering.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kl, width) = (self.n, self.kl, self.width);
        let mut y: Vec<f64> = (0..n)
            .map(|k| b[self.row_order[k]] * self.row_scale[k])
            .collect();
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                y.swap(k, p);
            }
            let yk = y[k];
            if yk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    y[i] -= self.lower[k * kl + (i - k - 1)] * yk;
                }
            }
        }
        for i in (0..n).rev() {
            let row = &self.band[i * width..(i + 1) * width];
            let mut acc = y[i];
            for j in i + 1..=(i + self.upper).min(n - 1) {
                acc -= row[j + kl - i] * y[j];
            }
            y[i] = acc / row[kl];
        }
        let mut x = vec![0.0; n];
        for (k, &c) in self.col_order.iter().enumerate() {
            x[c] = y[k];
        }
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, b.ncols());
        for j in 0..b.ncols() {
            let col: Vec<f64> = b.column(j).iter().copied().collect();
            out.column_mut(j).copy_from_slice(&self.solve(&col));
        }
        out
    }
}

/// Minimum-norm least-squares solution of `A X = B` through the SVD.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
    let eps = smax * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    svd.solve(b, eps)
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), b.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_order(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn solves_tridiagonal_needing_pivots() {
        // zero diagonal forces row exchanges within the band
        let n = 6;
        let mut m = SparseMatrix::new(n, n);
        for i in 0..n {
            if i + 1 < n {
                m.push(i, i + 1, 1.0 + i as f64);
                m.push(i + 1, i, 2.0 - 0.3 * i as f64);
            }
            if i % 2 == 1 {
                m.push(i, i, 0.5);
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 1.0).collect();
        let b = m.mul_vec(&x_true);
        let lu = BandedLu::factor(&m, &identity_order(n), &identity_order(n), 0.0, 1e-14).unwrap();
        let x = lu.solve(&b);
        for (a, e) in x.iter().zip(&x_true) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn permuted_ordering_matches_dense_solve() {
        let n = 9;
        let mut m = SparseMatrix::new(n, n);
        for i in 0..n {
            m.push(i, i, 4.0 + i as f64);
            m.push(i, (i * 4 + 1) % n, 1.5);
            m.push((i + 3) % n, i, -0.7);
        }
        let order: Vec<usize> = (0..n).rev().collect();
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let lu = BandedLu::factor(&m, &order, &identity_order(n), 0.0, 1e-14).unwrap();
        let x = lu.solve(&b);
        let dense = m
            .to_dense()
            .lu()
            .solve(&nalgebra::DVector::from_vec(b))
            .unwrap();
        for (a, e) in x.iter().zip(dense.iter()) {
            assert!((a - e).abs() < 1e-11);
        }
    }

    #[test]
    fn reports_singular_and_recovers_with_shift() {
        let mut m = SparseMatrix::new(3, 3);
        m.push(0, 0, 1.0);
        m.push(1, 1, 1.0);
        let order = identity_order(3);
        assert!(BandedLu::factor(&m, &order, &order, 0.0, 1e-14).is_err());
        let lu = BandedLu::factor(&m, &order, &order, 1e-8, 1e-14).unwrap();
        let x = lu.solve(&[1.0, 2.0, 0.0]);
        assert!((x[0] - 1.0).abs() < 1e-7 && x[2] == 0.0);
    }

    #[test]
    fn compress_merges_duplicates() {
        let mut m = SparseMatrix::new(2, 2);
        m.push(1, 0, 1.0);
        m.push(0, 1, 2.0);
        m.push(1, 0, -1.0);
        m.compress();
        assert_eq!(m.entries, vec![(0, 1, 2.0)]);
    }
}
