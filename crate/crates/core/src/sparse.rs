//! Compressed-row Hermitian matrices.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type C64 = Complex64;

/// Hermitian matrix in compressed sparse row layout.
#[derive(Clone, Debug)]
pub struct SparseHermitian {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<C64>,
    /// True when every stored entry has zero imaginary part.
    pub real: bool,
    /// True when the Hermitian defect passed the construction check.
    pub hermitian: bool,
}

/// Relative tolerance used by the construction check.
pub const HERMITIAN_TOL: f64 = 1e-12;

impl SparseHermitian {
    /// Builds a matrix from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, C64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "triplet ({r},{c}) outside dimension {dim}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_ptr[r + 1] += 1;
                col_idx.push(c);
                values.push(v);
                last = Some((r, c));
            }
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut m = SparseHermitian { dim, row_ptr, col_idx, values, real: true, hermitian: true };
        m.refresh_flags();
        m
    }

    pub fn from_real_triplets(dim: usize, triplets: Vec<(usize, usize, f64)>) -> Self {
        Self::from_triplets(dim, triplets.into_iter().map(|(r, c, v)| (r, c, C64::new(v, 0.0))).collect())
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_triplets(dim, Vec::new())
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_real_triplets(dim, (0..dim).map(|i| (i, i, 1.0)).collect())
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        Self::from_real_triplets(diag.len(), diag.iter().enumerate().map(|(i, &v)| (i, i, v)).collect())
    }

    /// Dense Hermitian input; entries below `drop_tol` in modulus are skipped.
    pub fn from_dense(a: &DMatrix<C64>, drop_tol: f64) -> Self {
        let n = a.nrows();
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = a[(i, j)];
                if v.norm() > drop_tol {
                    t.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, t)
    }

    fn refresh_flags(&mut self) {
        self.real = self.values.iter().all(|v| v.im == 0.0);
        self.hermitian = self.hermitian_defect() <= HERMITIAN_TOL * self.max_abs().max(f64::MIN_POSITIVE);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates over stored entries as (row, col, value).
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.col_idx[k], self.values[k]))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        let row = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
        match row.binary_search(&c) {
            Ok(k) => self.values[self.row_ptr[r] + k],
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    /// max |A_ij - conj(A_ji)| over stored entries.
    pub fn hermitian_defect(&self) -> f64 {
        self.entries().fold(0.0, |m, (r, c, v)| m.max((v - self.get(c, r).conj()).norm()))
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.dim);
        (0..self.dim)
            .map(|r| {
                let mut s = C64::new(0.0, 0.0);
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    s += self.values[k] * x[self.col_idx[k]];
                }
                s
            })
            .collect()
    }

    /// Linear combination sum_i coeff_i * A_i of equally sized matrices.
    pub fn combine(terms: &[(f64, &SparseHermitian)]) -> Self {
        let dim = terms.first().map(|t| t.1.dim).unwrap_or(0);
        let mut t = Vec::new();
        for &(c, m) in terms {
            assert_eq!(m.dim, dim);
            if c != 0.0 {
                t.extend(m.entries().map(|(r, col, v)| (r, col, v * c)));
            }
        }
        Self::from_triplets(dim, t)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= c);
        m.refresh_flags();
        m
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }

    /// Adds `shift` to every diagonal entry.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut t: Vec<_> = self.entries().collect();
        t.extend((0..self.dim).map(|i| (i, i, C64::new(shift, 0.0))));
        Self::from_triplets(self.dim, t)
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut a = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.entries() {
            a[(r, c)] += v;
        }
        a
    }

    /// Real part as a dense matrix; meaningful when `real` is set.
    pub fn to_dense_real(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.entries() {
            a[(r, c)] += v.re;
        }
        a
    }

    /// Quadratic form <x, A x> = sum conj(x_i) A_ij x_j.
    pub fn quadratic_form(&self, x: &[C64]) -> C64 {
        let ax = self.matvec(x);
        x.iter().zip(&ax).map(|(a, b)| a.conj() * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let m = SparseHermitian::from_real_triplets(2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 1, 4.0)]);
        assert_eq!(m.get(0, 0).re, 3.0);
        assert_eq!(m.nnz(), 2);
        assert!(m.real && m.hermitian);
    }

    #[test]
    fn detects_non_hermitian_input() {
        let m = SparseHermitian::from_triplets(
            2,
            vec![(0, 1, C64::new(0.0, 1.0)), (1, 0, C64::new(0.0, 1.0))],
        );
        assert!(!m.hermitian);
        assert!(!m.real);
        let h = SparseHermitian::from_triplets(
            2,
            vec![(0, 1, C64::new(0.0, 1.0)), (1, 0, C64::new(0.0, -1.0))],
        );
        assert!(h.hermitian);
    }

    #[test]
    fn matvec_matches_dense() {
        let m = SparseHermitian::from_real_triplets(3, vec![(0, 0, 2.0), (0, 1, -1.0), (1, 0, -1.0), (2, 2, 5.0)]);
        let x = vec![C64::new(1.0, 0.0), C64::new(2.0, 1.0), C64::new(-1.0, 0.5)];
        let dense = m.to_dense() * nalgebra::DVector::from_vec(x.clone());
        for (a, b) in m.matvec(&x).iter().zip(dense.iter()) {
            assert!((a - b).norm() < 1e-15);
        }
    }
}
