//! Compressed sparse column matrices and the cached LU factorization.

use std::io::Write;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Col;

use crate::{Error, Result};

/// Square or rectangular CSC matrix without stored zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Duplicates are summed; entries that sum to exactly zero are dropped.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut col_ptr = vec![0; ncols + 1];
        let mut row_idx = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut k = 0;
        while k < sorted.len() {
            let (r, c, mut v) = sorted[k];
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            k += 1;
            while k < sorted.len() && sorted[k].0 == r && sorted[k].1 == c {
                v += sorted[k].2;
                k += 1;
            }
            if v != 0.0 {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
            }
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let t: Vec<_> = d.iter().enumerate().map(|(i, v)| (i, i, *v)).collect();
        Self::from_triplets(d.len(), d.len(), &t)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(row, value)` pairs of column `c`.
    pub fn column(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| self.column(c).map(move |(r, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.column(c).find(|(i, _)| *i == r).map_or(0.0, |(_, v)| v)
    }

    /// `y = M x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_acc(x, &mut y);
        y
    }

    /// `y += M x`.
    pub fn mul_vec_acc(&self, x: &[f64], y: &mut [f64]) {
        for (c, xc) in x.iter().enumerate() {
            if *xc != 0.0 {
                for (r, v) in self.column(c) {
                    y[r] += v * xc;
                }
            }
        }
    }

    /// `y = Mᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.ncols).map(|c| self.column_dot(c, x)).collect()
    }

    /// `(Mᵀ x)_c`.
    pub fn column_dot(&self, c: usize, x: &[f64]) -> f64 {
        self.column(c).map(|(r, v)| v * x[r]).sum()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.ncols).map(|c| self.column(c).map(|(_, v)| v).sum()).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.nrows];
        for (r, _, v) in self.triplets() {
            s[r] += v;
        }
        s
    }

    pub fn transpose(&self) -> SparseMatrix {
        let t: Vec<_> = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    pub fn scaled(&self, s: f64) -> SparseMatrix {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= s);
        m.drop_zeros();
        m
    }

    /// `a·self + b·other`.
    pub fn linear_combination(&self, a: f64, other: &SparseMatrix, b: f64) -> SparseMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let t: Vec<_> = self
            .triplets()
            .map(|(r, c, v)| (r, c, a * v))
            .chain(other.triplets().map(|(r, c, v)| (r, c, b * v)))
            .collect();
        Self::from_triplets(self.nrows, self.ncols, &t)
    }

    fn drop_zeros(&mut self) {
        let t: Vec<_> = self.triplets().collect();
        *self = Self::from_triplets(self.nrows, self.ncols, &t);
    }

    /// Largest entry of `|Mᵀ-ish|`; handy for assertions.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let t: Vec<_> = self.triplets().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &t)
            .map_err(|e| Error::LinearSolve(format!("{e:?}")))
    }

    /// Coordinate text dump, one `row col value` line per nonzero.
    pub fn write_coordinate<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# {} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (r, c, v) in self.triplets() {
            writeln!(w, "{r} {c} {v:e}")?;
        }
        Ok(())
    }
}

/// Sparse LU factorization, shared read-only between solves.
pub struct LuFactor {
    n: usize,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl std::fmt::Debug for LuFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LuFactor").field("n", &self.n).finish()
    }
}

impl LuFactor {
    pub fn new(m: &SparseMatrix) -> Result<LuFactor> {
        assert_eq!(m.nrows, m.ncols, "LU of a non-square matrix");
        let lu = m
            .to_faer()?
            .sp_lu()
            .map_err(|e| Error::LinearSolve(format!("sparse LU failed: {e:?}")))?;
        Ok(LuFactor { n: m.nrows, lu })
    }

    /// Solve `M x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<()> {
        self.solve_impl(b, false)
    }

    /// Solve `Mᵀ x = b` in place.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) -> Result<()> {
        self.solve_impl(b, true)
    }

    fn solve_impl(&self, b: &mut [f64], transpose: bool) -> Result<()> {
        assert_eq!(b.len(), self.n);
        let mut rhs = Col::<f64>::from_fn(self.n, |i| b[i]);
        if transpose {
            self.lu.solve_transpose_in_place(rhs.as_mat_mut());
        } else {
            self.lu.solve_in_place(rhs.as_mat_mut());
        }
        for (i, v) in b.iter_mut().enumerate() {
            *v = rhs[i];
        }
        if b.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::LinearSolve("non-finite solution".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assembly_sums_duplicates_and_drops_zeros() {
        let m = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, 1.0), (1, 0, -1.0), (1, 1, 4.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.mul_vec(&[1.0, 1.0]), vec![3.0, 4.0]);
        assert_eq!(m.tr_mul_vec(&[1.0, 2.0]), vec![3.0, 8.0]);
    }

    #[test]
    fn lu_solves_both_ways() {
        let m = SparseMatrix::from_triplets(3, 3, &[(0, 0, 4.0), (0, 1, -1.0), (1, 0, -2.0), (1, 1, 4.0), (2, 1, -1.0), (2, 2, 3.0)]);
        let lu = LuFactor::new(&m).unwrap();
        let x = [1.0, -2.0, 0.5];
        let mut b = m.mul_vec(&x);
        lu.solve_in_place(&mut b).unwrap();
        for (a, e) in b.iter().zip(&x) {
            assert!((a - e).abs() < 1e-14);
        }
        let mut b = m.tr_mul_vec(&x);
        lu.solve_transpose_in_place(&mut b).unwrap();
        for (a, e) in b.iter().zip(&x) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let m = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 1.0)]);
        let res = LuFactor::new(&m).and_then(|lu| {
            let mut b = vec![1.0, 2.0];
            lu.solve_in_place(&mut b)
        });
        assert!(res.is_err());
    }

    #[test]
    fn coordinate_dump() {
        let m = SparseMatrix::from_triplets(2, 2, &[(1, 0, 0.5)]);
        let mut out = Vec::new();
        m.write_coordinate(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "# 2 2 1\n1 0 5e-1\n");
    }
}
