//! Dense row-major matrices and feature vectors over `f64`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use crate::error::{check_len, Error, Result};

/// A dense vector, typically an embedding `G(x; θ)` or a raw input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        FeatureVector(v)
    }
}

impl Deref for FeatureVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for FeatureVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major dense matrix. Class-embedding heads are stored `d × C`, one class per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a `d × C` matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.len());
        let mut m = Matrix::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            m.set_col(j, c)?;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + j]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) -> Result<()> {
        check_len("column", self.rows, v.len())?;
        for (r, &x) in v.iter().enumerate() {
            self.data[r * self.cols + j] = x;
        }
        Ok(())
    }

    /// Adds `alpha * v` to column `j`.
    pub fn add_to_col(&mut self, j: usize, alpha: f64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (r, &x) in v.iter().enumerate() {
            self.data[r * self.cols + j] += alpha * x;
        }
    }

    /// Dot product of column `j` with `v`.
    pub fn col_dot(&self, j: usize, v: &[f64]) -> f64 {
        v.iter()
            .enumerate()
            .map(|(r, &x)| self.data[r * self.cols + j] * x)
            .sum()
    }

    pub fn col_norm(&self, j: usize) -> f64 {
        libm::sqrt(
            (0..self.rows)
                .map(|r| {
                    let x = self.data[r * self.cols + j];
                    x * x
                })
                .sum(),
        )
    }

    /// `self · v` for a `rows × cols` matrix and a `cols`-vector.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec", self.cols, v.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ · v` for a `rows`-vector.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec_t", self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * vr;
            }
        }
        Ok(out)
    }

    /// Keeps the columns listed in `cols`, in that order.
    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (jj, &j) in cols.iter().enumerate() {
                m.data[r * cols.len() + jj] = self.data[r * self.cols + j];
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with every column scaled to unit L2 norm. Zero columns are rejected.
    pub fn normalized_cols(&self) -> Result<Matrix> {
        let mut m = self.clone();
        for j in 0..self.cols {
            let n = self.col_norm(j);
            if n == 0.0 {
                return Err(Error::Degenerate("zero-norm embedding column"));
            }
            for r in 0..self.rows {
                m.data[r * self.cols + j] /= n;
            }
        }
        Ok(m)
    }
}

impl core::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine similarity, `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
