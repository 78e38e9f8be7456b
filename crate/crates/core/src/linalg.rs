//! Dense double-precision matrix kernels: products, SPD factorization and
//! inversion, triangular masking. Everything else in the crate sits on top
//! of these.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting NaN/Inf entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn diag(&self) -> Vec<f64> {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.get(i, i)).collect()
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Lower-triangular matrix with strictly positive diagonal, stored full.
#[derive(Debug, Clone)]
pub struct LowerTriangular {
    n: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    /// Wraps full row-major storage; entries above the diagonal must be zero
    /// and diagonal entries strictly positive.
    pub fn from_full(n: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != n * n {
            return Err(LinalgError::Shape(format!(
                "data length {} != {n}x{n}",
                data.len()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if data[i * n + j] != 0.0 {
                    return Err(LinalgError::Shape(format!(
                        "nonzero entry above diagonal at ({i},{j})"
                    )));
                }
            }
            // Negated form on purpose: also rejects NaN pivots.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(data[i * n + i] > 0.0) {
                return Err(LinalgError::NotPositiveDefinite { pivot: i });
            }
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn diag(&self, i: usize) -> f64 {
        self.data[i * self.n + i]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.n,
            cols: self.n,
            data: self.data.clone(),
        }
    }

    /// Inverse of the triangular factor by forward substitution; the result
    /// is again lower-triangular.
    pub fn invert(&self) -> LowerTriangular {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        for j in 0..n {
            inv[j * n + j] = 1.0 / self.data[j * n + j];
            for i in (j + 1)..n {
                let mut s = 0.0;
                for k in j..i {
                    s += self.data[i * n + k] * inv[k * n + j];
                }
                inv[i * n + j] = -s / self.data[i * n + i];
            }
        }
        LowerTriangular { n, data: inv }
    }
}

/// Dense product `A * B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::Shape(format!(
            "matmul {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    let body = |(i, row_out): (usize, &mut [f64])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= 1 << 22 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// Cholesky factor `G` with `G * G^T = S + jitter * I`.
pub fn cholesky_lower(s: &Matrix, jitter: f64) -> Result<LowerTriangular, LinalgError> {
    if s.rows != s.cols {
        return Err(LinalgError::Shape(format!(
            "cholesky of non-square {}x{}",
            s.rows, s.cols
        )));
    }
    let n = s.rows;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s.get(i, j);
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= g[i * n + k] * g[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(LinalgError::NotPositiveDefinite { pivot: i });
                }
                g[i * n + i] = sum.sqrt();
            } else {
                g[i * n + j] = sum / g[j * n + j];
            }
        }
    }
    Ok(LowerTriangular { n, data: g })
}

/// Inverse of a symmetric positive definite matrix via Cholesky solve.
pub fn invert_spd(s: &Matrix) -> Result<Matrix, LinalgError> {
    let g = cholesky_lower(s, 0.0)?;
    let m = g.invert(); // S^-1 = M^T * M
    let n = g.n;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            // M columns i and j overlap from row max(i, j) downward.
            let mut sum = 0.0;
            for k in i..n {
                sum += m.data[k * n + i] * m.data[k * n + j];
            }
            out[i * n + j] = sum;
            out[j * n + i] = sum;
        }
    }
    Ok(Matrix {
        rows: n,
        cols: n,
        data: out,
    })
}

/// Strictly-upper-triangular mask: keeps entries with `j > i`, zeros the
/// diagonal and below.
pub fn strict_upper_hadamard(m: &Matrix) -> Result<Matrix, LinalgError> {
    if m.rows != m.cols {
        return Err(LinalgError::Shape(format!(
            "mask of non-square {}x{}",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            out.data[i * n + j] = m.data[i * n + j];
        }
    }
    Ok(out)
}
