//! Per-layer calibration: Hessian with damping, column ordering, the
//! inverse-Cholesky factor and the precomputed correction matrices.

use thiserror::Error;

use crate::linalg::{self, LinalgError, LowerTriangular, Matrix};
use crate::problem::LayerProblem;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("calibration failed: {0}")]
    Linalg(#[from] LinalgError),
    #[error("damped Hessian is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("permutation length {got} does not match {want} columns")]
    PermLength { got: usize, want: usize },
}

/// Immutable calibration outputs for one layer, in (possibly permuted)
/// column order.
#[derive(Debug, Clone)]
pub struct CalibState {
    /// Undamped Hessian `X X^T`.
    pub hessian: Matrix,
    /// Lower-triangular `L` with `L L^T = (H + lambda I)^-1`.
    pub l: LowerTriangular,
    /// `(X~ - X) X^T`.
    pub dxxt: Matrix,
    /// Correction matrix for the input-difference residual; strictly
    /// upper-triangular, exactly zero when both flows coincide.
    pub p1: Matrix,
    /// Correction matrix for the compensation-aware residual.
    pub p2: Matrix,
    /// Column permutation applied to the problem (identity unless
    /// act_order was requested).
    pub perm: Vec<usize>,
    pub lambda: f64,
}

/// Hessian `H = X X^T` and the damping value derived from it:
/// `lambda_frac * mean(diag H)`, floored to keep the damped matrix PD even
/// for degenerate inputs.
pub fn build_hessian(x: &Matrix, lambda_frac: f64) -> (Matrix, f64) {
    let h = linalg::matmul(x, &x.transpose()).expect("X X^T shapes always agree");
    let n = h.rows();
    let mean_diag = h.diag().iter().sum::<f64>() / n as f64;
    let mean_abs = h.data().iter().map(|v| v.abs()).sum::<f64>() / (n * n) as f64;
    let floor = 1e-8 * (1.0 + mean_abs);
    let lambda = (lambda_frac * mean_diag).max(floor);
    (h, lambda)
}

/// Column indices sorted by Hessian diagonal, descending; ties keep the
/// original order.
pub fn act_order_permutation(h: &Matrix) -> Vec<usize> {
    let diag = h.diag();
    let mut idx: Vec<usize> = (0..diag.len()).collect();
    idx.sort_by(|&a, &b| diag[b].partial_cmp(&diag[a]).unwrap().then(a.cmp(&b)));
    idx
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `out[:, j] = m[:, perm[j]]`.
pub fn permute_columns(m: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let src = m.row(i);
        let dst = out.row_mut(i);
        for (j, &p) in perm.iter().enumerate() {
            dst[j] = src[p];
        }
    }
    out
}

/// `out[i, :] = m[perm[i], :]`.
pub fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(p));
    }
    out
}

/// Applies one permutation consistently: W columns, X rows and FP-input
/// rows all reordered the same way, so `W X` is invariant.
pub fn apply_permutation(
    problem: &LayerProblem,
    perm: &[usize],
) -> Result<LayerProblem, CalibError> {
    let n = problem.in_features();
    if perm.len() != n {
        return Err(CalibError::PermLength {
            got: perm.len(),
            want: n,
        });
    }
    Ok(LayerProblem {
        weights: permute_columns(&problem.weights, perm),
        quant_input: permute_rows(&problem.quant_input, perm),
        fp_input: permute_rows(&problem.fp_input, perm),
    })
}

/// Lower-triangular `L` with `L L^T = (H + lambda I)^-1`, computed without
/// forming the full inverse: factor the flipped damped Hessian, invert the
/// triangular factor, and flip back. The flip makes the trailing principal
/// submatrices of the inverse come out as `L[q:, q:] L[q:, q:]^T`, which is
/// what the column updates rely on.
pub fn inverse_cholesky(h: &Matrix, lambda: f64) -> Result<LowerTriangular, CalibError> {
    let n = h.rows();
    let mut flipped = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            flipped.set(i, j, h.get(n - 1 - i, n - 1 - j));
        }
    }
    let g = linalg::cholesky_lower(&flipped, lambda).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { pivot } => CalibError::NotPositiveDefinite {
            pivot: n - 1 - pivot,
        },
        other => CalibError::Linalg(other),
    })?;
    let m = g.invert();
    // L[i][j] = M[n-1-j][n-1-i] is lower-triangular with positive diagonal.
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            l[i * n + j] = m.get(n - 1 - j, n - 1 - i);
        }
    }
    Ok(LowerTriangular::from_full(n, l)?)
}

/// One-line precompute of a correction matrix:
/// `P = ((M L) o U) L^T` with `U` the strictly-upper mask. Row `i` of the
/// result equals `M[i, :] L[i+1:, i+1:] L[i+1:, i+1:]^T` embedded in
/// columns `i+1:`.
pub fn precompute_p(m: &Matrix, l: &LowerTriangular) -> Result<Matrix, CalibError> {
    let n = l.n();
    if m.rows() != n || m.cols() != n {
        return Err(CalibError::Linalg(LinalgError::Shape(format!(
            "P precompute: M is {}x{}, L is {n}x{n}",
            m.rows(),
            m.cols()
        ))));
    }
    let lm = l.to_matrix();
    let ml = linalg::matmul(m, &lm)?;
    let masked = linalg::strict_upper_hadamard(&ml)?;
    Ok(linalg::matmul(&masked, &lm.transpose())?)
}

/// Full calibration for one layer. Returns the state together with the
/// permuted problem the engine should run on.
pub fn calibrate(
    problem: &LayerProblem,
    lambda_frac: f64,
    act_order: bool,
) -> Result<(CalibState, LayerProblem), CalibError> {
    let (h0, lambda) = build_hessian(&problem.quant_input, lambda_frac);
    let n = h0.rows();
    let perm = if act_order {
        act_order_permutation(&h0)
    } else {
        (0..n).collect()
    };
    let permuted = apply_permutation(problem, &perm)?;
    // H in permuted order is an index shuffle of the original product.
    let mut hessian = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            hessian.set(i, j, h0.get(perm[i], perm[j]));
        }
    }
    let dx = permuted.fp_input.sub(&permuted.quant_input)?;
    let dxxt = linalg::matmul(&dx, &permuted.quant_input.transpose())?;
    let l = inverse_cholesky(&hessian, lambda)?;
    let p1 = precompute_p(&dxxt, &l)?;
    let mut h_plus = hessian.clone();
    for (a, b) in h_plus.data_mut().iter_mut().zip(dxxt.data()) {
        *a += b;
    }
    let p2 = precompute_p(&h_plus, &l)?;
    Ok((
        CalibState {
            hessian,
            l,
            dxxt,
            p1,
            p2,
            perm,
            lambda,
        },
        permuted,
    ))
}
