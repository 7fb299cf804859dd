//! Internal linear-algebra helpers for the scoring equations.
//!
//! Centered spline blocks carry one exact redundancy per dimension (their
//! columns sum to zero pointwise because the raw basis is a partition of
//! unity), so normal matrices built on the full coefficient layout are
//! structurally singular. All solves go through a per-dimension sum-to-zero
//! contrast; reported spline coefficients are the canonical representative
//! whose block sums vanish, which leaves fitted values, component curves and
//! all inference targets unchanged.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative ridge added to a scoring matrix when its factorization fails.
const RIDGE_SCALE: f64 = 1e-10;

/// Orthonormal basis of the sum-to-zero subspace of R^q (Helmert columns),
/// as a `q x (q-1)` matrix.
pub(crate) fn sum_zero_contrast(q: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(q, q.saturating_sub(1));
    for j in 1..q {
        let norm = (j as f64 * (j as f64 + 1.0)).sqrt();
        for i in 0..j {
            c[(i, j - 1)] = 1.0 / norm;
        }
        c[(j, j - 1)] = -(j as f64) / norm;
    }
    c
}

/// Block-diagonal reduction for the stacked parameter vector: identity on
/// the `k` parametric coefficients, a sum-to-zero contrast on each spline
/// block. Shape `p x (p - dims.len())`.
pub(crate) fn block_reduction(k: usize, dims: &[usize]) -> DMatrix<f64> {
    let p: usize = k + dims.iter().sum::<usize>();
    let p_red: usize = k + dims.iter().map(|&q| q - 1).sum::<usize>();
    let mut g = DMatrix::zeros(p, p_red);
    for i in 0..k {
        g[(i, i)] = 1.0;
    }
    let mut row = k;
    let mut col = k;
    for &q in dims {
        let c = sum_zero_contrast(q);
        g.view_mut((row, col), (q, q - 1)).copy_from(&c);
        row += q;
        col += q - 1;
    }
    g
}

/// Outcome flags from a guarded symmetric positive definite solve.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SolveFlags {
    pub ridge_used: bool,
}

/// Solve `s * x = rhs` for a symmetric (near-)positive-definite `s` with
/// possibly many right-hand sides. On factorization failure the numerical
/// rank is inspected: genuine rank deficiency is an error reporting the null
/// space dimension; otherwise a small relative ridge is added and the solve
/// retried.
pub(crate) fn solve_spd(
    s: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    flags: &mut SolveFlags,
) -> Result<DMatrix<f64>> {
    let sym = symmetrize(s);
    if let Some(chol) = sym.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    let p = sym.nrows();
    let eig = sym.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = max_eig * p as f64 * f64::EPSILON * 16.0;
    let rank = eig.eigenvalues.iter().filter(|&&v| v > tol).count();
    if rank < p {
        return Err(Error::SingularDesign { nullity: p - rank });
    }
    let ridge = RIDGE_SCALE * sym.trace() / p as f64;
    let ridged = &sym + DMatrix::identity(p, p) * ridge;
    match ridged.cholesky() {
        Some(chol) => {
            flags.ridge_used = true;
            Ok(chol.solve(rhs))
        }
        None => Err(Error::SingularDesign { nullity: p - rank }),
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
