//! Small dense linear-algebra helpers shared by the filters and the
//! portfolio solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{DdnmError, Result};

/// Replaces `a` by `(a + a') / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let mut s = a.clone();
    symmetrize(&mut s);
    s.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// `x' A y`.
pub fn bilinear(x: &DVector<f64>, a: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        if x[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..y.len() {
            row += a[(i, j)] * y[j];
        }
        acc += x[i] * row;
    }
    acc
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| DdnmError::NotPositiveDefinite(format!("{}x{}", a.nrows(), a.ncols())))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Solves a general square system by LU; errors when singular.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| DdnmError::RankDeficient(format!("singular {}x{} system", a.nrows(), a.ncols())))
}

/// Orthonormal basis (columns) of the null space of `a`.
pub fn null_space(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // Pad to at least n rows so the SVD returns a full V.
    let rows = a.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let scale = svd.singular_values.max().max(1.0);
    let mut cols = Vec::new();
    for (i, sv) in svd.singular_values.iter().enumerate() {
        if *sv <= tol * scale {
            cols.push(v_t.row(i).transpose());
        }
    }
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Numerical rank with a relative tolerance.
pub fn rank(a: &DMatrix<f64>, tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let scale = sv.max();
    if scale == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * scale).count()
}

/// Column rank after scaling every column to unit norm, so constraints of
/// very different magnitudes are judged alike.
pub fn column_rank(a: &DMatrix<f64>, tol: f64) -> usize {
    let mut scaled = a.clone();
    for mut c in scaled.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    rank(&scaled, tol)
}
