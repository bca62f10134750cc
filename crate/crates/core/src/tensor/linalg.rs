use nalgebra::DMatrix;

use super::Tensor;
use crate::error::{Error, Result};

/// Ridge used when the caller does not pick one, relative to the mean
/// diagonal of the Gram matrix `X Xᵀ`.
pub const DEFAULT_RIDGE_SCALE: f64 = 1e-8;

/// Pivots below this fraction of the largest Gram diagonal are treated as zero.
const PIVOT_TOLERANCE: f64 = 1e-12;

/// Matrix product with a fixed summation order: each output entry accumulates
/// over the inner index in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix_dims()?;
    let (k2, n) = b.as_matrix_dims()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {m}×{k} · {k2}×{n}"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Subtracts each row's mean across samples, i.e. `X · H_n` for a
/// features×samples matrix.
pub fn center_columns(x: &Tensor) -> Result<Tensor> {
    let (p, n) = x.as_matrix_dims()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    Tensor::from_parts(vec![p, n], out)
}

/// `DEFAULT_RIDGE_SCALE · tr(X Xᵀ) / p` for a features×samples matrix.
pub fn default_ridge(x: &Tensor) -> f64 {
    ridge_for_scale(x, DEFAULT_RIDGE_SCALE)
}

/// `scale · tr(X Xᵀ) / p` for a features×samples matrix.
pub fn ridge_for_scale(x: &Tensor, scale: f64) -> f64 {
    let p = x.rows() as f64;
    let trace: f64 = x.data().iter().map(|v| v * v).sum();
    scale * trace / p
}

/// Least-squares projection `A = Y Xᵀ (X Xᵀ + ridge·I)⁻¹` mapping the columns
/// of `x` (p×n) onto those of `y` (q×n). Returns a q×p matrix.
///
/// The regularized Gram matrix is factored with Cholesky. When it is not
/// positive definite (only possible with `ridge == 0` and rank-deficient `x`)
/// the minimum-norm least-squares solution `Y X⁺` is returned instead.
pub fn solve_projection(x: &Tensor, y: &Tensor, ridge: f64) -> Result<Tensor> {
    let (p, n) = x.as_matrix_dims()?;
    let (q, n2) = y.as_matrix_dims()?;
    if n != n2 {
        return Err(Error::dim(format!(
            "projection needs equal sample counts, got {n} and {n2}"
        )));
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::Numeric(format!("ridge must be finite and ≥ 0, got {ridge}")));
    }

    let xt = x.transpose()?;
    let mut gram = matmul(x, &xt)?.into_data();
    for i in 0..p {
        gram[i * p + i] += ridge;
    }
    // A G = Y Xᵀ with G symmetric, so G Aᵀ = X Yᵀ.
    let rhs = matmul(x, &y.transpose()?)?;

    let at = match cholesky(&gram, p) {
        Some(l) => cholesky_solve(&l, p, rhs.data(), q),
        None => return min_norm_projection(x, y),
    };
    Tensor::from_parts(vec![p, q], at)?.transpose()
}

/// Lower-triangular Cholesky factor of a p×p row-major SPD matrix, or `None`
/// when a pivot falls below tolerance.
fn cholesky(g: &[f64], p: usize) -> Option<Vec<f64>> {
    let max_diag = (0..p).map(|i| g[i * p + i]).fold(0.0, f64::max);
    if max_diag <= 0.0 {
        return None;
    }
    let tol = PIVOT_TOLERANCE * max_diag;
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        let mut d = g[j * p + j];
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if d <= tol {
            return None;
        }
        let djj = d.sqrt();
        l[j * p + j] = djj;
        for i in j + 1..p {
            let mut s = g[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ Z = B` for a p×q right-hand side.
fn cholesky_solve(l: &[f64], p: usize, b: &[f64], q: usize) -> Vec<f64> {
    let mut z = b.to_vec();
    for c in 0..q {
        for i in 0..p {
            let mut s = z[i * q + c];
            for k in 0..i {
                s -= l[i * p + k] * z[k * q + c];
            }
            z[i * q + c] = s / l[i * p + i];
        }
        for i in (0..p).rev() {
            let mut s = z[i * q + c];
            for k in i + 1..p {
                s -= l[k * p + i] * z[k * q + c];
            }
            z[i * q + c] = s / l[i * p + i];
        }
    }
    z
}

fn min_norm_projection(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (p, n) = x.as_matrix_dims()?;
    let (q, _) = y.as_matrix_dims()?;
    let xm = DMatrix::from_row_slice(p, n, x.data());
    let ym = DMatrix::from_row_slice(q, n, y.data());
    let svd = xm.svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = f64::EPSILON * (p.max(n) as f64) * max_sv;
    let pinv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::Numeric(format!("pseudoinverse failed: {e}")))?;
    let a = ym * pinv;
    let mut data = Vec::with_capacity(q * p);
    for i in 0..q {
        for j in 0..p {
            data.push(a[(i, j)]);
        }
    }
    Tensor::from_parts(vec![q, p], data)
}
