use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{symmetric_eigen, Matrix, Tensor};

/// Ridge added to each covariance, relative to its mean diagonal.
pub const RIDGE_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CCAResult {
    /// First canonical correlation, clipped to `[0, 1]`.
    pub rho1: f64,
    pub ridge_x: f64,
    pub ridge_y: f64,
    pub dims: (usize, usize),
}

pub fn cca_rho1(x: &Tensor, y: &Tensor) -> Result<CCAResult> {
    cca_rho1_matrix(Matrix::from_tensor(x)?, Matrix::from_tensor(y)?)
}

/// `C^(-1/2)` of a symmetric positive definite matrix.
fn inv_sqrt(c: &Matrix) -> Result<Matrix> {
    let (vals, vecs) = symmetric_eigen(c)?;
    let n = vals.len();
    let floor = vals[0].abs() * f64::EPSILON;
    let mut out = Matrix::zeros(n, n);
    for (k, &l) in vals.iter().enumerate() {
        let f = 1.0 / l.max(floor).sqrt();
        for i in 0..n {
            let vik = vecs[(i, k)] * f;
            for j in 0..n {
                out[(i, j)] += vik * vecs[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Centered, ridge-regularized covariance `XᵀX / (n - 1) + εI` and its `ε`.
fn covariance(x: &Matrix) -> Result<(Matrix, f64)> {
    let n = x.rows() as f64;
    let mut c = x.t_matmul(x)?.scale(1.0 / (n - 1.0));
    let ridge = RIDGE_SCALE * c.trace() / x.cols() as f64;
    for i in 0..x.cols() {
        c[(i, i)] += ridge;
    }
    Ok((c, ridge))
}

/// First canonical correlation between the columns of `x` (n x p) and `y`
/// (n x q).
///
/// Both are centered; `ρ₁` is the largest singular value of
/// `Cxx^(-1/2) Cxy Cyy^(-1/2)`, obtained from the top eigenvalue of its
/// Gram matrix. A side with zero variance has no correlation and gives 0.
pub fn cca_rho1_matrix(mut x: Matrix, mut y: Matrix) -> Result<CCAResult> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::domain(format!(
            "canonical correlation needs n >= 2, got {n}"
        )));
    }
    if y.rows() != n {
        return Err(Error::dim(format!("{n} rows in X, {} in Y", y.rows())));
    }
    if x.cols() == 0 || y.cols() == 0 {
        return Err(Error::dim("canonical correlation of an empty feature set"));
    }
    if x.data().iter().chain(y.data()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("canonical correlation input".into()));
    }
    x.center_columns();
    y.center_columns();
    let (cxx, ridge_x) = covariance(&x)?;
    let (cyy, ridge_y) = covariance(&y)?;
    let dims = (x.cols(), y.cols());
    if ridge_x == 0.0 || ridge_y == 0.0 {
        return Ok(CCAResult {
            rho1: 0.0,
            ridge_x,
            ridge_y,
            dims,
        });
    }
    let cxy = x.t_matmul(&y)?.scale(1.0 / (n as f64 - 1.0));
    let k = inv_sqrt(&cxx)?.matmul(&cxy)?.matmul(&inv_sqrt(&cyy)?)?;
    // The smaller Gram matrix has the same nonzero spectrum.
    let gram = if k.rows() <= k.cols() {
        k.matmul(&k.transpose())?
    } else {
        k.t_matmul(&k)?
    };
    let (vals, _) = symmetric_eigen(&gram)?;
    let rho1 = vals[0].max(0.0).sqrt().clamp(0.0, 1.0);
    Ok(CCAResult {
        rho1,
        ridge_x,
        ridge_y,
        dims,
    })
}
