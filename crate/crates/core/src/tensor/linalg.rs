use crate::error::{Error, Result};

use super::{Rng, Tensor};

/// Iteration cap for [`top_singular_value`].
pub const SVD_MAX_ITERS: usize = 1000;
/// Relative change of the Rayleigh quotient that ends power iteration.
pub const SVD_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense row-major `f64` matrix used on verification-grade paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [r, c] = t.dims2()?;
        Self::from_vec(r, c, t.to_f64())
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = Self::zeros(self.rows, n);
        for i in 0..self.rows {
            let dst = &mut out.data[i * n..(i + 1) * n];
            for p in 0..self.cols {
                let a = self.data[i * self.cols + p];
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(p)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim(format!(
                "transposed matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (p, q) = (self.cols, other.cols);
        let mut out = Self::zeros(p, q);
        for r in 0..self.rows {
            let (a, b) = (self.row(r), other.row(r));
            for (i, &ai) in a.iter().enumerate() {
                let dst = &mut out.data[i * q..(i + 1) * q];
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(mut self, s: f64) -> Self {
        self.data.iter_mut().for_each(|x| *x *= s);
        self
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Subtract each column's mean.
    pub fn center_columns(&mut self) {
        if self.rows == 0 {
            return;
        }
        let mut means = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, &x) in means.iter_mut().zip(self.row(r)) {
                *m += x;
            }
        }
        let n = self.rows as f64;
        means.iter_mut().for_each(|m| *m /= n);
        for r in 0..self.rows {
            for (x, m) in self.data[r * self.cols..(r + 1) * self.cols]
                .iter_mut()
                .zip(&means)
            {
                *x -= m;
            }
        }
    }

    /// Keep only the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        let mut out = Self::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (j, &c) in cols.iter().enumerate() {
                out[(r, j)] = self[(r, c)];
            }
        }
        out
    }

    fn mat_vec(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    fn t_mat_vec(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value by power iteration on `mᵀm`.
///
/// Iterates `v <- mᵀm v / |mᵀm v|` from a fixed pseudo-random start and stops
/// once the Rayleigh quotient `|m v|²` changes by at most [`SVD_TOL`]
/// relative, or fails after [`SVD_MAX_ITERS`] iterations.
pub fn top_singular_value(m: &Matrix) -> Result<f64> {
    if m.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("svd_top input".into()));
    }
    let (r, c) = (m.rows, m.cols);
    let mut rng = Rng::new(0x5EED_0F_5BD);
    let mut v: Vec<f64> = (0..c).map(|_| rng.next_f64() + 0.5).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut mv = vec![0.0; r];
    let mut w = vec![0.0; c];
    let mut lambda = 0.0;
    for it in 0..SVD_MAX_ITERS {
        m.mat_vec(&v, &mut mv);
        let next = mv.iter().map(|x| x * x).sum::<f64>();
        m.t_mat_vec(&mv, &mut w);
        let wn = norm(&w);
        if wn == 0.0 {
            return Ok(0.0);
        }
        if it > 0 && (next - lambda).abs() <= SVD_TOL * next {
            return Ok(next.sqrt());
        }
        lambda = next;
        v.iter_mut().zip(&w).for_each(|(x, y)| *x = y / wn);
    }
    // Residual |mᵀm v - λ v| of the last iterate.
    m.mat_vec(&v, &mut mv);
    m.t_mat_vec(&mv, &mut w);
    let residual = norm(
        &w.iter()
            .zip(&v)
            .map(|(a, b)| a - lambda * b)
            .collect::<Vec<_>>(),
    );
    Err(Error::Numeric {
        message: format!("power iteration did not converge in {SVD_MAX_ITERS} iterations"),
        residual,
    })
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the second matrix.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows;
    if m.cols != n {
        return Err(Error::dim(format!(
            "eigendecomposition of {}x{} matrix",
            n, m.cols
        )));
    }
    if m.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("eigendecomposition input".into()));
    }
    let mut a = m.clone();
    // Symmetrize to remove rounding asymmetry from the caller.
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = s;
            a[(j, i)] = s;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = norm(&a.data).max(f64::MIN_POSITIVE);

    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += a[(i, j)] * a[(i, j)];
            }
        }
        s.sqrt()
    };

    let mut converged = off(&a) <= 1e-15 * scale;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        sweep += 1;
        converged = off(&a) <= 1e-15 * scale;
    }
    if !converged {
        return Err(Error::Numeric {
            message: format!("Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"),
            residual: off(&a),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_reconstructs() {
        let m = Matrix::from_vec(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]).unwrap();
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        // V diag(λ) Vᵀ == m
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| vecs[(i, k)] * vals[k] * vecs[(j, k)]).sum();
                assert!((r - m[(i, j)]).abs() < 1e-12);
            }
        }
        assert!((vals.iter().sum::<f64>() - m.trace()).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_zero_singular_value() {
        assert_eq!(top_singular_value(&Matrix::zeros(3, 2)).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let m = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(top_singular_value(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn t_matmul_matches_transpose() {
        let a = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 1, vec![1.0, -1.0, 2.0]).unwrap();
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
    }
}
