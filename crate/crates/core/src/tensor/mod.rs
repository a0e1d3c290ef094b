//! Dense tensors and the numeric kernels the rest of the crate builds on.
//!
//! [`Tensor`] stores row-major `f32` data of rank 1 to 3. Verification-grade
//! routines (singular values, eigendecompositions, CCA) run on the `f64`
//! [`Matrix`] type instead.

mod kmeans;
mod linalg;
mod rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kmeans::{kmeans, kmeans_1d, KMeans, KMEANS_MAX_ITERS, KMEANS_RESTARTS, KMEANS_TOL};
pub use linalg::{symmetric_eigen, top_singular_value, Matrix, SVD_MAX_ITERS, SVD_TOL};
pub use rng::{derive_seed, splitmix64, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::dim(format!(
            "rank must be 1..=3, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    /// Panics on an invalid shape.
    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of rows when viewed as a matrix: product of all but the last dim.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn transpose(&self) -> Result<Self> {
        let [r, c] = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// True when both tensors hold the same shape and bit-identical data.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(Error::dim(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    fn expect_rank1(&self, op: &str) -> Result<()> {
        if self.rank() != 1 {
            return Err(Error::dim(format!(
                "{op} expects a rank-1 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Matrix product with `f32` accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([m, k], [k2, n]) = (a.dims2()?, b.dims2()?);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul {:?} x {:?}: inner dimensions differ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Matrix product with `f64` accumulation, returned as an `f64` matrix.
pub fn matmul_f64(a: &Tensor, b: &Tensor) -> Result<Matrix> {
    Matrix::from_tensor(a)?.matmul(&Matrix::from_tensor(b)?)
}

/// Linear-interpolation quantile of a slice (type-7 convention).
///
/// With the values sorted ascending and `h = (n - 1) p`, the result is
/// `v[floor(h)] + (h - floor(h)) (v[ceil(h)] - v[floor(h)])`.
pub fn quantile_slice(values: &[f32], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("quantile of an empty tensor"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!(
            "quantile probability {p} outside [0, 1]"
        )));
    }
    let mut sorted: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    if sorted.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("quantile input".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let (a, b) = (sorted[lo], sorted[hi]);
    // Clamping keeps the result monotone in p despite rounding in the lerp.
    Ok((a + (h - lo as f64) * (b - a)).clamp(a, b))
}

pub fn quantile(v: &Tensor, p: f64) -> Result<f64> {
    v.expect_rank1("quantile")?;
    quantile_slice(v.data(), p)
}

/// Largest singular value of a rank-2 tensor, computed in `f64`.
pub fn svd_top(m: &Tensor) -> Result<f64> {
    top_singular_value(&Matrix::from_tensor(m)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn stats_slice(values: &[f64]) -> Result<Stats> {
    if values.is_empty() {
        return Err(Error::domain("statistics of an empty vector"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    Ok(Stats {
        mean,
        std: var.sqrt(),
        min,
        max,
    })
}

pub fn stats(v: &Tensor) -> Result<Stats> {
    v.expect_rank1("stats")?;
    stats_slice(&v.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![2, 3, 1], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let b = Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn quantile_examples() {
        let v = Tensor::from_vec(vec![0.05, 0.1, 0.3, 0.5]).unwrap();
        assert!((quantile(&v, 0.5).unwrap() - 0.2).abs() < 1e-7);
        assert_eq!(quantile(&v, 0.0).unwrap(), 0.05f32 as f64);
        assert_eq!(quantile(&v, 1.0).unwrap(), 0.5);
        assert!(quantile_slice(&[], 0.5).is_err());
        assert!(quantile(&v, 1.5).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = stats(&Tensor::from_vec(vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        assert_eq!((s.mean, s.std, s.min, s.max), (1.0, 0.0, 1.0, 1.0));
        let s = stats(&Tensor::from_vec(vec![0.0, 2.0]).unwrap()).unwrap();
        assert_eq!((s.mean, s.std, s.min, s.max), (1.0, 1.0, 0.0, 2.0));
    }

    #[test]
    fn svd_top_diagonal() {
        assert!((svd_top(&Tensor::identity(3)).unwrap() - 1.0).abs() < 1e-12);
        let mut d = Tensor::zeros(&[3, 3]);
        d.data_mut()[0] = 3.0;
        d.data_mut()[4] = 2.0;
        d.data_mut()[8] = 1.0;
        assert!((svd_top(&d).unwrap() - 3.0).abs() < 1e-9);
    }
}
