//! Dense row-major `f64` arrays and the matrix kernels the tape builds on.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major dense array. Shape entries are all positive and their product is
/// `data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(alloc::format!(
                "shape {shape:?} must be non-empty with positive extents"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("array", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "shape {shape:?} must be non-empty with positive extents"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `r × c` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Empty("from_rows"));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("from_rows", &[r, c], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::new(&[r, c], data)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(&[1, values.len()], values.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of rows when the array is viewed as `(len / cols) × cols`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|x| x * x).sum())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += other` elementwise; shapes must hold the same number of elements.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::shape(op, &self.shape, &[0, 0]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(&[m, n], out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul_nt")?;
        let (n, k2) = other.require_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&self.data, &other.data, &mut out, m, k, n);
        Self::new(&[m, n], out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.require_matrix("matmul_tn")?;
        let (k2, n) = other.require_matrix("matmul_tn")?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm_tn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(&[m, n], out)
    }
}

// out[m×n] += a · b, with a and b addressed through (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k as isize, 1), b, (n as isize, 1), out, m, k, n);
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k as isize, 1), b, (1, k as isize), out, m, k, n);
}

// out[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, (1, m as isize), b, (n as isize, 1), out, m, k, n);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Array::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Array::new(&[0, 2], vec![]).is_err());
        assert!(Array::new(&[], vec![1.0]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Array::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Array::new(&[3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        let bt = b.transpose().unwrap();
        assert_eq!(a.matmul_nt(&bt).unwrap(), ab);
        let at = a.transpose().unwrap();
        assert_eq!(at.matmul_tn(&b).unwrap(), ab);
    }

    #[test]
    fn matmul_names_both_shapes() {
        let a = Array::zeros(&[2, 3]);
        let err = a.matmul(&a).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
    }

    fn naive(a: &Array, b: &Array) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a.get(i, p) * b.get(p, j)).sum();
            }
        }
        out
    }

    #[test]
    fn tiled_kernel_matches_triple_loop_on_ragged_shapes() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for (m, k, n) in [(1, 1, 1), (3, 5, 7), (4, 8, 8), (9, 3, 17), (13, 32, 24), (5, 1, 9)] {
            let a = Array::new(&[m, k], (0..m * k).map(|_| next()).collect()).unwrap();
            let b = Array::new(&[k, n], (0..k * n).map(|_| next()).collect()).unwrap();
            let want = naive(&a, &b);
            for got in [
                a.matmul(&b).unwrap(),
                a.matmul_nt(&b.transpose().unwrap()).unwrap(),
                a.transpose().unwrap().matmul_tn(&b).unwrap(),
            ] {
                for (x, y) in got.data().iter().zip(&want) {
                    assert!((x - y).abs() <= 1e-13, "{m}x{k}x{n}");
                }
            }
        }
    }
}
