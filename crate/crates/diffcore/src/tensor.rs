//! Dense row-major tensors and the raw kernels the tape is built on.

use crate::error::ShapeError;

/// A dense row-major array of `f64` scalars.
///
/// Most tape operations treat a tensor as a matrix of `rows() x cols()`
/// where `cols()` is the last extent and `rows()` the product of the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self, ShapeError> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(ShapeError::DataLength {
                dims: dims.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Builds a tensor, panicking when `data` does not fill `dims`.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        Self::new(dims, data).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Self::from_vec(&[1, values.len()], values.to_vec())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        if self.dims.is_empty() {
            1
        } else {
            self.dims[..self.dims.len() - 1].iter().product()
        }
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

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Self, ShapeError> {
        Self::new(dims, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.dims, other.dims, "zip_map shape mismatch");
        Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign length mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose2(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(&[n, m], out)
    }

    /// `self (m x k) * other (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, ShapeError> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(ShapeError::Mismatch {
                op: "matmul",
                left: self.dims.clone(),
                right: other.dims.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_vec(&[m, n], out))
    }
}

/// `c (m x n) += a (m x k) * b (k x n)`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (n, 1), c, m, k, n);
}

/// `c (m x n) += a (m x k) * b^T` where `b` is `n x k`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (1, k), c, m, k, n);
}

/// `c (m x n) += a^T * b` where `a` is `k x m` and `b` is `k x n`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (1, m), b, (n, 1), c, m, k, n);
}

/// Strided `c += a b`; strides are (row, column) in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access of a, b and c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn kernels_agree() {
        let a = Tensor::from_vec(&[3, 5], (0..15).map(|x| x as f64 * 0.3 - 2.0).collect());
        let b = Tensor::from_vec(&[5, 4], (0..20).map(|x| (x as f64).sin()).collect());
        let want = naive(&a, &b);
        for (x, y) in a.matmul(&b).unwrap().data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = b.transpose2();
        let mut c = vec![0.0; 12];
        matmul_nt(a.data(), bt.data(), &mut c, 3, 5, 4);
        for (x, y) in c.iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = a.transpose2();
        let mut c = vec![0.0; 12];
        matmul_tn(at.data(), b.data(), &mut c, 3, 5, 4);
        for (x, y) in c.iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&Tensor::zeros(&[2, 3])).is_err());
    }
}
