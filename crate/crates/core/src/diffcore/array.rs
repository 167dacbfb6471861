//! Dense row-major n-d arrays over f32/f64.
//!
//! This is deliberately minimal: shape + flat data, with just the operations
//! the tape needs. Matrix products dispatch to `matrixmultiply`'s sgemm/dgemm
//! kernels; everything else is straightforward loops.

use crate::error::{Error, Result};
use num_traits::Float;

/// Element type the engine is generic over.
///
/// f32 is the training dtype; f64 exists so gradient checks and numeric
/// oracles can run at full precision through the identical code path.
pub trait Scalar: Float + Copy + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: &'static str;
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// C = alpha * A(m,k) @ B(k,n) + beta * C, all row-major contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Array<F> {
    /// Build from shape and flat data; errors on length mismatch.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    /// All-zeros array.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array { shape, data: vec![F::zero(); n] }
    }

    /// All-`v` array.
    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Array { shape, data: vec![v; n] }
    }

    /// Scalar (0-d) array.
    pub fn scalar(v: F) -> Self {
        Array { shape: vec![], data: vec![v] }
    }

    /// Build from f64 values (handy for literals in tests and configs).
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Array::new(shape, data.iter().map(|&x| F::of_f64(x)).collect())
    }

    /// Convert element type through f64.
    pub fn cast<G: Scalar>(&self) -> Array<G> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of_f64(x.as_f64())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a 0-d or 1-element array.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on array of {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Array { shape, data: self.data.clone() })
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows (trailing-dim vectors) as chunks. Requires ndim >= 1.
    pub fn rows(&self) -> std::slice::Chunks<'_, F> {
        let d = *self.shape.last().unwrap_or(&1);
        self.data.chunks(d.max(1))
    }

    /// Last-axis length.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as (N, last_dim).
    pub fn n_rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Map to f64 data (for metrics and serialization).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Batched matmul: self (..., m, k) @ rhs (..., k, n) with identical
    /// leading dims, or rhs 2-d (k, n) broadcast over the batch.
    pub fn matmul(&self, rhs: &Array<F>) -> Result<Array<F>> {
        if self.ndim() < 2 || rhs.ndim() < 2 {
            return Err(Error::Shape("matmul needs ndim >= 2".into()));
        }
        let (m, k) = (self.shape[self.ndim() - 2], self.shape[self.ndim() - 1]);
        let (k2, n) = (rhs.shape[rhs.ndim() - 2], rhs.shape[rhs.ndim() - 1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims {k} vs {k2} (lhs {:?}, rhs {:?})",
                self.shape, rhs.shape
            )));
        }
        let batch: usize = self.shape[..self.ndim() - 2].iter().product();
        let rhs_batch: usize = rhs.shape[..rhs.ndim() - 2].iter().product();
        let rhs_bcast = rhs.ndim() == 2 && self.ndim() > 2;
        if !rhs_bcast && batch != rhs_batch {
            return Err(Error::Shape(format!(
                "matmul batch dims differ: lhs {:?}, rhs {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out_shape = self.shape[..self.ndim() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![F::zero(); batch * m * n];
        for b in 0..batch {
            let a = &self.data[b * m * k..(b + 1) * m * k];
            let rb = if rhs_bcast { &rhs.data[..] } else { &rhs.data[b * k * n..(b + 1) * k * n] };
            F::gemm(m, k, n, F::one(), a, rb, F::zero(), &mut out[b * m * n..(b + 1) * m * n]);
        }
        Array::new(out_shape, out)
    }

    /// Transpose the last two axes.
    pub fn transpose_last(&self) -> Result<Array<F>> {
        if self.ndim() < 2 {
            return Err(Error::Shape("transpose_last needs ndim >= 2".into()));
        }
        let (m, n) = (self.shape[self.ndim() - 2], self.shape[self.ndim() - 1]);
        let batch: usize = self.shape[..self.ndim() - 2].iter().product();
        let mut shape = self.shape.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let mut out = vec![F::zero(); self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        Array::new(shape, out)
    }

    /// Swap the first two axes of a 3-d array: (a, b, c) -> (b, a, c).
    pub fn swap_axes01(&self) -> Result<Array<F>> {
        if self.ndim() != 3 {
            return Err(Error::Shape(format!("swap_axes01 needs ndim == 3, got {:?}", self.shape)));
        }
        let (a, b, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![F::zero(); self.data.len()];
        for i in 0..a {
            for j in 0..b {
                let src = &self.data[(i * b + j) * c..(i * b + j + 1) * c];
                out[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(src);
            }
        }
        Array::new(vec![b, a, c], out)
    }

    /// Concatenate along axis 0. Trailing dims must match.
    pub fn concat0(parts: &[&Array<F>]) -> Result<Array<F>> {
        if parts.is_empty() {
            return Err(Error::Shape("concat0 of zero arrays".into()));
        }
        let tail = &parts[0].shape[1..];
        let mut rows = 0usize;
        for p in parts {
            if p.ndim() == 0 || &p.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "concat0 trailing dims differ: {:?} vs {:?}",
                    parts[0].shape, p.shape
                )));
            }
            rows += p.shape[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Array::new(shape, data)
    }

    /// Slice rows [lo, hi) along axis 0.
    pub fn slice0(&self, lo: usize, hi: usize) -> Result<Array<F>> {
        if self.ndim() == 0 || hi > self.shape[0] || lo > hi {
            return Err(Error::Shape(format!(
                "slice0 [{lo}, {hi}) out of bounds for {:?}",
                self.shape
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = hi - lo;
        Array::new(shape, self.data[lo * stride..hi * stride].to_vec())
    }

    /// Elementwise binary map with an identically-shaped rhs.
    pub fn zip_map(&self, rhs: &Array<F>, f: impl Fn(F, F) -> F) -> Result<Array<F>> {
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Array::new(self.shape.clone(), data)
    }

    /// Elementwise unary map.
    pub fn map(&self, f: impl Fn(F) -> F) -> Array<F> {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    /// Mean of all elements, accumulated in f64.
    pub fn mean_f64(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum_f64() / self.data.len() as f64
    }
}

/// Convert an f64 array into dtype `F` (used when loading checkpoints).
pub fn array_from_f64<F: Scalar>(shape: Vec<usize>, data: &[f64]) -> Result<Array<F>> {
    Array::from_f64(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Array::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Array::<f64>::from_f64(vec![2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn batched_matmul_broadcasts_rhs() {
        let a = Array::<f64>::from_f64(vec![2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Array::<f64>::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn transpose_and_swap_are_involutions() {
        let a = Array::<f32>::from_f64(vec![2, 3, 4], &(0..24).map(|x| x as f64).collect::<Vec<_>>()).unwrap();
        assert_eq!(a.transpose_last().unwrap().transpose_last().unwrap(), a);
        assert_eq!(a.swap_axes01().unwrap().swap_axes01().unwrap(), a);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = Array::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Array::<f64>::from_f64(vec![1, 2], &[5.0, 6.0]).unwrap();
        let c = Array::concat0(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.slice0(0, 2).unwrap(), a);
        assert_eq!(c.slice0(2, 3).unwrap(), b);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Array::<f64>::zeros(vec![2, 3]);
        let b = Array::<f64>::zeros(vec![2, 2]);
        assert!(a.matmul(&b).is_err());
        assert!(a.zip_map(&b, |x, _| x).is_err());
    }
}
