//! Dense row-major arrays with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain shape + buffer value type; [`tape::Tape`] records
//! operations on tensors and replays them in reverse for gradients. Element
//! type is generic over [`Scalar`] so the same ops run in f32 for training
//! and f64 for finite-difference oracle checks.

pub mod adamw;
pub mod archive;
pub mod nn;
pub mod params;
pub mod tape;

use std::fmt::{Debug, Display};

use crate::error::{Error, Result};

pub use adamw::{clip_global_norm, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter, TapeBinding};
pub use tape::{Tape, Var};

/// Floating-point element type for tensors: f32 for training, f64 for oracles.
pub trait Scalar:
    Copy
    + PartialOrd
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
{
    const DTYPE: &'static str;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn is_finite(self) -> bool;
    fn max_val(self, other: Self) -> Self;
    fn min_val(self, other: Self) -> Self;
    /// Large negative sentinel standing in for log(0); keeps log-space
    /// arithmetic NaN-free where a true -inf would produce inf - inf.
    fn log_zero() -> Self;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $w:expr) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;

            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn powi(self, n: i32) -> Self {
                self.powi(n)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn max_val(self, other: Self) -> Self {
                self.max(other)
            }
            fn min_val(self, other: Self) -> Self {
                self.min(other)
            }
            fn log_zero() -> Self {
                -1.0e30
            }
            fn to_le_bytes_vec(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
            fn from_le_slice(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $w];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
            fn byte_width() -> usize {
                $w
            }
        }
    };
}

impl_scalar!(f32, "f32", 4);
impl_scalar!(f64, "f64", 8);

/// Dense row-major array of [`Scalar`] elements.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of rows when viewed as a 2-D matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-2D tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-2D tensor");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn is_scalar_shape(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose2(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Row-wise softmax of a 2-D tensor, max-shifted for stability.
    pub fn softmax_rows(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            softmax_lane(self.row(i), &mut out[i * n..(i + 1) * n]);
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    pub fn argmax_row(&self, i: usize) -> usize {
        let r = self.row(i);
        let mut best = 0;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        best
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64() as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }
}

pub(crate) fn softmax_lane<T: Scalar>(x: &[T], out: &mut [T]) {
    let mut mx = x[0];
    for &v in x.iter() {
        mx = mx.max_val(v);
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// out += a @ b for row-major a (m x k) and b (k x n).
///
/// The j-loop body is a pure elementwise FMA over independent accumulators,
/// so the compiler can vectorize it without reordering float additions;
/// results are bitwise identical across SIMD widths.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

pub(crate) fn matmul_new<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

pub(crate) fn transpose_data<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let r = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 5]);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_rows_symmetric_and_stable() {
        let t = Tensor::from_vec(&[2, 2], vec![0.0f64, 0.0, 1000.0, 0.0]).unwrap();
        let s = t.softmax_rows();
        assert!((s.at2(0, 0) - 0.5).abs() < 1e-12);
        assert!((s.at2(0, 1) - 0.5).abs() < 1e-12);
        assert!(s.at2(1, 0) > 0.999999);
        assert!(s.all_finite());
    }

    #[test]
    fn matmul_identity_and_projector() {
        // I2 x [[1,2],[3,4]] = [[1,2],[3,4]]
        let eye = vec![1.0f64, 0.0, 0.0, 1.0];
        let m = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul_new(&eye, &m, 2, 2, 2), m);
        // [[1,0],[0,0]] x [[5,6],[7,8]] = [[5,6],[0,0]]
        let p = vec![1.0f64, 0.0, 0.0, 0.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul_new(&p, &b, 2, 2, 2), vec![5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_scalar_loop_oracle() {
        // random 3x4 . 4x2 against a direct dot-product loop
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let a: Vec<f64> = (0..12).map(|_| next()).collect();
        let b: Vec<f64> = (0..8).map(|_| next()).collect();
        let got = matmul_new(&a, &b, 3, 4, 2);
        for i in 0..3 {
            for j in 0..2 {
                let mut dot = 0.0;
                for k in 0..4 {
                    dot += a[i * 4 + k] * b[k * 2 + j];
                }
                assert!((got[i * 2 + j] - dot).abs() < 1e-6);
            }
        }
    }
}
