//! Dense row-major tensors and the scalar trait shared by the f32 training
//! path and the f64 gradient-verification path.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: expected a rank-{rank} tensor, got shape {got:?}")]
    Rank {
        op: &'static str,
        rank: usize,
        got: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    Length { len: usize, shape: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

/// Floating-point scalar usable by the engine.
pub trait Real:
    Float
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// The slice viewed as `f32`, for kernels specialized on single precision.
    fn as_f32(s: &[Self]) -> Option<&[f32]> {
        let _ = s;
        None
    }

    fn as_f32_mut(s: &mut [Self]) -> Option<&mut [f32]> {
        let _ = s;
        None
    }

    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Strides and extents must keep every access inside the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn as_f32(s: &[Self]) -> Option<&[f32]> {
        Some(s)
    }
    fn as_f32_mut(s: &mut [Self]) -> Option<&mut [f32]> {
        Some(s)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided matrix view: `rows x cols` with element `(i, j)` at `i*rs + j*cs`.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols`.
    pub fn rm(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `out = a * b + beta * out`, where `out` is row-major `a.rows x b.cols`.
pub fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions");
    assert!(out.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out[..m * n].iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len());
    // SAFETY: extents checked above against the slice lengths.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}{}", self.shape, preview, if self.data.len() > 8 { "..." } else { "" })
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Length { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
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

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: self.shape.clone(),
                got: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: T) {
        for v in self.data.iter_mut() {
            *v *= c;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a.f64() - b.f64()).abs()).fold(0.0, f64::max)
    }

    /// Dims of a rank-4 `[batch, channels, height, width]` tensor.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4], TensorError> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(TensorError::Rank { op, rank: 4, got: self.shape.clone() }),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<[usize; 3], TensorError> {
        match self.shape.as_slice() {
            &[b, m, n] => Ok([b, m, n]),
            _ => Err(TensorError::Rank { op, rank: 3, got: self.shape.clone() }),
        }
    }
}

pub(crate) fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch { op, expected: a.to_vec(), got: b.to_vec() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(MatRef::rm(&a, 2, 3), MatRef::rm(&b, 3, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|l| a[i * 3 + l] * b[l * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // (B^T A^T) = (AB)^T
        let mut ct = vec![0.0; 8];
        gemm(MatRef::rm(&b, 3, 4).t(), MatRef::rm(&a, 2, 3).t(), 0.0, &mut ct);
        for i in 0..2 {
            for j in 0..4 {
                assert!((ct[j * 2 + i] - c[i * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
