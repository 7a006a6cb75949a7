//! Dense row-major tensors and the scalar abstraction shared by the model code.
//!
//! Training runs in `f32`. The same kernels are instantiated for `f64`, which
//! the gradient checks use to keep finite-difference noise below tolerance.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type usable by every kernel in the crate.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const DTYPE: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary (row, column) strides on each operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize, what: &str) {
    assert!(rs >= 0 && cs >= 0, "{what}: negative strides are not supported");
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "{what}: operand of length {len} too short for {rows}x{cols} view");
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                check_extent(a.0.len(), m, k, a.1, a.2, "gemm lhs");
                check_extent(b.0.len(), k, n, b.1, b.2, "gemm rhs");
                check_extent(c.0.len(), m, n, c.1, c.2, "gemm out");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel lies inside the
                // slices, checked above; `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Row-major dense tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|v| v.abs().as_f64()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Borrow sample `n` of a tensor whose leading dimension is the batch.
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[n * per..(n + 1) * per]
    }

    /// Stack single samples (each with shape `inner`) along a new batch axis.
    pub fn stack(inner: &[usize], samples: &[&[T]]) -> Result<Self> {
        let per: usize = inner.iter().product();
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            if s.len() != per {
                return Err(Error::Shape(format!(
                    "sample of {} elements does not match {inner:?}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(inner);
        Tensor::from_vec(&shape, data)
    }
}
