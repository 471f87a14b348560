//! Dense row-major tensors and the forward/backward kernels used by the
//! networks in [`crate::model`].
//!
//! Every kernel is a pure function of its arguments. Reductions run in a fixed
//! left-to-right order so repeated calls are bitwise reproducible, whatever
//! SIMD width the compiler picks for the elementwise inner loops.
//!
//! The element type is generic over [`Real`] (`f32` for training and storage,
//! `f64` for finite-difference checks through the same code paths).

mod activation;
mod conv;
mod dense;
mod fpenv;
pub(crate) mod gemm;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use activation::{activation, activation_backward, Activation};
pub use conv::{
    conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward, conv2d_transpose_sized,
    conv_output_size, conv_transpose_output_size, ConvGrads, ConvParams,
};
pub use dense::{dense, dense_backward, DenseGrads, DenseParams};
pub use fpenv::FlushDenormals;

/// Scalar element type for tensors.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in target float type")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got rank {actual}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("cannot reshape {from:?} ({from_count} elements) into {to:?} ({to_count} elements)")]
    CountMismatch {
        from: Vec<usize>,
        to: Vec<usize>,
        from_count: usize,
        to_count: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero-sized dimension")]
    ZeroDimension(Vec<usize>),
    #[error("{op}: computed output {axis} is {size}, must be at least 1")]
    InvalidOutputSize {
        op: &'static str,
        axis: &'static str,
        size: i64,
    },
    #[error("{op}: requested output {axis} {requested} outside the reachable range {min}..={max}")]
    OutputSizeOutOfRange {
        op: &'static str,
        axis: &'static str,
        requested: usize,
        min: usize,
        max: usize,
    },
    #[error("{op}: invalid parameters: {reason}")]
    InvalidParams { op: &'static str, reason: String },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dense N-dimensional array stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(TensorError::ZeroDimension(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let count = check_shape(shape)?;
        if data.len() != count {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let count = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; count],
        })
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let count = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..count).map(f).collect(),
        })
    }

    /// Builds a tensor from parts already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Returns the same data viewed under `target`. Backward of a reshape is
    /// the reshape back to the original shape.
    pub fn reshape(&self, target: &[usize]) -> Result<Self> {
        self.clone().into_reshaped(target)
    }

    pub fn into_reshaped(mut self, target: &[usize]) -> Result<Self> {
        let to_count = check_shape(target)?;
        if to_count != self.data.len() {
            return Err(TensorError::CountMismatch {
                from: self.shape,
                to: target.to_vec(),
                from_count: self.data.len(),
                to_count,
            });
        }
        self.shape = target.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|x| x * factor)
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Tensor<T>, factor: T) -> Result<()> {
        same_shape("add_scaled", &self.shape, &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Sum of elementwise products, accumulated left to right.
    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        same_shape("dot", &self.shape, &other.shape)?;
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    /// Copies the rows `indices` of the leading axis into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(TensorError::ZeroDimension(vec![0]));
        }
        let rows = self.shape[0];
        let row_len = self.data.len() / rows;
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_rows",
                    axis: "row index",
                    expected: rows,
                    actual: i,
                });
            }
            data.extend_from_slice(&self.data[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Row `i` of the leading axis as a flat slice.
    pub fn row(&self, i: usize) -> &[T] {
        let row_len = self.data.len() / self.shape[0];
        &self.data[i * row_len..(i + 1) * row_len]
    }
}

pub(crate) fn same_shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(TensorError::RankMismatch {
            op,
            expected: expected.len(),
            actual: actual.len(),
        });
    }
    for (axis, (&e, &a)) in expected.iter().zip(actual).enumerate() {
        if e != a {
            return Err(TensorError::ShapeMismatch {
                op,
                axis: AXIS_NAMES.get(axis).copied().unwrap_or("trailing axis"),
                expected: e,
                actual: a,
            });
        }
    }
    Ok(())
}

pub(crate) fn expect_rank(op: &'static str, t: &[usize], rank: usize) -> Result<()> {
    if t.len() != rank {
        return Err(TensorError::RankMismatch {
            op,
            expected: rank,
            actual: t.len(),
        });
    }
    Ok(())
}

const AXIS_NAMES: [&str; 4] = ["axis 0", "axis 1", "axis 2", "axis 3"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(matches!(
            Tensor::<f32>::zeros(&[2, 0]),
            Err(TensorError::ZeroDimension(_))
        ));
    }

    #[test]
    fn flatten_and_unflatten() {
        let t = Tensor::<f32>::from_fn(&[1, 32, 7, 7], |i| i as f32).unwrap();
        let flat = t.reshape(&[1, 1568]).unwrap();
        assert_eq!(flat.shape(), &[1, 1568]);
        let back = flat.reshape(&[1, 32, 7, 7]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn reshape_count_mismatch() {
        let t = Tensor::<f32>::zeros(&[1, 10]).unwrap();
        let err = t.reshape(&[1, 3, 3]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::CountMismatch {
                from_count: 10,
                to_count: 9,
                ..
            }
        ));
    }

    #[test]
    fn gather_rows_copies_selected() {
        let t = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(t.gather_rows(&[3]).is_err());
    }

    #[test]
    fn shape_mismatch_names_axis() {
        let err = same_shape("op", &[2, 3, 4], &[2, 5, 4]).unwrap_err();
        assert_eq!(
            err.to_string(),
            "op: shape mismatch on axis 1: expected 3, got 5"
        );
    }
}
