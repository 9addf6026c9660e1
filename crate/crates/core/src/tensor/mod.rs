//! Dense tensor arithmetic and the layer-level numeric primitives.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, while
//! gradient verification instantiates the same code paths in `f64`.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use thiserror::Error;

mod activation;
mod adam;
mod conv;
mod loss;
mod norm;

pub use activation::{activation_backward, activation_forward, ActKind};
pub use adam::{adam_step, AdamState};
pub use conv::{conv2d_backward, conv2d_forward};
pub use loss::{loss_bce, loss_bce_weighted, PRED_CLAMP};
pub use norm::{norm2d_backward, norm2d_forward, NormCache, NORM_VAR_FLOOR};

/// Element type tag carried by the FTNS file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

/// Floating-point element type for tensors.
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;
    /// Encoded width in bytes (little-endian).
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the first `Self::BYTES` bytes of `b`.
    fn read_le(b: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $bytes:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: Dtype = $dtype;
            const BYTES: usize = $bytes;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(b: &[u8]) -> Self {
                <$t>::from_le_bytes(b[..$bytes].try_into().expect("buffer underrun"))
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32, 4);
impl_scalar!(f64, Dtype::F64, 8);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },
    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("non-finite value {value} at flat index {index} in {context}")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f64,
    },
    #[error("missing forward cache for {0}; run a training-mode forward first")]
    MissingCache(&'static str),
}

/// Forward-pass mode. Training mode caches activations for backward and
/// updates normalization running statistics; eval mode is a pure function
/// of (parameters, input).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense n-dimensional array of real values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn checked_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must have at least one dimension",
        });
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: "dimension sizes must be positive",
            });
        }
        n = n.checked_mul(d).ok_or(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows usize",
        })?;
    }
    Ok(n)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n = checked_shape(&shape)?;
        if n != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                expected: n,
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    /// Zero-filled tensor. Panics on an invalid shape; shapes here come from
    /// validated model/dataset construction.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = checked_shape(&shape).expect("invalid tensor shape");
        Self {
            shape,
            data: vec![T::ZERO; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = checked_shape(&shape).expect("invalid tensor shape");
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = checked_shape(&shape).expect("invalid tensor shape");
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    /// Flat index for a rank-3 tensor laid out [C, H, W].
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    /// Flat index for a rank-4 tensor laid out [N, C, H, W].
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += a * x`, elementwise.
    pub fn axpy(&mut self, a: T, x: &Self) {
        debug_assert_eq!(self.shape, x.shape);
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
    }

    pub fn scale(&mut self, a: T) {
        for v in &mut self.data {
            *v *= a;
        }
    }

    pub fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                context,
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn validate_finite(&self, context: &'static str) -> Result<(), TensorError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    context,
                    index: i,
                    value: v.to_f64(),
                });
            }
        }
        Ok(())
    }

    /// Largest absolute difference between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Converts element type; values pass through `f64`.
    pub fn convert<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Running statistics kept by a normalization layer alongside its
/// learnable scale/shift.
#[derive(Debug, Clone, PartialEq)]
pub struct NormRunning<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// One parameterized layer's values and gradient accumulators.
///
/// Convolution blocks hold weights `[C_out, C_in, k, k]` and bias `[C_out]`;
/// normalization blocks hold per-channel scale in `weights` and shift in
/// `bias`, plus running statistics in `norm_state`.
#[derive(Debug, Clone)]
pub struct ParamBlock<T> {
    pub layer_index: usize,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
    pub norm_state: Option<NormRunning<T>>,
}

impl<T: Scalar> ParamBlock<T> {
    pub fn new(layer_index: usize, weights: Tensor<T>, bias: Tensor<T>) -> Self {
        let grad_weights = Tensor::zeros(weights.shape().to_vec());
        let grad_bias = Tensor::zeros(bias.shape().to_vec());
        Self {
            layer_index,
            weights,
            bias,
            grad_weights,
            grad_bias,
            norm_state: None,
        }
    }

    pub fn with_norm_state(mut self, channels: usize) -> Self {
        self.norm_state = Some(NormRunning {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::full(vec![channels], T::ONE),
        });
        self
    }

    pub fn zero_grads(&mut self) {
        self.grad_weights.fill(T::ZERO);
        self.grad_bias.fill(T::ZERO);
    }

    pub fn is_norm(&self) -> bool {
        self.norm_state.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}
