//! Dense `f32` tensors and a tape-based reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain value (shape + contiguous row-major data). Values that
//! take part in differentiation live on a [`Tape`] and are addressed through
//! [`Var`] handles. A fresh tape is built for every training step and dropped
//! afterwards, so there is no persistent graph.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{gradcheck, GradcheckReport};
pub(crate) use tape::softmax_rows;
pub use tape::{BatchNormMode, CustomBackward, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar type used for all storage and accumulation.
pub type Float = f32;

/// Guard added to L2 norms so that zero vectors normalize to zero instead of NaN.
pub const NORM_EPS: Float = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Float>,
}

impl Tensor {
    /// Builds a tensor, checking that every dimension is positive and that
    /// the data length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<Float>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Float>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: Float) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<Float>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn full(shape: &[usize], value: Float) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| StandardNormal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: &[usize],
        low: Float,
        high: Float,
        rng: &mut R,
    ) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(low..high)).collect();
        Self::from_parts(shape.to_vec(), data)
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

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Float> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<Float> {
        if self.data.len() != 1 {
            return Err(Error::Rank {
                op: "item",
                expected: 0,
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data))
    }

    /// Rows of a rank-2 tensor as slices.
    pub fn rows(&self) -> impl Iterator<Item = &[Float]> {
        let width = self.shape.last().copied().unwrap_or(1);
        self.data.chunks(width)
    }

    pub fn map(&self, f: impl Fn(Float) -> Float) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn min(&self) -> Float {
        self.data.iter().copied().fold(Float::INFINITY, Float::min)
    }

    pub fn max(&self) -> Float {
        self.data
            .iter()
            .copied()
            .fold(Float::NEG_INFINITY, Float::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Per-channel running mean/variance tracked by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Float>,
    pub var: Vec<Float>,
    pub momentum: Float,
    pub eps: Float,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Exponential moving-average update with the batch mean and unbiased variance.
    pub fn update(&mut self, batch_mean: &[Float], batch_var_unbiased: &[Float]) {
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}
