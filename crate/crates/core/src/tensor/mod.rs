//! Dense NCHW tensors and the forward kernels used by the network.

mod conv;
mod gemm;
mod ops;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub(crate) use conv::transposed_conv2d_backward_input;
pub use conv::{
    conv2d, conv2d_backward_input, conv2d_backward_weight, conv2d_direct, depthwise_conv2d, transposed_conv2d,
    transposed_conv2d_backward_weight, ConvSpec,
};
pub use gemm::gemm;
pub use ops::{
    add, batchnorm, batchnorm_eval, batchnorm_train, bilinear_upsample, bilinear_upsample_adjoint,
    broadcast_mul_channels, global_avg_pool, relu, relu6, sigmoid, softmax_channels, BatchStats, BnMode, BN_EPS,
    BN_MOMENTUM,
};

/// Scalar element type. `f32` for models, `f64` for gradient checking.
pub trait Element: Float + Sum + Default + Debug + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 converts to every float type")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";
}

impl Element for f64 {
    const NAME: &'static str = "f64";
}

/// `[batch, channels, height, width]`.
pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
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

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::shape("tensor", numel(&shape), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(numel(&shape));
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(&shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self { shape, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(&shape)).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
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

    pub fn index(&self, [i, j, y, x]: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((i * c + j) * h + y) * w + x
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.index(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let i = self.index(idx);
        self.data[i] = v;
    }

    /// The contiguous `[h, w]` plane of sample `i`, channel `j`.
    pub fn plane(&self, i: usize, j: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (i * self.shape[1] + j) * hw;
        &self.data[start..start + hw]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("accumulate", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack", first.shape, t.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }
}
