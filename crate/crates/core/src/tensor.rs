//! Dense row-major tensors and the seeded random source shared by the rest of
//! the crate.
//!
//! Images use the channels-last convention: a single image is `[H, W, C]` and
//! a batch is `[N, H, W, C]`. All reductions and products sum in a fixed
//! left-to-right order, so repeated calls on identical inputs are bitwise
//! identical regardless of how many worker threads are available.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar element type. Training runs in `f32`; gradient checks use `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::MulAssign
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Ordered list of extents, each at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(dims));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape(format!("{dims:?} overflows the element count")))?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

fn ensure_finite<T: Real>(data: &[T], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::LengthMismatch {
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        ensure_finite(&data, "tensor data")?;
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("fill value".into()));
        }
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(&mut f).collect::<Vec<_>>();
        ensure_finite(&data, "generated tensor")?;
        Ok(Tensor { shape, data })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Builds a tensor without validating contents; callers guarantee
    /// `data.len() == shape.numel()`.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::LengthMismatch {
                expected: shape.numel(),
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: {} vs {}",
                self.shape, other.shape
            )));
        }
        let data: Vec<T> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        ensure_finite(&data, op)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    fn map(&self, op: &str, f: impl Fn(T) -> T) -> Result<Self> {
        let data: Vec<T> = self.data.iter().map(|&a| f(a)).collect();
        ensure_finite(&data, op)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        self.map("scale", |a| a * c)
    }

    pub fn clamp_low(&self, floor: T) -> Result<Self> {
        self.map("clamp_low", |a| if a < floor { floor } else { a })
    }

    pub fn sum(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(Error::Empty("sum"));
        }
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        Ok(acc)
    }

    pub fn mean(&self) -> Result<T> {
        Ok(self.sum()? / T::of(self.data.len() as f64))
    }

    /// Index of the maximum along the last axis for every leading index.
    /// Ties resolve to the smallest index.
    pub fn argmax_last_axis(&self) -> Result<Vec<usize>> {
        let last = *self.dims().last().ok_or(Error::Empty("argmax"))?;
        Ok(self.data.chunks(last).map(argmax).collect())
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(Shape(vec![n, m]), out))
    }

    fn as_matrix(&self, op: &str) -> Result<(usize, usize)> {
        match self.dims() {
            &[m, n] => Ok((m, n)),
            other => Err(Error::Shape(format!("{op}: expected a matrix, got {other:?}"))),
        }
    }

    /// Matrix product `[M,K] x [K,N] -> [M,N]`.
    ///
    /// Each output element accumulates over `K` in ascending order. Rows may be
    /// computed on different threads; that never changes the per-element order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: {} x {}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        ensure_finite(&out, "matmul")?;
        Ok(Tensor::from_parts(Shape(vec![m, n]), out))
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

const PAR_THRESHOLD: usize = 1 << 16;

/// `out[M,N] += a[M,K] * b[K,N]`, row-major.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Deterministic pseudo-random source (ChaCha8 keyed by a 64-bit seed).
///
/// Sequences are stable for a given seed within this implementation.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent generator for a named stream and index, e.g. the shuffle
    /// stream of epoch 7.
    pub fn derive(seed: u64, stream: u64, index: u64) -> Self {
        let mut x = seed;
        for v in [stream, index] {
            x = splitmix64(x ^ splitmix64(v.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        Rng::new(x)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform draw from `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = self.0.sample(rand_distr::StandardNormal);
        mean + std * z
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.0);
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
