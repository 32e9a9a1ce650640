//! Dense rank-4 tensors in (batch, channel, height, width) layout.

use std::fmt;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

/// Extents of a rank-4 tensor, in `(B, C, H, W)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    /// `(1, c, 1, 1)`, the shape used for per-channel vectors.
    pub const fn vector(c: usize) -> Self {
        Self::new(1, c, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.channels + c) * self.height + h) * self.width + w
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.dims().contains(&0) {
            return Err(Error::Shape(format!(
                "extents must be positive, got {shape}"
            )));
        }
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_slice(shape: impl Into<Shape>, data: &[T]) -> Result<Self> {
        Self::new(shape, data.to_vec())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Self {
            data: vec![value; shape.numel()],
            shape,
        }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    /// I.i.d. truncated normal entries (mean 0, cut at two std).
    pub fn random_normal(shape: impl Into<Shape>, std: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| T::from_f64(rng.truncated_normal(std)))
            .collect();
        Self { shape, data }
    }

    pub fn random_uniform(shape: impl Into<Shape>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| T::from_f64(rng.uniform(lo, hi)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(b, c, h, w)]
    }

    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(b, c, h, w);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (d, &s) in self.data.iter_mut().zip(&other.data) {
            *d += alpha * s;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// One `(b, c)` plane as a slice.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.shape.plane();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    pub(crate) fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "expected shape {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Split along channels into contiguous slices of the given sizes.
pub fn split_channels<T: Real>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = t.shape();
    let sum: usize = sizes.iter().sum();
    if sum != s.channels || sizes.contains(&0) {
        return Err(Error::Partition {
            sum,
            channels: s.channels,
        });
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &len in sizes {
        let shape = s.with_channels(len);
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..s.batch {
            let from = (b * s.channels + start) * plane;
            data.extend_from_slice(&t.data()[from..from + len * plane]);
        }
        out.push(Tensor { shape, data });
        start += len;
    }
    Ok(out)
}

/// Concatenate along channels. All parts must agree on batch, height and width.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?
        .shape();
    for p in parts {
        let s = p.shape();
        if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
            return Err(Error::Shape(format!(
                "concat parts disagree on batch/height/width: {first} vs {s}"
            )));
        }
    }
    let channels = parts.iter().map(|p| p.shape().channels).sum();
    let shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(shape.numel());
    for b in 0..first.batch {
        for p in parts {
            let s = p.shape();
            let n = s.channels * s.plane();
            data.extend_from_slice(&p.data()[b * n..(b + 1) * n]);
        }
    }
    Ok(Tensor { shape, data })
}
