//! Dense `(batch, channels, height, width)` tensors and the elementwise,
//! padding and pooling primitives the rest of the crate builds on.
//!
//! Storage is row-major with the batch index outermost, so every
//! `(batch, channel)` plane is a contiguous `height * width` slice. All
//! operations are pure: they borrow their inputs and return new tensors.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floating-point element type. Production paths use `f32`; gradient
/// checking instantiates the same code with `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `(batch, channel)` plane.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub const fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }

    pub const fn with_spatial(self, height: usize, width: usize) -> Self {
        Shape { height, width, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.batch, self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "buffer of {} elements cannot hold shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Uniform random values in `[lo, hi)`.
    pub fn random(shape: Shape, lo: f64, hi: f64, rng: &mut crate::Rng) -> Self {
        let data = (0..shape.len()).map(|_| T::lit(rng.uniform_in(lo, hi))).collect();
        Tensor { shape, data }
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((b * s.channels + c) * s.height + y) * s.width + x
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, c, y, x)]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (b * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), |a, b| a.max(b))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a - *b).abs().as_f64())
                .fold(0.0, f64::max),
        )
    }

    /// Bitwise equality of the payloads (distinguishes `0.0` from `-0.0`).
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

pub fn zero_pad<T: Scalar>(t: &Tensor<T>, top: usize, bottom: usize, left: usize, right: usize) -> Tensor<T> {
    let s = t.shape;
    let out_shape = s.with_spatial(s.height + top + bottom, s.width + left + right);
    let mut out = Tensor::zeros(out_shape);
    let ow = out_shape.width;
    out.data
        .chunks_mut(out_shape.plane())
        .zip(t.data.chunks(s.plane().max(1)))
        .for_each(|(dst, src)| {
            for y in 0..s.height {
                let d = (y + top) * ow + left;
                dst[d..d + s.width].copy_from_slice(&src[y * s.width..(y + 1) * s.width]);
            }
        });
    out
}

/// Removes the given margins; the inverse of [`zero_pad`].
pub fn crop<T: Scalar>(t: &Tensor<T>, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor<T>> {
    let s = t.shape;
    if top + bottom > s.height || left + right > s.width {
        return Err(Error::shape(format!(
            "cannot crop {top}+{bottom} rows and {left}+{right} columns from {s}"
        )));
    }
    let (h, w) = (s.height - top - bottom, s.width - left - right);
    let out_shape = s.with_spatial(h, w);
    let mut data = Vec::with_capacity(out_shape.len());
    for src in t.data.chunks(s.plane().max(1)).take(s.batch * s.channels) {
        for y in top..top + h {
            data.extend_from_slice(&src[y * s.width + left..y * s.width + left + w]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

pub fn max_pool_2x2<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    max_pool_2x2_with_argmax(t).map(|(out, _)| out)
}

/// 2x2/stride-2 max pooling that also returns, for every output element,
/// the flat input index of the selected maximum (first maximum in
/// row-major window order on ties).
pub(crate) fn max_pool_2x2_with_argmax<T: Scalar>(t: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = t.shape;
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(Error::OddSpatialDim {
            height: s.height,
            width: s.width,
        });
    }
    let (oh, ow) = (s.height / 2, s.width / 2);
    let out_shape = s.with_spatial(oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut arg = Vec::with_capacity(out_shape.len());
    for (p, src) in t.data.chunks(s.plane().max(1)).take(s.batch * s.channels).enumerate() {
        let base = p * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (2 * oy + dy) * s.width + 2 * ox + dx;
                        if src[i] > best || (dy == 0 && dx == 0) {
                            best = src[i];
                            best_idx = i;
                        }
                    }
                }
                out.push(best);
                arg.push((base + best_idx) as u32);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, arg))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("add of {} and {}", a.shape, b.shape)));
    }
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| *x + *y).collect(),
    })
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape, b.shape);
    if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
        return Err(Error::shape(format!("concat of {sa} and {sb}")));
    }
    let out_shape = sa.with_channels(sa.channels + sb.channels);
    let (na, nb) = (sa.channels * sa.plane(), sb.channels * sb.plane());
    let mut data = Vec::with_capacity(out_shape.len());
    for bi in 0..sa.batch {
        data.extend_from_slice(&a.data[bi * na..(bi + 1) * na]);
        data.extend_from_slice(&b.data[bi * nb..(bi + 1) * nb]);
    }
    Tensor::from_vec(out_shape, data)
}

/// Stacks tensors with equal `C x H x W` along the batch axis.
pub fn concat_batch<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("empty batch"))?.shape;
    let mut data = Vec::new();
    let mut batch = 0;
    for p in parts {
        let s = p.shape;
        if (s.channels, s.height, s.width) != (first.channels, first.height, first.width) {
            return Err(Error::shape(format!("batch concat of {first} and {s}")));
        }
        batch += s.batch;
        data.extend_from_slice(&p.data);
    }
    Tensor::from_vec(Shape::new(batch, first.channels, first.height, first.width), data)
}

/// Splits along channels at `first`; the inverse of [`concat_channels`].
pub fn split_channels<T: Scalar>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = t.shape;
    if first > s.channels {
        return Err(Error::shape(format!("split at {first} of {s}")));
    }
    let (na, nb) = (first * s.plane(), (s.channels - first) * s.plane());
    let mut a = Vec::with_capacity(s.batch * na);
    let mut b = Vec::with_capacity(s.batch * nb);
    for chunk in t.data.chunks((na + nb).max(1)).take(s.batch) {
        a.extend_from_slice(&chunk[..na]);
        b.extend_from_slice(&chunk[na..]);
    }
    Ok((
        Tensor::from_vec(s.with_channels(first), a)?,
        Tensor::from_vec(s.with_channels(s.channels - first), b)?,
    ))
}

pub fn relu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Per-channel `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn batch_norm<T: Scalar>(
    t: &Tensor<T>,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let c = t.shape.channels;
    if [mean.len(), var.len(), gamma.len(), beta.len()].iter().any(|&l| l != c) {
        return Err(Error::shape(format!("batch norm vectors must have {c} entries")));
    }
    let (scale, shift): (Vec<T>, Vec<T>) = (0..c)
        .map(|ch| {
            let k = gamma[ch] / (var[ch] + eps).sqrt();
            (k, beta[ch] - mean[ch] * k)
        })
        .unzip();
    Ok(channel_affine(t, &scale, &shift))
}

/// `y = x * scale[c] + shift[c]`.
pub(crate) fn channel_affine<T: Scalar>(t: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let s = t.shape;
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    if plane == 0 {
        return out;
    }
    out.data
        .par_chunks_mut(plane)
        .zip(t.data.par_chunks(plane))
        .enumerate()
        .for_each(|(p, (dst, src))| {
            let ch = p % s.channels;
            let (k, m) = (scale[ch], shift[ch]);
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = x * k + m;
            }
        });
    out
}
