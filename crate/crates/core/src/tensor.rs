//! Dense 5-axis tensor (batch, channel, height, width, band) with band as the
//! fastest-varying axis.

use std::fmt;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{dim_err, Result};

/// Floating-point element type. Compute runs in `f32`; `f64` is used for
/// shadow copies during finite-difference checks.
pub trait Scalar:
    Float + Default + Sum + AddAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Extents of a [`FeatureTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize, bands: usize) -> Self {
        Shape { batch, channels, height, width, bands }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.volume()
    }

    /// Elements in one (height, width, band) slab.
    pub fn volume(&self) -> usize {
        self.height * self.width * self.bands
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.height, self.width, self.bands]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }

    pub fn with_bands(self, bands: usize) -> Self {
        Shape { bands, ..self }
    }

    pub fn with_spatial(self, ext: [usize; 3]) -> Self {
        Shape { height: ext[0], width: ext[1], bands: ext[2], ..self }
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize, b: usize) -> usize {
        (((n * self.channels + c) * self.height + h) * self.width + w) * self.bands + b
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width, self.bands
        )
    }
}

/// Activation block flowing between layers.
#[derive(Clone, PartialEq)]
pub struct FeatureTensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T> fmt::Debug for FeatureTensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureTensor").field("shape", &self.shape).finish_non_exhaustive()
    }
}

impl<T: Scalar> FeatureTensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        FeatureTensor { shape, data: vec![T::zero(); shape.numel()] }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        FeatureTensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() == 0 {
            return dim_err(format!("shape {shape} has a zero extent"));
        }
        if data.len() != shape.numel() {
            return dim_err(format!(
                "buffer of {} values does not fill shape {shape} ({} values)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(FeatureTensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        FeatureTensor { shape, data: (0..shape.numel()).map(&mut f).collect() }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize, b: usize) -> T {
        self.data[self.shape.index(n, c, h, w, b)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, b: usize, v: T) {
        let i = self.shape.index(n, c, h, w, b);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureTensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureTensor<U> {
        FeatureTensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn ensure_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("{what}: shape {} vs {}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.ensure_shape(other, "add")?;
        Ok(FeatureTensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.ensure_shape(other, "sub")?;
        Ok(FeatureTensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.ensure_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of one band across every (batch, channel, row, column).
    pub fn band_slice(&self, band: usize) -> Vec<T> {
        self.data.iter().skip(band).step_by(self.shape.bands).copied().collect()
    }

    /// Reverse the band axis.
    pub fn flip_bands(&self) -> Self {
        let nb = self.shape.bands;
        let mut data = self.data.clone();
        for row in data.chunks_mut(nb) {
            row.reverse();
        }
        FeatureTensor { shape: self.shape, data }
    }

    /// Split along the batch axis.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.shape.numel() / self.shape.batch;
        FeatureTensor {
            shape: Shape { batch: 1, ..self.shape },
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = match items.first() {
            Some(f) => f.shape,
            None => return dim_err("cannot stack zero tensors"),
        };
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if (Shape { batch: first.batch, ..t.shape }) != first {
                return dim_err(format!("stack: shape {} vs {}", t.shape, first));
            }
            batch += t.shape.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(FeatureTensor { shape: Shape { batch, ..first }, data })
    }
}
