use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a dense array: `channels` planes of `height` x `width`.
///
/// A single-channel array is an H x W field; a 1 x 1 x 1 array is a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape {
        channels: 1,
        height: 1,
        width: 1,
    };

    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn plane(height: usize, width: usize) -> Self {
        Shape::new(1, height, width)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Same spatial extent, possibly different channel count.
    pub fn same_plane(&self, other: &Shape) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Dense, planar (channel-major) array of finite 64-bit floats.
///
/// Element `(c, y, x)` lives at `c * H * W + y * W + x`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawArray", into = "RawArray")]
pub struct Array {
    shape: Shape,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Array::new",
                format!("{} elements for shape {}", data.len(), shape),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Array::new"));
        }
        Ok(Array { shape, data })
    }

    /// Wraps data produced internally by a kernel; checks finiteness only.
    pub(crate) fn from_kernel(op: &'static str, shape: Shape, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(data.len(), shape.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Array { shape, data })
    }

    /// Gradient buffers are never checked: they are sums of finite terms.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Array { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Array {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Array::new(shape, vec![value; shape.len()])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Array::new(Shape::SCALAR, vec![value])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Array::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Value of a scalar array.
    pub fn item(&self) -> f64 {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn row(&self, c: usize, y: usize) -> &[f64] {
        let start = self.index(c, y, 0);
        &self.data[start..start + self.shape.width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Array> {
        Array::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mirror along the horizontal axis.
    pub fn hflip(&self) -> Array {
        let Shape { width, .. } = self.shape;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(width) {
            data.extend(row.iter().rev());
        }
        Array::from_raw(self.shape, data)
    }

    /// Sub-window `[x0, x0 + width) x [y0, y0 + height)` of every channel.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Array> {
        let s = self.shape;
        if x0 + width > s.width || y0 + height > s.height || width == 0 || height == 0 {
            return Err(Error::shape(
                "crop",
                format!("window {width}x{height}+{x0}+{y0} outside {s}"),
            ));
        }
        let shape = Shape::new(s.channels, height, width);
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..s.channels {
            for y in y0..y0 + height {
                let start = self.index(c, y, x0);
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Array::from_raw(shape, data))
    }

    /// Mean over channels, producing a single-channel array.
    pub fn channel_mean(&self) -> Array {
        let s = self.shape;
        let n = s.plane_len();
        let mut out = vec![0.0; n];
        for c in 0..s.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let inv = 1.0 / s.channels as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Array::from_raw(Shape::plane(s.height, s.width), out)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Array({}, {:?})", self.shape, self.data)
        } else {
            write!(
                f,
                "Array({}, min={:.4}, max={:.4}, mean={:.4})",
                self.shape,
                self.min(),
                self.max(),
                self.mean()
            )
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawArray {
    shape: Shape,
    data: Vec<f64>,
}

impl TryFrom<RawArray> for Array {
    type Error = Error;

    fn try_from(raw: RawArray) -> Result<Self> {
        Array::new(raw.shape, raw.data)
    }
}

impl From<Array> for RawArray {
    fn from(a: Array) -> Self {
        RawArray {
            shape: a.shape,
            data: a.data,
        }
    }
}
