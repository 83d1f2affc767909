use crate::diffcore::{Array, Shape};
use crate::error::{Error, Result};

/// Intensities in `[0, 1]`, one or three channels, at least 8 x 8.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Array);

impl Image {
    pub const MIN_SIDE: usize = 8;

    pub fn new(array: Array) -> Result<Self> {
        let s = array.shape();
        if s.channels != 1 && s.channels != 3 {
            return Err(Error::invalid(format!("image with {} channels", s.channels)));
        }
        if s.width < Self::MIN_SIDE || s.height < Self::MIN_SIDE {
            return Err(Error::invalid(format!(
                "image {}x{} smaller than {m}x{m}",
                s.width,
                s.height,
                m = Self::MIN_SIDE
            )));
        }
        if array.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image intensities outside [0, 1]"));
        }
        Ok(Image(array))
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Image::new(Array::from_fn(Shape::new(channels, height, width), f)?)
    }

    pub fn width(&self) -> usize {
        self.0.shape().width
    }

    pub fn height(&self) -> usize {
        self.0.shape().height
    }

    pub fn channels(&self) -> usize {
        self.0.shape().channels
    }

    pub fn array(&self) -> &Array {
        &self.0
    }

    pub fn into_array(self) -> Array {
        self.0
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.get(c, y, x)
    }

    pub fn hflip(&self) -> Image {
        Image(self.0.hflip())
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        Image::new(self.0.crop(x0, y0, width, height)?)
    }
}

/// Non-negative horizontal disparities in pixels, each below the width.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityField(Array);

impl DisparityField {
    pub fn new(array: Array) -> Result<Self> {
        let s = array.shape();
        if s.channels != 1 || s.is_empty() {
            return Err(Error::invalid(format!("disparity field of shape {s}")));
        }
        let w = s.width as f64;
        if let Some(v) = array.data().iter().find(|&&v| !(0.0..w).contains(&v)) {
            return Err(Error::invalid(format!("disparity {v} outside [0, {w}) for width {w}")));
        }
        Ok(DisparityField(array))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        DisparityField::new(Array::from_fn(Shape::plane(height, width), |_, y, x| f(y, x))?)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        DisparityField::new(Array::filled(Shape::plane(height, width), value)?)
    }

    pub fn width(&self) -> usize {
        self.0.shape().width
    }

    pub fn height(&self) -> usize {
        self.0.shape().height
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(0, y, x)
    }

    pub fn array(&self) -> &Array {
        &self.0
    }

    pub fn into_array(self) -> Array {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.max()
    }

    pub fn hflip(&self) -> DisparityField {
        DisparityField(self.0.hflip())
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<DisparityField> {
        DisparityField::new(self.0.crop(x0, y0, width, height)?)
    }
}

/// Binary validity map: 1 marks a non-occluded pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask(Array);

impl OcclusionMask {
    pub fn new(array: Array) -> Result<Self> {
        let s = array.shape();
        if s.channels != 1 {
            return Err(Error::invalid(format!("occlusion mask of shape {s}")));
        }
        if array.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("occlusion mask must be binary"));
        }
        Ok(OcclusionMask(array))
    }

    pub fn from_bits(width: usize, height: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::invalid("mask bit count does not match dimensions"));
        }
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        OcclusionMask::new(Array::new(Shape::plane(height, width), data)?)
    }

    pub fn ones(width: usize, height: usize) -> Self {
        OcclusionMask(Array::filled(Shape::plane(height, width), 1.0).expect("finite"))
    }

    pub fn width(&self) -> usize {
        self.0.shape().width
    }

    pub fn height(&self) -> usize {
        self.0.shape().height
    }

    pub fn is_set(&self, y: usize, x: usize) -> bool {
        self.0.get(0, y, x) == 1.0
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn array(&self) -> &Array {
        &self.0
    }

    pub fn into_array(self) -> Array {
        self.0
    }

    pub fn hflip(&self) -> OcclusionMask {
        OcclusionMask(self.0.hflip())
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<OcclusionMask> {
        OcclusionMask::new(self.0.crop(x0, y0, width, height)?)
    }

    /// Pixel-wise AND.
    pub fn and(&self, other: &OcclusionMask) -> Result<OcclusionMask> {
        if self.0.shape() != other.0.shape() {
            return Err(Error::shape(
                "mask and",
                format!("{} vs {}", self.0.shape(), other.0.shape()),
            ));
        }
        let data = self.0.data().iter().zip(other.0.data()).map(|(a, b)| a * b).collect();
        OcclusionMask::new(Array::new(self.0.shape(), data)?)
    }

    pub fn invert(&self) -> OcclusionMask {
        OcclusionMask(self.0.map(|v| 1.0 - v).expect("finite"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_invariants() {
        assert!(Image::from_fn(8, 8, 1, |_, _, _| 0.5).is_ok());
        assert!(Image::from_fn(7, 8, 1, |_, _, _| 0.5).is_err());
        assert!(Image::from_fn(8, 8, 2, |_, _, _| 0.5).is_err());
        assert!(Image::from_fn(8, 8, 3, |_, _, _| 1.5).is_err());
    }

    #[test]
    fn disparity_invariants() {
        assert!(DisparityField::constant(4, 2, 3.9).is_ok());
        assert!(DisparityField::constant(4, 2, 4.0).is_err());
        assert!(DisparityField::constant(4, 2, -0.1).is_err());
    }

    #[test]
    fn mask_invariants() {
        assert!(OcclusionMask::new(Array::filled(Shape::plane(2, 2), 0.5).unwrap()).is_err());
        let m = OcclusionMask::from_bits(2, 1, &[true, false]).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.invert().count(), 1);
        assert_eq!(m.and(&m.invert()).unwrap().count(), 0);
    }
}
