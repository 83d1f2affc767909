//! 8-bit PNG images. Intensities are quantized as `floor(v * 255 + 0.5)`.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use super::types::{Image, OcclusionMask};
use crate::diffcore::{Array, Shape};
use crate::error::{Error, Result};

pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Decodes an 8-bit gray or RGB PNG into planar `[0, 1]` intensities.
pub fn read_png_array(path: impl AsRef<Path>) -> Result<Array> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => {
            return Err(image_error(
                path,
                format!(
                    "unsupported PNG pixel format {:?}; expected 8-bit gray or RGB",
                    other.color()
                ),
            ))
        }
    };
    let shape = Shape::new(channels, h, w);
    let mut data = vec![0.0; shape.len()];
    for (i, &v) in raw.iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        data[c * h * w + p] = v as f64 / 255.0;
    }
    Array::new(shape, data)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    Image::new(read_png_array(path)?).map_err(|e| image_error(path, e))
}

/// Encodes a planar array with 1 or 3 channels of `[0, 1]` values.
pub fn write_png_array(array: &Array, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = array.shape();
    let n = s.plane_len();
    let mut raw = Vec::with_capacity(s.len());
    for p in 0..n {
        for c in 0..s.channels {
            raw.push(quantize(array.data()[c * n + p]));
        }
    }
    let (w, h) = (s.width as u32, s.height as u32);
    let img = match s.channels {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).ok_or_else(|| image_error(path, "bad buffer"))?),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).ok_or_else(|| image_error(path, "bad buffer"))?),
        c => return Err(image_error(path, format!("cannot encode {c} channels"))),
    };
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

pub fn write_png(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    write_png_array(image.array(), path)
}

/// Masks are stored as 0 / 255 grayscale.
pub fn write_mask_png(mask: &OcclusionMask, path: impl AsRef<Path>) -> Result<()> {
    write_png_array(mask.array(), path)
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<OcclusionMask> {
    let path = path.as_ref();
    let a = read_png_array(path)?;
    if a.shape().channels != 1 {
        return Err(image_error(path, "mask PNG must be grayscale"));
    }
    OcclusionMask::new(a.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })?)
}
