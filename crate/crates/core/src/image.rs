use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `H × W × C` image with `f32` samples in `[0, 1]`.
///
/// The restoration model works directly in pixel space, so this type doubles
/// as the flow "latent". Intermediate values (noise, velocities, one-step
/// estimates) may leave `[0, 1]`; only [`Image::clamped`] and the PNG writer
/// enforce the range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Errors unless `other` has the same shape.
    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        self.check_same_shape(other)?;
        Ok(Image {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        })
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    pub fn mse(&self, other: &Image) -> Result<f32> {
        self.check_same_shape(other)?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        Ok((s / self.data.len() as f64) as f32)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 8-bit quantisation used by the PNG and JPEG paths.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Image> {
        Image::from_vec(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Writes an 8-bit RGB PNG. Values are clamped to `[0, 1]` first.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::invalid(format!(
                "PNG output needs 3 channels, image has {}",
                self.channels
            )));
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::invalid("pixel buffer does not match dimensions"))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::from(other),
            })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::from(other),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Image::from_rgb8(h as usize, w as usize, 3, img.as_raw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_quantised() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let mut img = Image::zeros(4, 5, 3);
        img.set(1, 2, 0, 0.5);
        img.set(3, 4, 2, 1.2);
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.shape(), (4, 5, 3));
        assert!((back.get(1, 2, 0) - 128.0 / 255.0).abs() < 1e-6);
        assert_eq!(back.get(3, 4, 2), 1.0);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Image::from_vec(2, 2, 3, vec![0.0; 11]).is_err());
    }
}
