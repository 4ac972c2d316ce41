use std::io::Cursor;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square sRGB image, `H×W×3` row-major, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    size: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(Error::invalid(format!(
                "{size}x{size}x3 image needs {} values, got {}",
                size * size * 3,
                pixels.len()
            )));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("image contains non-finite pixels"));
        }
        Ok(Self { size, pixels })
    }

    pub fn constant(size: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..size * size).flat_map(|_| rgb).collect();
        Self { size, pixels }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.size + x) * 3 + c]
    }

    /// Planar `[3, H, W]` copy.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.size * self.size;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.pixels[p * 3 + c];
            }
        }
        out
    }

    pub fn from_chw(size: usize, chw: &[f32]) -> Result<Self> {
        let hw = size * size;
        if chw.len() != 3 * hw {
            return Err(Error::invalid("planar image has the wrong length"));
        }
        let mut pixels = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                pixels[p * 3 + c] = chw[c * hw + p];
            }
        }
        Self::new(size, pixels)
    }

    /// Converts item `i` of an NCHW batch, clamping to `[-1, 1]`.
    pub fn from_batch(batch: &Tensor, i: usize) -> Result<Self> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::invalid(format!("expected [n,3,r,r] batch, got {s:?}")));
        }
        let chw = batch.item_slice(i);
        if !chw.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("non-finite activations in synthesized image {i}")));
        }
        let clamped: Vec<f32> = chw.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Self::from_chw(s[2], &clamped)
    }

    /// Stacks images into an NCHW tensor.
    pub fn batch(images: &[ImageTensor]) -> Result<Tensor> {
        let size = images.first().map(|i| i.size).unwrap_or(0);
        if images.iter().any(|i| i.size != size) {
            return Err(Error::invalid("images in a batch must share a size"));
        }
        let data = images.iter().flat_map(|i| i.to_chw()).collect();
        Tensor::new(vec![images.len(), 3, size, size], data)
    }

    pub fn mse(&self, other: &ImageTensor) -> f32 {
        let n = self.pixels.len() as f64;
        (self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n) as f32
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .pixels
            .iter()
            .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        RgbImage::from_raw(self.size as u32, self.size as u32, raw).expect("buffer sized for image")
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::invalid(format!(
                "image must be square, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
        Self::new(img.width() as usize, pixels)
    }

    /// Lossless PNG encoding (8 bits per channel).
    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, ImageFormat::Png)
            .expect("in-memory PNG encoding");
        out.into_inner()
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Self::from_rgb8(&img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_stable_after_quantization() {
        let img = ImageTensor::new(4, (0..48).map(|i| (i as f32 / 24.0) - 1.0).collect()).unwrap();
        let once = ImageTensor::from_png(&img.to_png()).unwrap();
        let twice = ImageTensor::from_png(&once.to_png()).unwrap();
        assert_eq!(once, twice);
        assert!(img.mse(&once) < 1e-4);
    }

    #[test]
    fn chw_round_trip() {
        let img = ImageTensor::new(2, (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        assert_eq!(ImageTensor::from_chw(2, &img.to_chw()).unwrap(), img);
        assert!(ImageTensor::new(2, vec![0.0; 11]).is_err());
        assert!(ImageTensor::new(1, vec![f32::NAN; 3]).is_err());
    }
}
