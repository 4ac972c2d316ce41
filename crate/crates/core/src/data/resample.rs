use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImageTensor;

/// Rectangular RGB raster, `H×W×3` row-major, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Raster {
    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
    }

    pub fn from_image(img: &ImageTensor) -> Self {
        Self {
            width: img.size(),
            height: img.size(),
            pixels: img.pixels().to_vec(),
        }
    }

    pub fn into_image(self) -> Result<ImageTensor> {
        if self.width != self.height {
            return Err(Error::invalid(format!("raster is {}x{}, not square", self.width, self.height)));
        }
        ImageTensor::new(self.width, self.pixels)
    }

    pub fn crop(&self, b: &CropBox) -> Result<Raster> {
        if b.width == 0 || b.height == 0 || b.x + b.width > self.width || b.y + b.height > self.height {
            return Err(Error::invalid(format!(
                "crop {}x{} at ({}, {}) outside {}x{} image",
                b.width, b.height, b.x, b.y, self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(b.width * b.height * 3);
        for y in b.y..b.y + b.height {
            let row = (y * self.width + b.x) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + b.width * 3]);
        }
        Ok(Raster {
            width: b.width,
            height: b.height,
            pixels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropBox {
    pub fn square(x: usize, y: usize, size: usize) -> Self {
        Self {
            x,
            y,
            width: size,
            height: size,
        }
    }

    pub fn full(r: &Raster) -> Self {
        Self {
            x: 0,
            y: 0,
            width: r.width,
            height: r.height,
        }
    }
}

/// Catmull-Rom cubic (`a = −0.5`).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-sample `(first source index, weights)`; the kernel is
/// stretched by the scale factor when shrinking so every source sample
/// contributes. Edge samples are clamped.
fn taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let support = scale.max(1.0);
    (0..n_out)
        .map(|o| {
            let centre = (o as f64 + 0.5) * scale - 0.5;
            let lo = (centre - 2.0 * support).floor() as i64;
            let hi = (centre + 2.0 * support).ceil() as i64;
            let mut w: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let k = cubic((i as f64 - centre) / support);
                if k != 0.0 {
                    let idx = i.clamp(0, n_in as i64 - 1) as usize;
                    match w.iter_mut().find(|(j, _)| *j == idx) {
                        Some(e) => e.1 += k,
                        None => w.push((idx, k)),
                    }
                }
            }
            let s: f64 = w.iter().map(|(_, k)| k).sum();
            w.iter_mut().for_each(|e| e.1 /= s);
            w
        })
        .collect()
}

/// Separable bicubic resampling to `out_w × out_h`, clamped to `[-1, 1]`.
/// Equal sizes return the input unchanged.
pub fn resample(src: &Raster, out_w: usize, out_h: usize) -> Result<Raster> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("resample target must be non-empty"));
    }
    if out_w == src.width && out_h == src.height {
        return Ok(src.clone());
    }
    let tx = taps(src.width, out_w);
    let ty = taps(src.height, out_h);
    // horizontal pass kept in f64 so constant inputs stay exact
    let mut mid = vec![0.0f64; src.height * out_w * 3];
    for y in 0..src.height {
        for (ox, t) in tx.iter().enumerate() {
            for c in 0..3 {
                mid[(y * out_w + ox) * 3 + c] = t
                    .iter()
                    .map(|(i, k)| k * src.pixels[(y * src.width + i) * 3 + c] as f64)
                    .sum();
            }
        }
    }
    let mut pixels = vec![0.0f32; out_h * out_w * 3];
    for (oy, t) in ty.iter().enumerate() {
        for ox in 0..out_w {
            for c in 0..3 {
                let v: f64 = t.iter().map(|(i, k)| k * mid[(i * out_w + ox) * 3 + c]).sum();
                pixels[(oy * out_w + ox) * 3 + c] = (v as f32).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(Raster {
        width: out_w,
        height: out_h,
        pixels,
    })
}

/// Crops `crop` out of `src` and resamples it to `target_res²`.
pub fn crop_and_resample(src: &Raster, crop: &CropBox, target_res: usize) -> Result<ImageTensor> {
    if !target_res.is_power_of_two() || target_res < 4 {
        return Err(Error::invalid(format!("target resolution {target_res} is not a power of two >= 4")));
    }
    let c = src.crop(crop)?;
    resample(&c, target_res, target_res)?.into_image()
}

/// Doubles spatial size.
pub trait SuperResolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn upscale_2x(&self, src: &Raster) -> Result<Raster>;
}

/// Bicubic upsampling with the pipeline's resampling kernel.
pub struct BicubicSr;

impl SuperResolver for BicubicSr {
    fn name(&self) -> &'static str {
        "bicubic"
    }

    fn upscale_2x(&self, src: &Raster) -> Result<Raster> {
        resample(src, 2 * src.width, 2 * src.height)
    }
}

pub const SR_BACKENDS: [&str; 1] = ["bicubic"];

pub fn sr_backend(name: &str) -> Result<Box<dyn SuperResolver>> {
    match name {
        "bicubic" => Ok(Box::new(BicubicSr)),
        other => Err(Error::config(format!(
            "unknown super-resolution backend '{other}' (available: {})",
            SR_BACKENDS.join(", ")
        ))),
    }
}

pub fn super_resolve_2x(src: &Raster, backend: &dyn SuperResolver) -> Result<Raster> {
    let out = backend.upscale_2x(src)?;
    if out.width != 2 * src.width || out.height != 2 * src.height {
        return Err(Error::numeric(format!(
            "backend '{}' returned {}x{} for a {}x{} input",
            backend.name(),
            out.width,
            out.height,
            src.width,
            src.height
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn noise(w: usize, h: usize, seed: u64) -> Raster {
        let mut rng = SeededRng::new(seed);
        Raster {
            width: w,
            height: h,
            pixels: (0..w * h * 3).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        }
    }

    fn constant(w: usize, h: usize, v: [f32; 3]) -> Raster {
        Raster {
            width: w,
            height: h,
            pixels: (0..w * h).flat_map(|_| v).collect(),
        }
    }

    #[test]
    fn kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        // a = -0.5 at x = 0.5: (1.5·0.5 − 2.5)·0.25 + 1 = 0.5625
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn card_crop_shapes() {
        let card = noise(421, 614, 1);
        let img = crop_and_resample(&card, &CropBox::square(50, 110, 320), 256).unwrap();
        assert_eq!(img.size(), 256);
        assert_eq!(img.pixels().len(), 256 * 256 * 3);
        let sr = super_resolve_2x(&card.crop(&CropBox::square(50, 110, 320)).unwrap(), &BicubicSr).unwrap();
        assert_eq!((sr.width, sr.height), (640, 640));
    }

    #[test]
    fn identity_and_constant() {
        let src = noise(64, 64, 2);
        let same = crop_and_resample(&src, &CropBox::full(&src), 64).unwrap();
        assert_eq!(same.pixels(), src.pixels.as_slice());
        let c = constant(97, 80, [0.25, -0.7, 0.9]);
        for res in [16, 64, 128] {
            let out = crop_and_resample(&c, &CropBox::square(3, 1, 77), res).unwrap();
            assert!(out.pixels().chunks(3).all(|p| p == [0.25, -0.7, 0.9]), "{res}");
        }
        let up = super_resolve_2x(&c, &BicubicSr).unwrap();
        assert!(up.pixels.chunks(3).all(|p| p == [0.25, -0.7, 0.9]));
    }

    #[test]
    fn fallback_matches_resampler() {
        let src = noise(32, 32, 3);
        let sr = super_resolve_2x(&src, &BicubicSr).unwrap().into_image().unwrap();
        let direct = crop_and_resample(&src, &CropBox::full(&src), 64).unwrap();
        assert_eq!(sr, direct);
    }

    #[test]
    fn errors() {
        let src = noise(16, 16, 4);
        assert!(matches!(crop_and_resample(&src, &CropBox::square(8, 8, 9), 8), Err(Error::InvalidArgument(_))));
        assert!(matches!(crop_and_resample(&src, &CropBox::full(&src), 12), Err(Error::InvalidArgument(_))));
        assert!(matches!(sr_backend("esrgan"), Err(Error::Config(_))));
    }

    #[test]
    fn output_stays_in_range() {
        let mut src = noise(40, 40, 5);
        for (i, v) in src.pixels.iter_mut().enumerate() {
            *v = if (i / 3) % 2 == 0 { 1.0 } else { -1.0 };
        }
        let out = resample(&src, 97, 97).unwrap();
        assert!(out.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
