use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ImageTensor;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::stats::Features;

/// Ids accepted by [`extractor`].
pub const EXTRACTORS: [&str; 3] = ["identity", "randproj", "randcnn"];

/// Default for desk-scale FID.
pub const DEFAULT_EXTRACTOR: &str = "randcnn";

/// Deterministic embedding of RGB images in `[-1, 1]`.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &'static str;
    fn embed(&self, images: &[ImageTensor]) -> Result<Features>;
}

pub fn extractor(id: &str) -> Result<Box<dyn FeatureExtractor>> {
    match id {
        "identity" => Ok(Box::new(Identity)),
        "randproj" => Ok(Box::new(RandomProjection::new(64, 0x7e57))),
        "randcnn" => Ok(Box::new(RandomCnn::new(0xc0ffee))),
        other => Err(Error::config(format!(
            "unknown feature extractor '{other}' (available: {})",
            EXTRACTORS.join(", ")
        ))),
    }
}

/// `N × F` features for `images` under extractor `id`.
pub fn extract_features(images: &[ImageTensor], id: &str) -> Result<Features> {
    extractor(id)?.embed(images)
}

fn same_size(images: &[ImageTensor]) -> Result<usize> {
    let size = images.first().map(ImageTensor::size).unwrap_or(0);
    if images.iter().any(|i| i.size() != size) {
        return Err(Error::invalid("images must share one size"));
    }
    Ok(size)
}

/// Raw pixels in `H×W×3` order.
pub struct Identity;

impl FeatureExtractor for Identity {
    fn id(&self) -> &'static str {
        "identity"
    }

    fn embed(&self, images: &[ImageTensor]) -> Result<Features> {
        let size = same_size(images)?;
        let dim = size * size * 3;
        Features::new(images.len(), dim, images.iter().flat_map(|i| i.pixels().to_vec()).collect())
    }
}

/// Fixed Gaussian projection of the pixels, scaled by `1/sqrt(pixels)`.
pub struct RandomProjection {
    dim: usize,
    seed: u64,
}

impl RandomProjection {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl FeatureExtractor for RandomProjection {
    fn id(&self) -> &'static str {
        "randproj"
    }

    fn embed(&self, images: &[ImageTensor]) -> Result<Features> {
        let size = same_size(images)?;
        let p = size * size * 3;
        // one matrix per input size, drawn from a size-specific stream
        let proj = SeededRng::derive(self.seed, p as u64).normals(self.dim * p);
        let k = 1.0 / (p as f32).sqrt();
        let mut data = Vec::with_capacity(images.len() * self.dim);
        for img in images {
            let x = img.pixels();
            for r in 0..self.dim {
                let row = &proj[r * p..(r + 1) * p];
                data.push(k * row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>());
            }
        }
        Features::new(images.len(), self.dim, data)
    }
}

const CNN_WIDTHS: [usize; 3] = [16, 32, 64];

/// Small random convolutional network: three 3×3 conv + leaky-ReLU stages
/// with 2× average pooling between them. Features are the per-channel
/// spatial mean and standard deviation of every stage, so any input size
/// maps to the same `2·(16+32+64) = 224` dimensions.
pub struct RandomCnn {
    weights: Vec<Tensor>,
}

impl RandomCnn {
    pub fn new(seed: u64) -> Self {
        let mut c_in = 3;
        let weights = CNN_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let n = c * c_in * 9;
                let w = SeededRng::derive(seed, i as u64).normals(n);
                c_in = c;
                Tensor::new(vec![c, n / (c * 9), 3, 3], w).expect("sized")
            })
            .collect();
        Self { weights }
    }

    pub fn dim(&self) -> usize {
        2 * CNN_WIDTHS.iter().sum::<usize>()
    }

    /// Stage activations for an NCHW batch recorded on `t`; differentiable
    /// with respect to `img`.
    pub fn feature_maps(&self, t: &mut Tape, img: Var) -> Vec<Var> {
        let mut x = img;
        let mut maps = Vec::new();
        for (i, w) in self.weights.iter().enumerate() {
            if i > 0 && t.shape(x)[2] > 1 {
                x = t.downsample2x(x);
            }
            let fan_in = (w.dim(1) * 9) as f32;
            let wv = t.constant(w.clone());
            let y = t.conv2d(x, wv, (2.0 / fan_in).sqrt());
            x = t.leaky_relu(y, 0.2, 1.0);
            maps.push(x);
        }
        maps
    }

    /// Mean squared difference of stage activations, each stage normalized
    /// by its element count and weighted equally.
    pub fn perceptual_distance(&self, t: &mut Tape, a: Var, b: Var) -> Var {
        let fa = self.feature_maps(t, a);
        let fb = self.feature_maps(t, b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = t.sub(x, y);
            let sq = t.square(d);
            let m = t.mean(sq);
            total = Some(match total {
                Some(acc) => t.add(acc, m),
                None => m,
            });
        }
        let s = total.expect("at least one stage");
        t.scale(s, 1.0 / CNN_WIDTHS.len() as f32)
    }
}

impl FeatureExtractor for RandomCnn {
    fn id(&self) -> &'static str {
        "randcnn"
    }

    fn embed(&self, images: &[ImageTensor]) -> Result<Features> {
        same_size(images)?;
        let dim = self.dim();
        let mut data = Vec::with_capacity(images.len() * dim);
        for chunk in images.chunks(32) {
            let batch = ImageTensor::batch(chunk)?;
            let mut t = Tape::new();
            let x = t.constant(batch);
            let maps = self.feature_maps(&mut t, x);
            let mut rows = vec![Vec::with_capacity(dim); chunk.len()];
            for m in &maps {
                let v = t.value(*m);
                let (c, hw) = (v.dim(1), v.dim(2) * v.dim(3));
                for (i, row) in rows.iter_mut().enumerate() {
                    let item = v.item_slice(i);
                    for ch in 0..c {
                        let plane = &item[ch * hw..(ch + 1) * hw];
                        let mean = plane.iter().map(|x| *x as f64).sum::<f64>() / hw as f64;
                        let var = plane.iter().map(|x| (*x as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
                        row.push(mean as f32);
                        row.push(var.sqrt() as f32);
                    }
                }
            }
            for row in rows {
                data.extend(row);
            }
        }
        Features::new(images.len(), dim, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(size: usize, seed: u64) -> ImageTensor {
        ImageTensor::new(size, SeededRng::new(seed).normals(size * size * 3).iter().map(|v| v.tanh()).collect()).unwrap()
    }

    #[test]
    fn identity_on_gray_images() {
        let img = ImageTensor::new(2, vec![0.1, 0.1, 0.1, -0.5, -0.5, -0.5, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let f = extract_features(&[img.clone()], "identity").unwrap();
        assert_eq!(f.row(0), img.pixels());
    }

    #[test]
    fn shapes_and_determinism() {
        let imgs = vec![noise_image(8, 1), noise_image(8, 2), noise_image(8, 1)];
        for id in EXTRACTORS {
            let f = extract_features(&imgs, id).unwrap();
            assert_eq!(f.n, 3);
            assert_eq!(f.row(0), f.row(2), "{id}");
            assert_ne!(f.row(0), f.row(1), "{id}");
            assert_eq!(f, extract_features(&imgs, id).unwrap());
        }
        assert_eq!(extract_features(&imgs, "randcnn").unwrap().dim, 224);
        assert_eq!(extract_features(&[noise_image(16, 3)], "randcnn").unwrap().dim, 224);
    }

    #[test]
    fn unknown_extractor_is_a_config_error() {
        assert!(matches!(extract_features(&[noise_image(4, 0)], "inception"), Err(Error::Config(_))));
    }

    #[test]
    fn perceptual_distance_is_zero_on_equal_inputs() {
        let cnn = RandomCnn::new(1);
        let mut t = Tape::new();
        let a = t.constant(ImageTensor::batch(&[noise_image(8, 4)]).unwrap());
        let b = t.constant(ImageTensor::batch(&[noise_image(8, 5)]).unwrap());
        let same = cnn.perceptual_distance(&mut t, a, a);
        let diff = cnn.perceptual_distance(&mut t, a, b);
        assert_eq!(t.value(same).item(), 0.0);
        assert!(t.value(diff).item() > 0.0);
    }
}
