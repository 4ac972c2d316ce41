//! Style-based generator with per-resolution noise gates, its
//! discriminator, and the checkpoint that carries both.

mod checkpoint;
mod config;
mod image;
mod latent;
mod network;
mod noise;

pub use checkpoint::{GeneratorCheckpoint, CHECKPOINT_KIND};
pub use config::{ArchConfig, NoiseSite};
pub use image::ImageTensor;
pub use latent::{style_mix, truncate, LatentW, LatentWPlus, LatentZ, StyleMixSpec};
pub use network::{DiscriminatorLayout, GeneratorLayout};
pub use noise::{sample_noise, NoiseBuffers, NoiseGateConfig};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Mapping + synthesis network with its parameters.
#[derive(Debug, Clone)]
pub struct Generator {
    layout: GeneratorLayout,
    params: ParamStore,
}

impl Generator {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = GeneratorLayout::new(arch);
        let params = network::init_generator(&layout, seed);
        Ok(Self { layout, params })
    }

    pub fn from_params(arch: &ArchConfig, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        let layout = GeneratorLayout::new(arch);
        let names_match = params.len() == layout.specs().len()
            && layout
                .specs()
                .iter()
                .enumerate()
                .all(|(i, s)| params.name(i) == s.name && params.get(i).shape() == s.shape.as_slice());
        if !names_match {
            return Err(Error::ArchitectureMismatch(
                "generator parameters do not match the architecture".into(),
            ));
        }
        Ok(Self { layout, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.layout.arch
    }

    pub fn layout(&self) -> &GeneratorLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_ws(&self) -> usize {
        self.arch().num_ws()
    }

    /// Maps a batch of latents; each row is pre-normalized to radius √D.
    pub fn map_latents(&self, zs: &[LatentZ]) -> Result<Vec<LatentW>> {
        let d = self.arch().latent_dim;
        if let Some(z) = zs.iter().find(|z| z.dim() != d) {
            return Err(Error::invalid(format!(
                "latent has dimension {}, model expects {d}",
                z.dim()
            )));
        }
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let data = zs.iter().flat_map(|z| z.normalized()).collect();
        let z = t.constant(Tensor::from_parts(vec![zs.len(), d], data));
        let w = self.layout.mapping(&mut t, &p, z);
        let out = t.value(w);
        if !out.is_finite() {
            return Err(Error::numeric("mapping network produced non-finite values"));
        }
        out.data().chunks(d).map(|c| LatentW::new(c.to_vec())).collect()
    }

    pub fn map_latent(&self, z: &LatentZ) -> Result<LatentW> {
        Ok(self.map_latents(std::slice::from_ref(z))?.remove(0))
    }

    fn check_wplus(&self, w: &LatentWPlus) -> Result<()> {
        if w.num_layers() != self.num_ws() || w.dim() != self.arch().latent_dim {
            return Err(Error::invalid(format!(
                "W+ latent is {}x{}, model expects {}x{}",
                w.num_layers(),
                w.dim(),
                self.num_ws(),
                self.arch().latent_dim
            )));
        }
        Ok(())
    }

    /// Records synthesis of a batch of W+ latents on `tape`; used by the
    /// inference and optimization paths alike.
    pub fn synthesis_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        ws: Var,
        noise: &[Var],
        gates: &NoiseGateConfig,
    ) -> Var {
        self.layout.synthesis(tape, params, ws, noise, gates)
    }

    /// Renders a batch; sample `i` uses `latents[i]` and `noises[i]`.
    pub fn synthesize_batch(
        &self,
        latents: &[LatentWPlus],
        noises: &[&NoiseBuffers],
        gates: &NoiseGateConfig,
    ) -> Result<Vec<ImageTensor>> {
        gates.validate(self.arch())?;
        if latents.len() != noises.len() {
            return Err(Error::invalid("one noise set per latent is required"));
        }
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for (w, nz) in latents.iter().zip(noises) {
            self.check_wplus(w)?;
            nz.validate(self.arch())?;
        }
        let n = latents.len();
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let (l, d) = (self.num_ws(), self.arch().latent_dim);
        let ws_data = latents.iter().flat_map(|w| w.layers().concat()).collect();
        let ws = t.constant(Tensor::from_parts(vec![n, l, d], ws_data));
        let noise_vars: Vec<Var> = self
            .arch()
            .noise_sites()
            .iter()
            .map(|site| {
                let r = site.resolution;
                if !gates.is_enabled(r) {
                    // never read by the synthesis graph
                    return t.constant(Tensor::zeros(&[1, 1, r, r]));
                }
                let data = noises.iter().flat_map(|nz| nz.buffers[site.index].data().to_vec()).collect();
                t.constant(Tensor::from_parts(vec![n, 1, r, r], data))
            })
            .collect();
        let img = self.layout.synthesis(&mut t, &p, ws, &noise_vars, gates);
        let out = t.value(img);
        (0..n).map(|i| ImageTensor::from_batch(out, i)).collect()
    }

    pub fn synthesize(&self, w_plus: &LatentWPlus, noise: &NoiseBuffers, gates: &NoiseGateConfig) -> Result<ImageTensor> {
        Ok(self.synthesize_batch(std::slice::from_ref(w_plus), &[noise], gates)?.remove(0))
    }

    /// Average of `n` mapped latents drawn from `seed`.
    pub fn estimate_w_mean(&self, n: usize, seed: u64) -> Result<LatentW> {
        let d = self.arch().latent_dim;
        let mut rng = crate::rng::SeededRng::new(seed);
        let mut acc = vec![0.0f64; d];
        let mut done = 0;
        while done < n {
            let b = (n - done).min(512);
            let zs: Vec<LatentZ> = (0..b).map(|_| LatentZ::new(rng.normals(d))).collect::<Result<_>>()?;
            for w in self.map_latents(&zs)? {
                for (a, v) in acc.iter_mut().zip(w.values()) {
                    *a += *v as f64;
                }
            }
            done += b;
        }
        LatentW::new(acc.into_iter().map(|a| (a / n as f64) as f32).collect())
    }
}

/// Residual discriminator with its parameters.
#[derive(Debug, Clone)]
pub struct Discriminator {
    layout: DiscriminatorLayout,
    params: ParamStore,
}

impl Discriminator {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = DiscriminatorLayout::new(arch);
        let params = network::init_discriminator(&layout, seed);
        Ok(Self { layout, params })
    }

    pub fn from_params(arch: &ArchConfig, params: ParamStore) -> Result<Self> {
        let layout = DiscriminatorLayout::new(arch);
        let ok = params.len() == layout.specs().len()
            && layout
                .specs()
                .iter()
                .enumerate()
                .all(|(i, s)| params.name(i) == s.name && params.get(i).shape() == s.shape.as_slice());
        if !ok {
            return Err(Error::ArchitectureMismatch(
                "discriminator parameters do not match the architecture".into(),
            ));
        }
        Ok(Self { layout, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.layout.arch
    }

    pub fn layout(&self) -> &DiscriminatorLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Logits for a batch of images.
    pub fn discriminate(&self, images: &[ImageTensor]) -> Result<Vec<f32>> {
        let r = self.arch().resolution;
        if let Some(bad) = images.iter().find(|i| i.size() != r) {
            return Err(Error::invalid(format!(
                "discriminator expects {r}x{r} images, got {0}x{0}",
                bad.size()
            )));
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let batch = ImageTensor::batch(images)?;
        self.logits(&batch)
    }

    /// Logits for an NCHW batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Vec<f32>> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let x = t.constant(batch.clone());
        let y = self.layout.forward(&mut t, &p, x);
        let out = t.value(y).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("discriminator produced a non-finite logit"));
        }
        Ok(out)
    }
}

/// Seeds → W+ → truncation → synthesis; returns every intermediate.
pub fn generate(
    latent_seed: u64,
    noise_seed: u64,
    psi: f32,
    ckpt: &GeneratorCheckpoint,
) -> Result<(ImageTensor, LatentWPlus, NoiseBuffers)> {
    let g = &ckpt.generator;
    let w_mean = ckpt.require_w_mean()?;
    let z = LatentZ::from_seed(latent_seed, g.arch().latent_dim);
    let w = g.map_latent(&z)?;
    let w_plus = truncate(&LatentWPlus::broadcast(&w, g.num_ws()), psi, w_mean, g.num_ws())?;
    let noise = sample_noise(noise_seed, g.arch());
    let img = g.synthesize(&w_plus, &noise, &ckpt.gates)?;
    Ok((img, w_plus, noise))
}

#[cfg(test)]
mod tests;
