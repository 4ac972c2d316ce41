use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a generator/discriminator pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Output resolution (square, power of two, at least 8).
    pub resolution: usize,
    /// Dimension of both the input latent z and the mapped latent w.
    pub latent_dim: usize,
    pub mapping_layers: usize,
    /// Learning-rate multiplier of the mapping network.
    pub mapping_lr_mult: f32,
    /// Feature maps at resolution r are `min(channel_base / r, channel_max)`.
    pub channel_base: usize,
    pub channel_max: usize,
    /// Initial value of the per-channel noise strengths.
    pub noise_strength_init: f32,
}

impl ArchConfig {
    /// Small configuration used by tests and desk-scale experiments.
    pub fn toy(resolution: usize) -> Self {
        Self {
            resolution,
            latent_dim: 64,
            mapping_layers: 2,
            mapping_lr_mult: 0.01,
            channel_base: 512,
            channel_max: 32,
            noise_strength_init: 0.0,
        }
    }

    /// Full-size 512-res reference configuration (8-layer mapping, 512-d latents).
    pub fn full_512() -> Self {
        Self {
            resolution: 512,
            latent_dim: 512,
            mapping_layers: 8,
            mapping_lr_mult: 0.01,
            channel_base: 32768,
            channel_max: 512,
            noise_strength_init: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return Err(Error::invalid(format!(
                "resolution {} must be a power of two >= 8",
                self.resolution
            )));
        }
        if self.latent_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::invalid("latent_dim and mapping_layers must be positive"));
        }
        if self.channel_max == 0 || self.channel_base < self.resolution {
            return Err(Error::invalid("channel_base must be at least the resolution"));
        }
        Ok(())
    }

    pub fn log2_res(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }

    /// Synthesis resolutions, coarsest first: 4, 8, …, resolution.
    pub fn resolutions(&self) -> Vec<usize> {
        (2..=self.log2_res()).map(|l| 1usize << l).collect()
    }

    pub fn channels(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_max)
    }

    /// Number of per-layer style inputs: `2·(log2(resolution) − 1)`.
    pub fn num_ws(&self) -> usize {
        2 * (self.log2_res() - 1)
    }

    /// Noise-injection sites in synthesis order: one per convolution.
    pub fn noise_sites(&self) -> Vec<NoiseSite> {
        let mut out = Vec::new();
        for res in self.resolutions() {
            let convs = if res == 4 { 1 } else { 2 };
            for _ in 0..convs {
                out.push(NoiseSite {
                    index: out.len(),
                    resolution: res,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSite {
    pub index: usize,
    pub resolution: usize,
}
