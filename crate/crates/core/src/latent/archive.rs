use serde::{Deserialize, Serialize};

use crate::container::Archive;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, GeneratorCheckpoint, LatentWPlus, NoiseBuffers, NoiseGateConfig};
use crate::tensor::Tensor;

pub const LATENT_KIND: &str = "latent";
pub const LATENT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LatentMeta {
    format_version: u32,
    model_id: String,
    resolution: usize,
    num_ws: usize,
    latent_dim: usize,
    gate_config: NoiseGateConfig,
    /// Indices of the noise sites stored in the archive.
    noise_sites: Vec<usize>,
    #[serde(default)]
    provenance: serde_json::Value,
}

/// Self-contained W+ latent plus the noise needed to re-render it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentArchive {
    pub model_id: String,
    pub resolution: usize,
    pub gates: NoiseGateConfig,
    pub w_plus: LatentWPlus,
    /// One entry per noise site; `None` where the site is not stored.
    pub noise: Vec<Option<Tensor>>,
    pub provenance: serde_json::Value,
}

impl LatentArchive {
    /// Stores only the noise at gated-on sites; gated-off sites cannot
    /// affect the image.
    pub fn new(
        model_id: impl Into<String>,
        ckpt: &GeneratorCheckpoint,
        w_plus: LatentWPlus,
        noise: &NoiseBuffers,
        provenance: serde_json::Value,
    ) -> Result<Self> {
        let arch = ckpt.arch();
        noise.validate(arch)?;
        let kept = arch
            .noise_sites()
            .iter()
            .zip(&noise.buffers)
            .map(|(s, b)| ckpt.gates.is_enabled(s.resolution).then(|| b.clone()))
            .collect();
        let a = Self {
            model_id: model_id.into(),
            resolution: arch.resolution,
            gates: ckpt.gates.clone(),
            w_plus,
            noise: kept,
            provenance,
        };
        a.check_compatible(ckpt)?;
        Ok(a)
    }

    /// Full noise set; sites not stored are zeros.
    pub fn noise_buffers(&self, arch: &ArchConfig) -> Result<NoiseBuffers> {
        let sites = arch.noise_sites();
        if sites.len() != self.noise.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "archive has {} noise sites, model has {}",
                self.noise.len(),
                sites.len()
            )));
        }
        let buffers = sites
            .iter()
            .zip(&self.noise)
            .map(|(s, b)| b.clone().unwrap_or_else(|| Tensor::zeros(&[s.resolution, s.resolution])))
            .collect();
        let nb = NoiseBuffers { seed: None, buffers };
        nb.validate(arch)?;
        Ok(nb)
    }

    /// Architecture and gate agreement with a target model.
    pub fn check_compatible(&self, ckpt: &GeneratorCheckpoint) -> Result<()> {
        let arch = ckpt.arch();
        let mut problems = Vec::new();
        if self.resolution != arch.resolution {
            problems.push(format!("resolution {} vs {}", self.resolution, arch.resolution));
        }
        if self.w_plus.num_layers() != arch.num_ws() {
            problems.push(format!("L {} vs {}", self.w_plus.num_layers(), arch.num_ws()));
        }
        if self.w_plus.dim() != arch.latent_dim {
            problems.push(format!("D {} vs {}", self.w_plus.dim(), arch.latent_dim));
        }
        if self.gates != ckpt.gates {
            problems.push(format!("gates {} vs {}", self.gates.describe(), ckpt.gates.describe()));
        }
        if self.noise.len() != arch.noise_sites().len() {
            problems.push(format!("noise sites {} vs {}", self.noise.len(), arch.noise_sites().len()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ArchitectureMismatch(format!(
                "latent archive from '{}' does not fit this model: {}",
                self.model_id,
                problems.join(", ")
            )))
        }
    }

    pub fn to_archive(&self) -> Archive {
        let meta = LatentMeta {
            format_version: LATENT_FORMAT_VERSION,
            model_id: self.model_id.clone(),
            resolution: self.resolution,
            num_ws: self.w_plus.num_layers(),
            latent_dim: self.w_plus.dim(),
            gate_config: self.gates.clone(),
            noise_sites: (0..self.noise.len()).filter(|i| self.noise[*i].is_some()).collect(),
            provenance: self.provenance.clone(),
        };
        let mut a = Archive::new(LATENT_KIND, serde_json::to_value(&meta).expect("meta serializes"));
        let mut w = self.w_plus.to_tensor();
        w = w.reshape(&[self.w_plus.num_layers(), self.w_plus.dim()]).expect("same size");
        a.push("w_plus", w);
        for (i, b) in self.noise.iter().enumerate() {
            if let Some(b) = b {
                a.push(format!("noise/{i}"), b.clone());
            }
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != LATENT_KIND {
            return Err(Error::config(format!("archive kind '{}' is not a latent archive", a.kind)));
        }
        let meta: LatentMeta = serde_json::from_value(a.meta.clone())?;
        if meta.format_version != LATENT_FORMAT_VERSION {
            return Err(Error::config(format!("unsupported latent format {}", meta.format_version)));
        }
        let w_plus = LatentWPlus::from_tensor(a.require("w_plus")?)?;
        if w_plus.num_layers() != meta.num_ws || w_plus.dim() != meta.latent_dim {
            return Err(Error::config("w_plus shape disagrees with the archive header"));
        }
        // one site at 4x4 plus two per higher resolution
        let n_sites = meta.num_ws.saturating_sub(1);
        let mut noise = vec![None; n_sites];
        for i in meta.noise_sites {
            if i >= n_sites {
                return Err(Error::config(format!("noise site {i} out of range")));
            }
            noise[i] = Some(a.require(&format!("noise/{i}"))?.clone());
        }
        Ok(Self {
            model_id: meta.model_id,
            resolution: meta.resolution,
            gates: meta.gate_config,
            w_plus,
            noise,
            provenance: meta.provenance,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&Archive::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
