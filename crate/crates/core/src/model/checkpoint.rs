use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Discriminator, Generator, GeneratorLayout, LatentW, NoiseGateConfig};
use super::network::DiscriminatorLayout;
use crate::container::{Archive, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "generator-checkpoint";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    arch_config: ArchConfig,
    gate_config: NoiseGateConfig,
    ema_decay: f32,
    #[serde(default)]
    info: serde_json::Value,
}

/// Generator (EMA weights for inference), optional discriminator, gate
/// configuration and latent statistics.
#[derive(Debug, Clone)]
pub struct GeneratorCheckpoint {
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub gates: NoiseGateConfig,
    pub w_mean: Option<LatentW>,
    /// Per-step EMA coefficient in effect when the checkpoint was written.
    pub ema_decay: f32,
    /// Free-form provenance (training progress, seeds).
    pub info: serde_json::Value,
}

impl GeneratorCheckpoint {
    pub fn new(generator: Generator, gates: NoiseGateConfig) -> Result<Self> {
        gates.validate(generator.arch())?;
        Ok(Self {
            generator,
            discriminator: None,
            gates,
            w_mean: None,
            ema_decay: 0.0,
            info: serde_json::Value::Null,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        self.generator.arch()
    }

    pub fn require_w_mean(&self) -> Result<&LatentW> {
        self.w_mean
            .as_ref()
            .ok_or_else(|| Error::config("checkpoint has no w_mean; estimate it before generating"))
    }

    pub fn to_archive(&self) -> Archive {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            arch_config: self.arch().clone(),
            gate_config: self.gates.clone(),
            ema_decay: self.ema_decay,
            info: self.info.clone(),
        };
        let mut a = Archive::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serializes"));
        for (name, t) in self.generator.params().iter() {
            a.push(format!("G/{name}"), t.clone());
        }
        if let Some(d) = &self.discriminator {
            for (name, t) in d.params().iter() {
                a.push(format!("D/{name}"), t.clone());
            }
        }
        if let Some(w) = &self.w_mean {
            a.push("w_mean", Tensor::from_parts(vec![w.dim()], w.values().to_vec()));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != CHECKPOINT_KIND {
            return Err(Error::config(format!("archive kind '{}' is not a checkpoint", a.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(a.meta.clone())?;
        meta.arch_config.validate()?;
        meta.gate_config.validate(&meta.arch_config)?;
        let mut g_named = HashMap::new();
        let mut d_named = HashMap::new();
        let mut w_mean = None;
        for (name, t) in &a.tensors {
            if let Some(n) = name.strip_prefix("G/") {
                g_named.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("D/") {
                d_named.insert(n.to_string(), t.clone());
            } else if name == "w_mean" {
                w_mean = Some(LatentW::new(t.data().to_vec())?);
            }
        }
        let arch = &meta.arch_config;
        let g_layout = GeneratorLayout::new(arch);
        let generator = Generator::from_params(arch, ParamStore::from_named(g_layout.specs(), &g_named)?)?;
        let discriminator = if d_named.is_empty() {
            None
        } else {
            let d_layout = DiscriminatorLayout::new(arch);
            Some(Discriminator::from_params(
                arch,
                ParamStore::from_named(d_layout.specs(), &d_named)?,
            )?)
        };
        if let Some(w) = &w_mean {
            if w.dim() != arch.latent_dim {
                return Err(Error::ArchitectureMismatch("w_mean dimension differs from latent_dim".into()));
            }
        }
        Ok(Self {
            generator,
            discriminator,
            gates: meta.gate_config,
            w_mean,
            ema_decay: meta.ema_decay,
            info: meta.info,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&Archive::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
