use serde::{Deserialize, Serialize};

use super::pca::{apply_pca_edits, PcaBasis, PcaEdit};
use crate::error::{Error, Result};
use crate::model::{
    sample_noise, style_mix, truncate, GeneratorCheckpoint, ImageTensor, LatentWPlus, LatentZ, NoiseBuffers,
    StyleMixSpec,
};

/// Slider ranges shared by request validation and clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLimits {
    pub truncation: (f32, f32),
    pub cutoff: (usize, usize),
    pub strength: (f32, f32),
    pub direction: (usize, usize),
    pub weight: (f32, f32),
    pub max_pca_edits: usize,
}

impl SessionLimits {
    /// Ranges for a model with `num_ws` style inputs.
    pub fn for_model(num_ws: usize) -> Self {
        Self {
            truncation: (-2.0, 2.0),
            cutoff: (0, num_ws.saturating_sub(1)),
            strength: (0.0, 1.0),
            direction: (0, 511),
            weight: (-40.0, 40.0),
            max_pca_edits: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn default_truncation() -> f32 {
    1.0
}

/// Everything that determines one rendered image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    pub model_id: String,
    pub latent_seed: i64,
    pub noise_seed: i64,
    #[serde(default = "default_truncation")]
    pub truncation: f32,
    #[serde(default)]
    pub style_mix: Option<StyleMixSpec>,
    #[serde(default)]
    pub pca_edits: Vec<PcaEdit>,
    /// Replaces the seed-derived latent when present.
    #[serde(default)]
    pub explicit_w_plus: Option<LatentWPlus>,
}

impl EditSession {
    pub fn new(model_id: impl Into<String>, latent_seed: i64, noise_seed: i64) -> Self {
        Self {
            model_id: model_id.into(),
            latent_seed,
            noise_seed,
            truncation: 1.0,
            style_mix: None,
            pca_edits: Vec::new(),
            explicit_w_plus: None,
        }
    }

    /// Every range violation, by field path.
    pub fn field_errors(&self, limits: &SessionLimits, basis_k: Option<usize>) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut err = |field: String, message: String| errs.push(FieldError { field, message });
        let (lo, hi) = limits.truncation;
        if !(lo..=hi).contains(&self.truncation) {
            err("truncation".into(), format!("{} outside [{lo}, {hi}]", self.truncation));
        }
        if let Some(m) = &self.style_mix {
            let (lo, hi) = limits.cutoff;
            if !(lo..=hi).contains(&m.cutoff) {
                err("style_mix.cutoff".into(), format!("{} outside [{lo}, {hi}]", m.cutoff));
            }
            let (lo, hi) = limits.strength;
            if !(lo..=hi).contains(&m.strength) {
                err("style_mix.strength".into(), format!("{} outside [{lo}, {hi}]", m.strength));
            }
        }
        if self.pca_edits.len() > limits.max_pca_edits {
            err(
                "pca_edits".into(),
                format!("{} edits, at most {} allowed", self.pca_edits.len(), limits.max_pca_edits),
            );
        }
        for (i, e) in self.pca_edits.iter().enumerate() {
            let (lo, hi) = limits.direction;
            if !(lo..=hi).contains(&e.direction_index) {
                err(
                    format!("pca_edits[{i}].direction_index"),
                    format!("{} outside [{lo}, {hi}]", e.direction_index),
                );
            } else if let Some(k) = basis_k {
                if e.direction_index >= k {
                    err(
                        format!("pca_edits[{i}].direction_index"),
                        format!("{} but the basis has {k} directions", e.direction_index),
                    );
                }
            }
            let (lo, hi) = limits.weight;
            if !(lo..=hi).contains(&e.weight) {
                err(format!("pca_edits[{i}].weight"), format!("{} outside [{lo}, {hi}]", e.weight));
            }
        }
        errs
    }

    pub fn validate(&self, limits: &SessionLimits, basis_k: Option<usize>) -> Result<()> {
        let errs = self.field_errors(limits, basis_k);
        if errs.is_empty() {
            return Ok(());
        }
        let msg: Vec<String> = errs.iter().map(|e| format!("{}: {}", e.field, e.message)).collect();
        Err(Error::invalid(msg.join("; ")))
    }
}

/// Final latent and noise of a session, applied in the fixed order
/// seeds, truncation, style mix, PCA edits.
pub fn session_latent(
    session: &EditSession,
    ckpt: &GeneratorCheckpoint,
    basis: Option<&PcaBasis>,
) -> Result<(LatentWPlus, NoiseBuffers)> {
    let g = &ckpt.generator;
    let (l, d) = (g.num_ws(), g.arch().latent_dim);
    session.validate(&SessionLimits::for_model(l), basis.map(PcaBasis::k))?;
    let w_mean = ckpt.require_w_mean()?;
    let seeded = |seed: u64| -> Result<LatentWPlus> {
        let w = g.map_latent(&LatentZ::from_seed(seed, d))?;
        Ok(LatentWPlus::broadcast(&w, l))
    };
    let base = match &session.explicit_w_plus {
        Some(w) => {
            if w.num_layers() != l || w.dim() != d {
                return Err(Error::ArchitectureMismatch(format!(
                    "explicit W+ is {}x{}, model expects {l}x{d}",
                    w.num_layers(),
                    w.dim()
                )));
            }
            w.clone()
        }
        None => seeded(session.latent_seed as u64)?,
    };
    let mut w = truncate(&base, session.truncation, w_mean, l)?;
    if let Some(spec) = &session.style_mix {
        let style = truncate(&seeded(spec.mix_seed)?, session.truncation, w_mean, l)?;
        w = style_mix(&w, &style, spec)?;
    }
    if !session.pca_edits.is_empty() {
        let basis = basis.ok_or_else(|| Error::config("PCA edits need a basis for this model"))?;
        w = apply_pca_edits(&w, basis, &session.pca_edits)?;
    }
    Ok((w, sample_noise(session.noise_seed as u64, g.arch())))
}

pub fn render_session(
    session: &EditSession,
    ckpt: &GeneratorCheckpoint,
    basis: Option<&PcaBasis>,
) -> Result<(ImageTensor, LatentWPlus, NoiseBuffers)> {
    let (w, noise) = session_latent(session, ckpt, basis)?;
    let img = ckpt.generator.synthesize(&w, &noise, &ckpt.gates)?;
    Ok((img, w, noise))
}
