use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::extract::FeatureExtractor;
use super::stats::{fit_stats, frechet_distance, FeatureStats, StatsAccumulator};
use crate::error::{Error, Result};
use crate::model::{sample_noise, GeneratorCheckpoint, ImageTensor, LatentWPlus, LatentZ, NoiseBuffers, NoiseGateConfig};
use crate::rng::derive_seed;

const BATCH: usize = 16;

/// How noise buffers are chosen across the latents of one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One draw shared by every latent.
    ConstantPerRun,
    /// A fresh draw for each latent.
    RandomPerLatent,
}

impl NoiseMode {
    pub fn label(self) -> &'static str {
        match self {
            NoiseMode::ConstantPerRun => "constant",
            NoiseMode::RandomPerLatent => "random",
        }
    }
}

/// Renders latent `i = 0..n` (from `latent_seed`) without truncation and
/// feeds the images to `sink` batch by batch.
fn render_set(
    ckpt: &GeneratorCheckpoint,
    n: usize,
    latent_seed: u64,
    noise_seed: u64,
    mode: NoiseMode,
    mut sink: impl FnMut(&[ImageTensor]) -> Result<()>,
) -> Result<()> {
    let g = &ckpt.generator;
    let arch = g.arch();
    let shared = sample_noise(noise_seed, arch);
    let mut start = 0;
    while start < n {
        let end = (start + BATCH).min(n);
        let zs: Vec<LatentZ> = (start..end)
            .map(|i| LatentZ::from_seed(derive_seed(latent_seed, i as u64), arch.latent_dim))
            .collect();
        let ws: Vec<LatentWPlus> = g
            .map_latents(&zs)?
            .iter()
            .map(|w| LatentWPlus::broadcast(w, g.num_ws()))
            .collect();
        let own: Vec<NoiseBuffers> = match mode {
            NoiseMode::ConstantPerRun => Vec::new(),
            NoiseMode::RandomPerLatent => (start..end)
                .map(|i| sample_noise(derive_seed(noise_seed, i as u64), arch))
                .collect(),
        };
        let refs: Vec<&NoiseBuffers> = match mode {
            NoiseMode::ConstantPerRun => vec![&shared; end - start],
            NoiseMode::RandomPerLatent => own.iter().collect(),
        };
        let imgs = g.synthesize_batch(&ws, &refs, &ckpt.gates)?;
        sink(&imgs)?;
        start = end;
    }
    Ok(())
}

/// Gaussian fit of `n` generated images.
pub fn generated_stats(
    ckpt: &GeneratorCheckpoint,
    n: usize,
    latent_seed: u64,
    noise_seed: u64,
    mode: NoiseMode,
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureStats> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    let mut acc: Option<StatsAccumulator> = None;
    render_set(ckpt, n, latent_seed, noise_seed, mode, |imgs| {
        let f = extractor.embed(imgs)?;
        acc.get_or_insert_with(|| StatsAccumulator::new(f.dim)).push_all(&f);
        Ok(())
    })?;
    let mut s = acc.expect("n >= 2").finish()?;
    s.extractor = Some(extractor.id().to_string());
    Ok(s)
}

/// Gaussian fit of a set of images.
pub fn image_stats(images: &[ImageTensor], extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    let mut s = fit_stats(&extractor.embed(images)?)?;
    s.extractor = Some(extractor.id().to_string());
    Ok(s)
}

fn check_extractor(a: &FeatureStats, b: &FeatureStats) -> Result<()> {
    match (&a.extractor, &b.extractor) {
        (Some(x), Some(y)) if x != y => Err(Error::config(format!(
            "statistics come from different extractors ({x} vs {y})"
        ))),
        _ => Ok(()),
    }
}

/// FID of `n` random-noise samples against reference statistics.
pub fn fid(
    ckpt: &GeneratorCheckpoint,
    ref_stats: &FeatureStats,
    n: usize,
    seed: u64,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let s = generated_stats(ckpt, n, derive_seed(seed, 0), derive_seed(seed, 1), NoiseMode::RandomPerLatent, extractor)?;
    check_extractor(&s, ref_stats)?;
    frechet_distance(&s, ref_stats)
}

/// FID between two image sets over the same `n_latents` latents: set A
/// shares one noise draw (from `seed_a`) across all latents, set B draws
/// noise per latent (from `seed_b`). Latents derive from `seed_a`.
pub fn noise_sensitivity(
    ckpt: &GeneratorCheckpoint,
    n_latents: usize,
    seed_a: u64,
    seed_b: u64,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    if n_latents < 2 {
        return Err(Error::invalid(format!("noise sensitivity needs n_latents >= 2, got {n_latents}")));
    }
    let latent_seed = derive_seed(seed_a, 0x1a7e);
    let a = generated_stats(ckpt, n_latents, latent_seed, seed_a, NoiseMode::ConstantPerRun, extractor)?;
    let b = generated_stats(ckpt, n_latents, latent_seed, seed_b, NoiseMode::RandomPerLatent, extractor)?;
    frechet_distance(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Gate spec the checkpoint must have been trained with.
    pub gates: String,
    /// Checkpoint reference, resolved by the caller.
    pub checkpoint: String,
    pub noise_mode: NoiseMode,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub rows: Vec<AblationRow>,
    #[serde(default)]
    pub seed: u64,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.label.as_str()) {
                return Err(Error::config(format!("duplicate ablation label '{}'", r.label)));
            }
            if r.n_samples < 2 {
                return Err(Error::config(format!("row '{}' needs n_samples >= 2", r.label)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub gates: String,
    pub noise_mode: NoiseMode,
    pub n_samples: usize,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub extractor: String,
    pub rows: Vec<AblationResult>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let head = ["Configuration", "Gates", "Noise", "N", "FID"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    r.gates.clone(),
                    r.noise_mode.label().to_string(),
                    r.n_samples.to_string(),
                    format!("{:.3}", r.fid),
                ]
            })
            .collect();
        let mut w: Vec<usize> = head.iter().map(|h| h.len()).collect();
        for row in &cells {
            for (i, c) in row.iter().enumerate() {
                w[i] = w[i].max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i >= 3 {
                        format!("{c:>width$}", width = w[i])
                    } else {
                        format!("{c:<width$}", width = w[i])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &head.map(String::from));
        let _ = writeln!(out, "{}", "-".repeat(w.iter().sum::<usize>() + 2 * (w.len() - 1)));
        for row in &cells {
            line(&mut out, row);
        }
        let _ = writeln!(out, "extractor: {}", self.extractor);
        out
    }
}

/// Evaluates every row of `spec` against `ref_stats`. `resolve` maps a
/// row's checkpoint reference to a loaded checkpoint.
pub fn run_ablation(
    spec: &AblationSpec,
    mut resolve: impl FnMut(&str) -> Result<GeneratorCheckpoint>,
    ref_stats: &FeatureStats,
    extractor: &dyn FeatureExtractor,
) -> Result<AblationTable> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.rows.len());
    for (i, r) in spec.rows.iter().enumerate() {
        let ckpt = resolve(&r.checkpoint).map_err(|e| match e {
            Error::Io { .. } => Error::config(format!("checkpoint '{}' for row '{}' is missing", r.checkpoint, r.label)),
            other => other,
        })?;
        let expected = NoiseGateConfig::parse(&r.gates, ckpt.arch())?;
        if expected != ckpt.gates {
            return Err(Error::config(format!(
                "row '{}' expects gates {} but checkpoint '{}' has {}",
                r.label,
                expected.describe(),
                r.checkpoint,
                ckpt.gates.describe()
            )));
        }
        let base = derive_seed(spec.seed, i as u64);
        let s = generated_stats(&ckpt, r.n_samples, derive_seed(spec.seed, 0xa11), base, r.noise_mode, extractor)?;
        check_extractor(&s, ref_stats)?;
        rows.push(AblationResult {
            label: r.label.clone(),
            gates: ckpt.gates.describe(),
            noise_mode: r.noise_mode,
            n_samples: r.n_samples,
            fid: frechet_distance(&s, ref_stats)?,
        });
    }
    Ok(AblationTable {
        extractor: extractor.id().to_string(),
        rows,
    })
}
