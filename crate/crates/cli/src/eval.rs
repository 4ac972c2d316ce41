use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Subcommand;
use gatedgan::data::load_images;
use gatedgan::eval::{
    extractor, fid, image_stats, noise_sensitivity, run_ablation, AblationSpec, FeatureExtractor, FeatureStats,
    DEFAULT_EXTRACTOR,
};
use gatedgan::model::GeneratorCheckpoint;
use serde::Deserialize;
use serde_json::json;

use crate::emit;

#[derive(Subcommand)]
pub enum EvalCommand {
    /// FID between generated images and a reference set.
    Fid {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image directory, packed dataset, or stats file from `eval stats`.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = DEFAULT_EXTRACTOR)]
        extractor: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fits reference statistics once so later FIDs can reuse them.
    Stats {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        res: usize,
        #[arg(long, default_value = DEFAULT_EXTRACTOR)]
        extractor: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs a noise-configuration ablation described by a JSON spec.
    Ablation {
        #[arg(long)]
        spec: PathBuf,
        /// JSON table output; the text table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FID between constant-noise and per-latent-noise renders of the same
    /// latents.
    NoiseSensitivity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed_a: u64,
        #[arg(long, default_value_t = 2)]
        seed_b: u64,
        #[arg(long, default_value = DEFAULT_EXTRACTOR)]
        extractor: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Ablation spec file: the rows, plus where the reference comes from.
/// Relative paths resolve against the spec file's directory.
#[derive(Debug, Deserialize)]
struct AblationFile {
    #[serde(flatten)]
    spec: AblationSpec,
    reference: PathBuf,
    #[serde(default)]
    extractor: Option<String>,
}

fn is_stats_file(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()) == Some("json")
}

/// Reference statistics from a stats file or an image source.
pub fn reference_stats(path: &Path, res: usize, ex: &dyn FeatureExtractor) -> Result<FeatureStats> {
    if is_stats_file(path) {
        let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
        let stats: FeatureStats = serde_json::from_str(&text).with_context(|| path.display().to_string())?;
        stats.validate()?;
        return Ok(stats);
    }
    let images = load_images(path, res).with_context(|| path.display().to_string())?;
    Ok(image_stats(&images, ex)?)
}

fn load_ckpt(p: &Path) -> Result<GeneratorCheckpoint> {
    GeneratorCheckpoint::load(p).with_context(|| p.display().to_string())
}

pub fn run(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Fid {
            ckpt,
            reference,
            n,
            seed,
            extractor: ex_id,
            out,
        } => {
            let c = load_ckpt(&ckpt)?;
            let ex = extractor(&ex_id)?;
            let refs = reference_stats(&reference, c.arch().resolution, ex.as_ref())?;
            let value = fid(&c, &refs, n, seed, ex.as_ref())?;
            let report = json!({
                "checkpoint": ckpt,
                "gates": c.gates.describe(),
                "n_samples": n,
                "seed": seed,
                "extractor": ex_id,
                "fid": value,
            });
            emit(out.as_deref(), &serde_json::to_string_pretty(&report)?)
        }
        EvalCommand::Stats {
            images,
            res,
            extractor: ex_id,
            out,
        } => {
            let ex = extractor(&ex_id)?;
            let imgs = load_images(&images, res).with_context(|| images.display().to_string())?;
            let stats = image_stats(&imgs, ex.as_ref())?;
            std::fs::write(&out, serde_json::to_vec(&stats)?).with_context(|| out.display().to_string())?;
            tracing::info!(n = stats.n, dim = stats.dim(), "wrote {}", out.display());
            Ok(())
        }
        EvalCommand::Ablation { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| spec.display().to_string())?;
            let file: AblationFile = serde_json::from_str(&text).with_context(|| spec.display().to_string())?;
            file.spec.validate()?;
            let base = spec.parent().unwrap_or(Path::new(".")).to_path_buf();
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            let ex_id = file.extractor.clone().unwrap_or_else(|| DEFAULT_EXTRACTOR.to_string());
            let ex = extractor(&ex_id)?;
            let first = file.spec.rows.first().context("ablation spec has no rows")?;
            let res = GeneratorCheckpoint::load(&resolve(&first.checkpoint))?.arch().resolution;
            let reference = resolve(&file.reference.to_string_lossy());
            let refs = reference_stats(&reference, res, ex.as_ref())?;
            let table = run_ablation(
                &file.spec,
                |p| GeneratorCheckpoint::load(&resolve(p)),
                &refs,
                ex.as_ref(),
            )?;
            if let Some(p) = out {
                std::fs::write(&p, table.to_json()).with_context(|| p.display().to_string())?;
            }
            print!("{}", table.to_text());
            Ok(())
        }
        EvalCommand::NoiseSensitivity {
            ckpt,
            n,
            seed_a,
            seed_b,
            extractor: ex_id,
            out,
        } => {
            let c = load_ckpt(&ckpt)?;
            let ex = extractor(&ex_id)?;
            let value = noise_sensitivity(&c, n, seed_a, seed_b, ex.as_ref())?;
            let report = json!({
                "checkpoint": ckpt,
                "gates": c.gates.describe(),
                "n_latents": n,
                "seed_a": seed_a,
                "seed_b": seed_b,
                "extractor": ex_id,
                "fid": value,
            });
            emit(out.as_deref(), &serde_json::to_string_pretty(&report)?)
        }
    }
}
