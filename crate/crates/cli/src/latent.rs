use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Subcommand;
use gatedgan::data::{crop_and_resample, CropBox, Raster};
use gatedgan::latent::{compute_pca_basis, mix_grid, project, tile_grid, LatentArchive, ProjectOptions};
use gatedgan::model::{sample_noise, truncate, GeneratorCheckpoint, LatentWPlus, LatentZ};
use serde_json::json;

use crate::{emit, parse_seeds};

#[derive(Subcommand)]
pub enum LatentCommand {
    /// PCA basis of the mapped latent distribution.
    Pca {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recovers a W+ latent (and fine noise) reproducing an image.
    Project {
        #[arg(long)]
        ckpt: PathBuf,
        /// Centre-cropped and resampled when not already at model resolution.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        /// Optimize W+ only.
        #[arg(long)]
        no_noise: bool,
        /// Also write the reconstruction as PNG.
        #[arg(long)]
        render: Option<PathBuf>,
        /// Loss trace and summary as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Style-mixing grid: rows take coarse layers from `--coarse`, columns
    /// the remaining layers from `--fine`.
    MixGrid {
        #[arg(long)]
        ckpt: PathBuf,
        /// Seeds such as `1,2,5-7`.
        #[arg(long)]
        coarse: String,
        #[arg(long)]
        fine: String,
        #[arg(long)]
        cutoff: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long, default_value_t = 1.0)]
        psi: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Renders a latent archive.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_ckpt(p: &Path) -> Result<GeneratorCheckpoint> {
    GeneratorCheckpoint::load(p).with_context(|| p.display().to_string())
}

fn model_id(p: &Path) -> String {
    p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn seeded(ckpt: &GeneratorCheckpoint, seeds: &[u64], psi: f32) -> Result<Vec<LatentWPlus>> {
    let g = &ckpt.generator;
    let w_mean = ckpt.require_w_mean()?;
    seeds
        .iter()
        .map(|&s| {
            let w = g.map_latent(&LatentZ::from_seed(s, g.arch().latent_dim))?;
            truncate(&LatentWPlus::broadcast(&w, g.num_ws()), psi, w_mean, g.num_ws())
        })
        .collect::<gatedgan::Result<_>>()
        .map_err(Into::into)
}

pub fn run(cmd: LatentCommand) -> Result<()> {
    match cmd {
        LatentCommand::Pca { ckpt, n, seed, out } => {
            let c = load_ckpt(&ckpt)?;
            let basis = compute_pca_basis(&c, n, seed)?;
            basis.save(&out)?;
            let top: Vec<f64> = basis.variances.iter().take(10).copied().collect();
            tracing::info!(k = basis.k(), "wrote {}", out.display());
            println!("{}", json!({ "components": basis.k(), "top_variances": top }));
            Ok(())
        }
        LatentCommand::Project {
            ckpt,
            image,
            out,
            steps,
            lr,
            no_noise,
            render,
            report,
        } => {
            let c = load_ckpt(&ckpt)?;
            let res = c.arch().resolution;
            let bytes = std::fs::read(&image).with_context(|| image.display().to_string())?;
            let raster = Raster::decode(&bytes)?;
            let side = raster.width.min(raster.height);
            let crop = CropBox::square((raster.width - side) / 2, (raster.height - side) / 2, side);
            let target = crop_and_resample(&raster, &crop, res)?;
            let mut opts = ProjectOptions::default();
            if let Some(s) = steps {
                opts.steps = s;
            }
            if let Some(l) = lr {
                opts.lr = l;
            }
            opts.optimize_noise = !no_noise;
            let r = project(&target, &c, &opts)?;
            let provenance = json!({ "source_image": image, "projection": opts, "best_step": r.best_step });
            let archive = LatentArchive::new(model_id(&ckpt), &c, r.w_plus.clone(), &r.noise, provenance)?;
            archive.save(&out)?;
            let mse = r.final_image.mse(&target);
            if let Some(p) = render {
                std::fs::write(&p, r.final_image.to_png()).with_context(|| p.display().to_string())?;
            }
            let summary = json!({
                "archive": out,
                "best_step": r.best_step,
                "mse": mse,
                "initial_loss": r.loss_trace.first().map(|t| t.1),
                "final_loss": r.loss_trace.last().map(|t| t.1),
            });
            if let Some(p) = report {
                let full = json!({ "summary": summary, "loss_trace": r.loss_trace });
                emit(Some(&p), &serde_json::to_string_pretty(&full)?)?;
            }
            println!("{summary}");
            Ok(())
        }
        LatentCommand::MixGrid {
            ckpt,
            coarse,
            fine,
            cutoff,
            noise_seed,
            psi,
            out,
        } => {
            let coarse = parse_seeds(&coarse).map_err(anyhow::Error::msg)?;
            let fine = parse_seeds(&fine).map_err(anyhow::Error::msg)?;
            let c = load_ckpt(&ckpt)?;
            let noise = sample_noise(noise_seed, c.arch());
            let grid = mix_grid(&c, &seeded(&c, &coarse, psi)?, &seeded(&c, &fine, psi)?, cutoff, &noise)?;
            tile_grid(&grid)?
                .save_with_format(&out, image::ImageFormat::Png)
                .with_context(|| out.display().to_string())
        }
        LatentCommand::Render { ckpt, archive, out } => {
            let c = load_ckpt(&ckpt)?;
            let a = LatentArchive::load(&archive)?;
            a.check_compatible(&c)?;
            let img = c
                .generator
                .synthesize(&a.w_plus, &a.noise_buffers(c.arch())?, &c.gates)?;
            std::fs::write(&out, img.to_png()).with_context(|| out.display().to_string())?;
            Ok(())
        }
    }
}
