use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use gatedgan::data::{
    apply_prune_list, fetch_catalog, instance_selection_scores, pack_dataset, process_entries, sr_backend,
    super_resolve_2x, CatalogSource, CropBox, DatasetManifest, FetchOptions, ProcessOptions, Raster, MANIFEST_FILE,
};
use gatedgan::eval::{extractor, DEFAULT_EXTRACTOR};
use gatedgan::model::ImageTensor;
use serde_json::json;

use crate::emit;

#[derive(Subcommand)]
pub enum DataCommand {
    /// Downloads (or copies from a mirror) every catalog entry.
    Fetch {
        /// `http(s)://` API base or a local mirror directory.
        #[arg(long)]
        source: String,
        /// Dataset directory; receives `raw/` and `manifest.json`.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 256)]
        res: usize,
        #[arg(long, default_value_t = 3)]
        retries: u32,
        #[arg(long, default_value_t = 200)]
        backoff_ms: u64,
    },
    /// Crops the art region of every kept entry and resamples it to the
    /// manifest resolution, writing `processed/`.
    Crop {
        #[arg(long)]
        dir: PathBuf,
        /// `x,y,width,height` for entries without their own crop box;
        /// the centred square otherwise.
        #[arg(long, value_parser = parse_crop)]
        crop: Option<CropBox>,
        /// Upscale 2x with this backend before resampling.
        #[arg(long)]
        sr: Option<String>,
    },
    /// Upscales one image 2x.
    Sr {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "bicubic")]
        backend: String,
    },
    /// Marks the ids in a prune list (`id reason…` per line) as pruned.
    Prune {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        list: PathBuf,
    },
    /// Scores processed images by embedding density. Advisory unless
    /// `--apply` is given.
    Select {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        keep: f64,
        #[arg(long, default_value = DEFAULT_EXTRACTOR)]
        embedding: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Prune the entries flagged for dropping.
        #[arg(long)]
        apply: bool,
    },
    /// Packs every kept, processed entry into one dataset file.
    Pack {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn parse_crop(s: &str) -> Result<CropBox, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad crop component '{p}'")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, width, height] if width > 0 && height > 0 => Ok(CropBox { x, y, width, height }),
        _ => Err("crop must be x,y,width,height with a positive size".into()),
    }
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let p = manifest_path(dir);
    DatasetManifest::load(&p).with_context(|| p.display().to_string())
}

pub fn run(cmd: DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Fetch {
            source,
            dir,
            res,
            retries,
            backoff_ms,
        } => {
            let opts = FetchOptions {
                resolution: res,
                retries,
                backoff: std::time::Duration::from_millis(backoff_ms),
            };
            let (m, report) = fetch_catalog(&CatalogSource::parse(&source), &dir, &opts)?;
            println!(
                "{}",
                json!({
                    "entries": m.entries.len(),
                    "downloaded": report.downloaded,
                    "skipped": report.skipped,
                    "failed": report.failed,
                })
            );
            Ok(())
        }
        DataCommand::Crop { dir, crop, sr } => {
            let m = load_manifest(&dir)?;
            let opts = ProcessOptions {
                default_crop: crop,
                sr_backend: sr,
            };
            let out = process_entries(&m, &dir, &opts)?;
            out.save(&manifest_path(&dir))?;
            tracing::info!(processed = out.kept().count(), "processed entries");
            Ok(())
        }
        DataCommand::Sr { input, out, backend } => {
            let b = sr_backend(&backend)?;
            let bytes = std::fs::read(&input).with_context(|| input.display().to_string())?;
            let up = super_resolve_2x(&Raster::decode(&bytes)?, b.as_ref())?;
            if up.width != up.height {
                bail!("only square images can be written ({}x{})", up.width, up.height);
            }
            std::fs::write(&out, up.into_image()?.to_png()).with_context(|| out.display().to_string())?;
            Ok(())
        }
        DataCommand::Prune { dir, list } => {
            let m = load_manifest(&dir)?;
            let text = std::fs::read_to_string(&list).with_context(|| list.display().to_string())?;
            let (out, warnings) = apply_prune_list(&m, &text);
            out.save(&manifest_path(&dir))?;
            let pruned = out.entries.iter().filter(|e| e.pruned).count();
            println!("{}", json!({ "pruned": pruned, "kept": out.kept().count(), "warnings": warnings }));
            Ok(())
        }
        DataCommand::Select {
            dir,
            keep,
            embedding,
            out,
            apply,
        } => {
            let m = load_manifest(&dir)?;
            let mut ids = Vec::new();
            let mut images = Vec::new();
            for e in m.kept() {
                let rel = e
                    .processed_path
                    .as_ref()
                    .with_context(|| format!("entry '{}' is not processed; run `data crop` first", e.id))?;
                let p = dir.join(rel);
                let bytes = std::fs::read(&p).with_context(|| p.display().to_string())?;
                images.push(ImageTensor::from_png(&bytes)?);
                ids.push(e.id.clone());
            }
            let ex = extractor(&embedding)?;
            let report = instance_selection_scores(&ids, &ex.embed(&images)?, keep, &embedding)?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
            if apply {
                let list: String = report.drop.iter().map(|id| format!("{id} instance-selection\n")).collect();
                let (pruned, _) = apply_prune_list(&m, &list);
                pruned.save(&manifest_path(&dir))?;
                tracing::info!(dropped = report.drop.len(), "pruned low-density entries");
            }
            Ok(())
        }
        DataCommand::Pack { dir, out, seed } => {
            let m = load_manifest(&dir)?;
            let packed = pack_dataset(&m, &dir, &out, seed)?;
            println!("{}", json!({ "images": packed.len(), "resolution": packed.resolution, "seed": seed }));
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_argument() {
        assert_eq!(parse_crop("8,18,64,64").unwrap(), CropBox::square(8, 18, 64));
        assert!(parse_crop("8,18,64").is_err());
        assert!(parse_crop("0,0,0,4").is_err());
    }
}
