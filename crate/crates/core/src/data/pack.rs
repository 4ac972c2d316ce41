use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::resample::{crop_and_resample, resample, sr_backend, super_resolve_2x, CropBox, Raster};
use crate::container::Archive;
use crate::error::{Error, Result};
use crate::model::ImageTensor;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DATASET_KIND: &str = "dataset";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcessOptions {
    /// Used for entries without their own crop box; the largest centred
    /// square when absent.
    pub default_crop: Option<CropBox>,
    /// Upscale the crop 2× with this backend before resampling.
    pub sr_backend: Option<String>,
}

fn centred_square(r: &Raster) -> CropBox {
    let s = r.width.min(r.height);
    CropBox::square((r.width - s) / 2, (r.height - s) / 2, s)
}

/// Crops, optionally super-resolves, and resamples every kept entry to the
/// manifest resolution, writing `processed/<id>.png` under `dir`.
pub fn process_entries(manifest: &DatasetManifest, dir: &Path, opts: &ProcessOptions) -> Result<DatasetManifest> {
    let sr = opts.sr_backend.as_deref().map(sr_backend).transpose()?;
    let out_dir = dir.join("processed");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut out = manifest.clone();
    for e in out.entries.iter_mut().filter(|e| e.is_kept()) {
        let raw_path = dir.join(e.raw_path.as_deref().expect("kept entries have a raw file"));
        let bytes = std::fs::read(&raw_path).map_err(|err| Error::io(&raw_path, err))?;
        let raster = Raster::decode(&bytes)?;
        let crop = e.crop_box.or(opts.default_crop).unwrap_or_else(|| centred_square(&raster));
        let img = match &sr {
            Some(backend) => {
                let c = raster.crop(&crop)?;
                let up = super_resolve_2x(&c, backend.as_ref())?;
                resample(&up, manifest.resolution, manifest.resolution)?.into_image()?
            }
            None => crop_and_resample(&raster, &crop, manifest.resolution)?,
        };
        let rel = format!("processed/{}.png", e.id);
        let dest = dir.join(&rel);
        std::fs::write(&dest, img.to_png()).map_err(|err| Error::io(&dest, err))?;
        e.processed_path = Some(rel);
    }
    Ok(out)
}

/// Images in a fixed, seeded order.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedDataset {
    pub resolution: usize,
    pub seed: u64,
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor>,
    pub manifest: DatasetManifest,
}

impl PackedDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<(&str, &ImageTensor)> {
        Some((self.ids.get(i)?.as_str(), self.images.get(i)?))
    }

    pub fn to_archive(&self) -> Archive {
        let meta = serde_json::json!({
            "resolution": self.resolution,
            "seed": self.seed,
            "order": self.ids,
            "manifest": self.manifest,
        });
        let mut a = Archive::new(DATASET_KIND, meta);
        for (id, img) in self.ids.iter().zip(&self.images) {
            let r = img.size();
            a.push(format!("image/{id}"), Tensor::from_parts(vec![r, r, 3], img.pixels().to_vec()));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != DATASET_KIND {
            return Err(Error::config(format!("archive kind '{}' is not a packed dataset", a.kind)));
        }
        let resolution: usize = serde_json::from_value(a.meta["resolution"].clone())?;
        let seed: u64 = serde_json::from_value(a.meta["seed"].clone())?;
        let ids: Vec<String> = serde_json::from_value(a.meta["order"].clone())?;
        let manifest: DatasetManifest = serde_json::from_value(a.meta["manifest"].clone())?;
        let images = ids
            .iter()
            .map(|id| {
                let t = a.require(&format!("image/{id}"))?;
                if t.shape() != [resolution, resolution, 3] {
                    return Err(Error::config(format!("image '{id}' has shape {:?}", t.shape())));
                }
                ImageTensor::new(resolution, t.data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            resolution,
            seed,
            ids,
            images,
            manifest,
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Seeded Fisher–Yates over the sorted ids.
pub fn shuffled_order(ids: &[String], seed: u64) -> Vec<String> {
    let mut out = ids.to_vec();
    out.sort();
    let mut rng = SeededRng::new(seed);
    for i in (1..out.len()).rev() {
        let j = rng.below(i + 1);
        out.swap(i, j);
    }
    out
}

/// Packs every kept, processed entry into one archive at `out_file`.
pub fn pack_dataset(manifest: &DatasetManifest, dir: &Path, out_file: &Path, seed: u64) -> Result<PackedDataset> {
    let kept: Vec<_> = manifest.kept().collect();
    let missing: Vec<String> = kept
        .iter()
        .filter(|e| e.processed_path.as_ref().is_none_or(|p| !dir.join(p).exists()))
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingImages(missing));
    }
    let ids: Vec<String> = kept.iter().map(|e| e.id.clone()).collect();
    let order = shuffled_order(&ids, seed);
    let images = order
        .iter()
        .map(|id| {
            let rel = manifest.get(id).and_then(|e| e.processed_path.clone()).expect("checked above");
            let path = dir.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let img = ImageTensor::from_png(&bytes)?;
            if img.size() != manifest.resolution {
                return Err(Error::invalid(format!(
                    "processed image '{id}' is {}x{}, manifest says {}",
                    img.size(),
                    img.size(),
                    manifest.resolution
                )));
            }
            Ok(img)
        })
        .collect::<Result<_>>()?;
    let packed = PackedDataset {
        resolution: manifest.resolution,
        seed,
        ids: order,
        images,
        manifest: manifest.clone(),
    };
    packed.to_archive().save(out_file)?;
    Ok(packed)
}
