//! Dataset preparation: catalog fetch, art crop and resampling, optional
//! super-resolution, prune lists, instance-selection scoring and packing.

mod fetch;
mod fixture;
mod manifest;
mod pack;
mod resample;
mod select;

use std::path::Path;

pub use fetch::{fetch_catalog, CatalogSource, FetchOptions, FetchReport, CATALOG_FILE, MANIFEST_FILE};
pub use fixture::{toy_art, toy_dataset, write_card_fixture, CARD_ART, CARD_HEIGHT, CARD_WIDTH};
pub use manifest::{apply_prune_list, parse_prune_list, DatasetManifest, ManifestEntry};
pub use pack::{pack_dataset, process_entries, shuffled_order, PackedDataset, ProcessOptions, DATASET_KIND};
pub use resample::{
    crop_and_resample, resample, sr_backend, super_resolve_2x, BicubicSr, CropBox, Raster, SuperResolver, SR_BACKENDS,
};
pub use select::{instance_selection_scores, SelectionReport, SelectionScore, SELECTION_RIDGE};

use crate::error::{Error, Result};
use crate::model::ImageTensor;

/// Training images from a packed dataset file or a directory of images
/// (sorted by file name). Images must already be `resolution²`.
pub fn load_images(path: &Path, resolution: usize) -> Result<Vec<ImageTensor>> {
    let images = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        files
            .iter()
            .map(|p| {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                Raster::decode(&bytes)?.into_image()
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        PackedDataset::open(path)?.images
    };
    if images.is_empty() {
        return Err(Error::invalid(format!("no images found in {}", path.display())));
    }
    if let Some(bad) = images.iter().find(|i| i.size() != resolution) {
        return Err(Error::invalid(format!(
            "dataset image is {0}x{0}, expected {resolution}x{resolution}",
            bad.size()
        )));
    }
    Ok(images)
}
