//! Fréchet distance with pluggable feature extractors, and the noise
//! ablation and noise-sensitivity runners.

mod ablation;
mod extract;
mod stats;

pub use ablation::{
    fid, generated_stats, image_stats, noise_sensitivity, run_ablation, AblationResult, AblationRow, AblationSpec,
    AblationTable, NoiseMode,
};
pub use extract::{
    extract_features, extractor, FeatureExtractor, Identity, RandomCnn, RandomProjection, DEFAULT_EXTRACTOR,
    EXTRACTORS,
};
pub use stats::{fit_stats, frechet_distance, FeatureStats, Features, StatsAccumulator};

#[cfg(test)]
mod tests;
