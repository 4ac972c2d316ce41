use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::container::Archive;
use crate::error::{Error, Result};
use crate::model::{GeneratorCheckpoint, LatentW, LatentWPlus, LatentZ};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

pub const PCA_KIND: &str = "pca_basis";

/// Principal directions of the mapped latent distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: LatentW,
    /// `K` unit rows of length `D`, by explained variance, largest first.
    pub components: Vec<Vec<f32>>,
    pub variances: Vec<f64>,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    /// Largest `|⟨c_i, c_j⟩ − δ_ij|` over all row pairs.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate().skip(i) {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// Keeps the leading `k` directions.
    pub fn truncated(mut self, k: usize) -> Self {
        self.components.truncate(k);
        self.variances.truncate(k);
        self
    }

    /// Coordinates of `w − mean` along each direction.
    pub fn project(&self, w: &[f32]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(w.iter().zip(self.mean.values()))
                    .map(|(c, (w, m))| *c as f64 * (*w as f64 - *m as f64))
                    .sum()
            })
            .collect()
    }

    /// `mean + Σ coord_i · c_i`.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f32> {
        let mut out: Vec<f64> = self.mean.values().iter().map(|v| *v as f64).collect();
        for (c, k) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += k * *v as f64;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    pub fn to_archive(&self) -> Archive {
        let meta = serde_json::json!({ "variances": self.variances });
        let mut a = Archive::new(PCA_KIND, meta);
        a.push("mean", Tensor::from_parts(vec![self.dim()], self.mean.values().to_vec()));
        a.push(
            "components",
            Tensor::from_parts(vec![self.k(), self.dim()], self.components.concat()),
        );
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != PCA_KIND {
            return Err(Error::config(format!("archive kind '{}' is not a PCA basis", a.kind)));
        }
        let variances: Vec<f64> = serde_json::from_value(a.meta["variances"].clone())?;
        let mean = LatentW::new(a.require("mean")?.data().to_vec())?;
        let comps = a.require("components")?;
        let d = mean.dim();
        if comps.shape() != [variances.len(), d] {
            return Err(Error::config(format!(
                "PCA components have shape {:?}, expected [{}, {d}]",
                comps.shape(),
                variances.len()
            )));
        }
        let components = comps.data().chunks(d).map(<[f32]>::to_vec).collect();
        Ok(Self { mean, components, variances })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// PCA of a sample set. Rows are sorted by variance (unbiased, descending)
/// and each row's largest-magnitude entry is made positive.
pub fn pca_from_samples(samples: &[LatentW]) -> Result<PcaBasis> {
    let n = samples.len();
    let Some(first) = samples.first() else {
        return Err(Error::invalid("PCA needs samples"));
    };
    let d = first.dim();
    if n < d + 1 {
        return Err(Error::invalid(format!("PCA over {d} dims needs at least {} samples, got {n}", d + 1)));
    }
    let mut mean = vec![0.0f64; d];
    for w in samples {
        if w.dim() != d {
            return Err(Error::invalid("PCA samples differ in dimension"));
        }
        for (m, v) in mean.iter_mut().zip(w.values()) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| samples[i].values()[j] as f64 - mean[j]);
    let cov = (centred.transpose() * &centred) / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mut components = Vec::with_capacity(d);
    let mut variances = Vec::with_capacity(d);
    for &k in &order {
        let col = eig.eigenvectors.column(k);
        let norm = col.norm();
        let mut row: Vec<f64> = col.iter().map(|v| v / norm).collect();
        let pivot = row.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(row.into_iter().map(|v| v as f32).collect());
        variances.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaBasis {
        mean: LatentW::new(mean.into_iter().map(|m| m as f32).collect())?,
        components,
        variances,
    })
}

/// PCA of `n_samples` mapped latents; latent `i` is drawn from
/// `derive_seed(seed, i)`.
pub fn compute_pca_basis(ckpt: &GeneratorCheckpoint, n_samples: usize, seed: u64) -> Result<PcaBasis> {
    let g = &ckpt.generator;
    let d = g.arch().latent_dim;
    if n_samples < d + 1 {
        return Err(Error::invalid(format!(
            "PCA over {d} dims needs n_samples >= {}, got {n_samples}",
            d + 1
        )));
    }
    let mut ws = Vec::with_capacity(n_samples);
    for start in (0..n_samples).step_by(512) {
        let zs: Vec<LatentZ> = (start..(start + 512).min(n_samples))
            .map(|i| LatentZ::from_seed(derive_seed(seed, i as u64), d))
            .collect();
        ws.extend(g.map_latents(&zs)?);
    }
    pca_from_samples(&ws)
}

/// One slider: move along a principal direction on a range of layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaEdit {
    pub direction_index: usize,
    pub weight: f32,
    /// Half-open layer range `[lo, hi)`; all layers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_range: Option<(usize, usize)>,
}

impl PcaEdit {
    pub fn new(direction_index: usize, weight: f32) -> Self {
        Self {
            direction_index,
            weight,
            layer_range: None,
        }
    }
}

/// `w[i] += weight · component[direction]` for every edit and every layer
/// in its range.
pub fn apply_pca_edits(w_plus: &LatentWPlus, basis: &PcaBasis, edits: &[PcaEdit]) -> Result<LatentWPlus> {
    if basis.dim() != w_plus.dim() {
        return Err(Error::invalid(format!(
            "basis dimension {} differs from latent dimension {}",
            basis.dim(),
            w_plus.dim()
        )));
    }
    let l = w_plus.num_layers();
    for e in edits {
        if e.direction_index >= basis.k() {
            return Err(Error::invalid(format!(
                "PCA direction {} out of range [0, {}]",
                e.direction_index,
                basis.k().saturating_sub(1)
            )));
        }
        if !e.weight.is_finite() {
            return Err(Error::invalid("PCA weight must be finite"));
        }
        if let Some((lo, hi)) = e.layer_range {
            if lo > hi || hi > l {
                return Err(Error::invalid(format!("layer range ({lo}, {hi}) invalid for {l} layers")));
            }
        }
    }
    // accumulate in f64 and round once, so opposite edits cancel exactly
    let mut acc: Vec<Vec<f64>> = w_plus
        .layers()
        .iter()
        .map(|l| l.iter().map(|v| *v as f64).collect())
        .collect();
    for e in edits {
        let (lo, hi) = e.layer_range.unwrap_or((0, l));
        let c = &basis.components[e.direction_index];
        for layer in &mut acc[lo..hi] {
            for (v, ci) in layer.iter_mut().zip(c) {
                *v += e.weight as f64 * *ci as f64;
            }
        }
    }
    LatentWPlus::new(acc.into_iter().map(|l| l.into_iter().map(|v| v as f32).collect()).collect())
}
