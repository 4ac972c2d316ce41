use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `n × dim` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Features {
    pub fn new(n: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::invalid(format!("{n}x{dim} features need {} values", n * dim)));
        }
        Ok(Self { n, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
    pub n: usize,
    /// Extractor that produced the features, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<String>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }

    /// Checks shape, symmetry and sample count.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.len() != d * d {
            return Err(Error::invalid("covariance size does not match mean"));
        }
        if self.n < 2 {
            return Err(Error::invalid("feature statistics need n >= 2"));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (self.cov[i * d + j], self.cov[j * d + i]);
                if (a - b).abs() > 1e-6 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::numeric(format!("covariance not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }
}

/// Sample mean and unbiased covariance, computed in two passes.
pub fn fit_stats(f: &Features) -> Result<FeatureStats> {
    if f.n < 2 {
        return Err(Error::invalid(format!("fit_stats needs at least 2 samples, got {}", f.n)));
    }
    let d = f.dim;
    let mut mean = vec![0.0f64; d];
    for i in 0..f.n {
        for (m, v) in mean.iter_mut().zip(f.row(i)) {
            *m += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= f.n as f64;
    }
    let mut centered = DMatrix::<f64>::zeros(f.n, d);
    for i in 0..f.n {
        for (j, v) in f.row(i).iter().enumerate() {
            centered[(i, j)] = *v as f64 - mean[j];
        }
    }
    let cov = centered.transpose() * &centered / (f.n - 1) as f64;
    let mut flat = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            // exact symmetry regardless of summation order
            flat[i * d + j] = 0.5 * (cov[(i, j)] + cov[(j, i)]);
        }
    }
    Ok(FeatureStats {
        mean,
        cov: flat,
        n: f.n,
        extractor: None,
    })
}

/// Mergeable running mean / co-moment, so shards can be combined.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
        }
    }

    pub fn push(&mut self, row: &[f32]) {
        let d = self.mean.len();
        assert_eq!(row.len(), d, "feature dimension");
        self.n += 1;
        let n = self.n as f64;
        let delta: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| *x as f64 - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        let after: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| *x as f64 - m).collect();
        for i in 0..d {
            for j in 0..d {
                self.m2[i * d + j] += delta[i] * after[j];
            }
        }
    }

    pub fn push_all(&mut self, f: &Features) {
        for i in 0..f.n {
            self.push(f.row(i));
        }
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        let d = self.mean.len();
        assert_eq!(other.mean.len(), d, "feature dimension");
        if other.n == 0 {
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            for j in 0..d {
                self.m2[i * d + j] += other.m2[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.n += other.n;
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        if self.n < 2 {
            return Err(Error::invalid(format!("need at least 2 samples, got {}", self.n)));
        }
        let d = self.mean.len();
        let k = 1.0 / (self.n - 1) as f64;
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = 0.5 * (self.m2[i * d + j] + self.m2[j * d + i]) * k;
            }
        }
        Ok(FeatureStats {
            mean: self.mean.clone(),
            cov,
            n: self.n,
            extractor: None,
        })
    }
}

/// Absolute tolerance for negative eigenvalues, relative to the spectrum.
const NEG_EIG_TOL: f64 = 1e-6;

fn clamped_eigen(m: DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut vals = Vec::with_capacity(eig.eigenvalues.len());
    for &v in eig.eigenvalues.iter() {
        if v < -NEG_EIG_TOL * scale {
            let mut all: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            all.sort_by(f64::total_cmp);
            return Err(Error::numeric(format!(
                "{what} is not positive semi-definite: smallest eigenvalues {:?}",
                &all[..all.len().min(5)]
            )));
        }
        vals.push(v.max(0.0));
    }
    Ok((eig.eigenvectors, vals))
}

/// Fréchet distance between two Gaussians:
/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`.
///
/// The square root comes from two symmetric eigendecompositions, with
/// eigenvalues above `−1e-6·max|λ|` clamped to zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("feature dims differ: {} vs {}", a.dim(), b.dim())));
    }
    a.validate()?;
    b.validate()?;
    if a.mean == b.mean && a.cov == b.cov {
        // identical fits: report the exact distance rather than rounding noise
        return Ok(0.0);
    }
    let mu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let (va, la) = clamped_eigen(sa.clone(), "first covariance")?;
    let root_a = &va * DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(la.len(), la.iter().map(|v| v.sqrt())))
        * va.transpose();
    let mut m = &root_a * &sb * &root_a;
    m = (&m + m.transpose()) * 0.5;
    let (_, lm) = clamped_eigen(m, "covariance product")?;
    let tr_sqrt: f64 = lm.iter().map(|v| v.sqrt()).sum();
    let d = mu + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}
