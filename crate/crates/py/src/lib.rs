//! Python bindings: checkpoints, generation, edit sessions, PCA bases,
//! projection, latent archives, evaluation and training.

use std::path::PathBuf;

use gatedgan::data::load_images;
use gatedgan::eval::{extractor, fid as fid_core, image_stats, noise_sensitivity as ns_core, DEFAULT_EXTRACTOR};
use gatedgan::latent::{
    compute_pca_basis, project as project_core, render_session as render_core, EditSession, LatentArchive,
    PcaBasis, ProjectOptions,
};
use gatedgan::model::{generate as generate_core, ArchConfig, Generator, GeneratorCheckpoint, ImageTensor, NoiseGateConfig};
use gatedgan::training::{train as train_core, TrainConfig};
use gatedgan::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::ArchitectureMismatch(_) | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } | Error::Network { .. } | Error::MissingImages(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for gatedgan::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Generator checkpoint: weights, noise gates and latent mean.
#[pyclass(name = "Checkpoint", module = "gatedgan", frozen)]
pub struct PyCheckpoint {
    inner: GeneratorCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: GeneratorCheckpoint::load(&path).py_err()?,
        })
    }

    /// Untrained generator with toy-scale widths.
    #[staticmethod]
    #[pyo3(signature = (resolution, gates = "coarse-off", seed = 0, latent_dim = None, w_mean_samples = 1000))]
    fn random(
        resolution: usize,
        gates: &str,
        seed: u64,
        latent_dim: Option<usize>,
        w_mean_samples: usize,
    ) -> PyResult<Self> {
        let mut arch = ArchConfig::toy(resolution);
        if let Some(d) = latent_dim {
            arch.latent_dim = d;
        }
        arch.validate().py_err()?;
        let gates = NoiseGateConfig::parse(gates, &arch).py_err()?;
        let g = Generator::new(&arch, seed).py_err()?;
        let mut inner = GeneratorCheckpoint::new(g, gates).py_err()?;
        inner.w_mean = Some(inner.generator.estimate_w_mean(w_mean_samples, seed).py_err()?);
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: GeneratorCheckpoint::from_bytes(data).py_err()?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py_err()
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.arch().resolution
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.arch().latent_dim
    }

    #[getter]
    fn num_ws(&self) -> usize {
        self.inner.generator.num_ws()
    }

    /// Gate configuration, e.g. `off:4-32,on:64`.
    #[getter]
    fn gates(&self) -> String {
        self.inner.gates.describe()
    }

    /// Copy with a different gate configuration.
    fn with_gates(&self, gates: &str) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.gates = NoiseGateConfig::parse(gates, inner.arch()).py_err()?;
        Ok(Self { inner })
    }

    /// PNG of the image for these seeds.
    #[pyo3(signature = (latent_seed, noise_seed, psi = 1.0))]
    fn generate<'py>(&self, py: Python<'py>, latent_seed: u64, noise_seed: u64, psi: f32) -> PyResult<Bound<'py, PyBytes>> {
        let png = py
            .detach(|| generate_core(latent_seed, noise_seed, psi, &self.inner).map(|(img, _, _)| img.to_png()))
            .py_err()?;
        Ok(PyBytes::new(py, &png))
    }

    /// HWC pixels in [-1, 1] for these seeds.
    #[pyo3(signature = (latent_seed, noise_seed, psi = 1.0))]
    fn generate_pixels(&self, py: Python<'_>, latent_seed: u64, noise_seed: u64, psi: f32) -> PyResult<Vec<f32>> {
        py.detach(|| generate_core(latent_seed, noise_seed, psi, &self.inner).map(|(img, _, _)| img.pixels().to_vec()))
            .py_err()
    }

    /// PNG of an edit session given as JSON.
    #[pyo3(signature = (session_json, basis = None))]
    fn render_session<'py>(
        &self,
        py: Python<'py>,
        session_json: &str,
        basis: Option<&PyPcaBasis>,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let session: EditSession =
            serde_json::from_str(session_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let png = py
            .detach(|| render_core(&session, &self.inner, basis.map(|b| &b.inner)).map(|(img, _, _)| img.to_png()))
            .py_err()?;
        Ok(PyBytes::new(py, &png))
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(resolution={}, latent_dim={}, num_ws={}, gates='{}')",
            self.resolution(),
            self.latent_dim(),
            self.num_ws(),
            self.gates()
        )
    }
}

/// Principal directions of the mapped latent distribution.
#[pyclass(name = "PcaBasis", module = "gatedgan", frozen)]
pub struct PyPcaBasis {
    inner: PcaBasis,
}

#[pymethods]
impl PyPcaBasis {
    #[staticmethod]
    #[pyo3(signature = (ckpt, n_samples = 10_000, seed = 0))]
    fn compute(py: Python<'_>, ckpt: &PyCheckpoint, n_samples: usize, seed: u64) -> PyResult<Self> {
        let inner = py.detach(|| compute_pca_basis(&ckpt.inner, n_samples, seed)).py_err()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PcaBasis::load(&path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py_err()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn variances(&self) -> Vec<f64> {
        self.inner.variances.clone()
    }

    #[getter]
    fn components(&self) -> Vec<Vec<f32>> {
        self.inner.components.clone()
    }

    fn orthonormality_error(&self) -> f64 {
        self.inner.orthonormality_error()
    }
}

/// Projected (or uploaded) W+ latent with its fine noise.
#[pyclass(name = "LatentArchive", module = "gatedgan", frozen)]
pub struct PyLatentArchive {
    inner: LatentArchive,
}

#[pymethods]
impl PyLatentArchive {
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: LatentArchive::from_bytes(data).py_err()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: LatentArchive::load(&path).py_err()?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py_err()
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.model_id.clone()
    }

    #[getter]
    fn w_plus(&self) -> Vec<Vec<f32>> {
        self.inner.w_plus.layers().to_vec()
    }

    /// PNG rendered with `ckpt`; fails on an architecture mismatch.
    fn render<'py>(&self, py: Python<'py>, ckpt: &PyCheckpoint) -> PyResult<Bound<'py, PyBytes>> {
        let c = &ckpt.inner;
        let png = py
            .detach(|| -> gatedgan::Result<Vec<u8>> {
                self.inner.check_compatible(c)?;
                let noise = self.inner.noise_buffers(c.arch())?;
                Ok(c.generator.synthesize(&self.inner.w_plus, &noise, &c.gates)?.to_png())
            })
            .py_err()?;
        Ok(PyBytes::new(py, &png))
    }
}

/// Projects a PNG at model resolution; returns `(archive, mse)`.
#[pyfunction]
#[pyo3(signature = (ckpt, png, model_id = "model", steps = None, optimize_noise = true))]
fn project(
    py: Python<'_>,
    ckpt: &PyCheckpoint,
    png: &[u8],
    model_id: &str,
    steps: Option<usize>,
    optimize_noise: bool,
) -> PyResult<(PyLatentArchive, f32)> {
    let c = &ckpt.inner;
    let (archive, mse) = py
        .detach(|| -> gatedgan::Result<_> {
            let target = ImageTensor::from_png(png)?;
            let mut opts = ProjectOptions::default();
            if let Some(s) = steps {
                opts.steps = s;
            }
            opts.optimize_noise = optimize_noise;
            let r = project_core(&target, c, &opts)?;
            let provenance = serde_json::json!({ "projection": opts, "best_step": r.best_step });
            let a = LatentArchive::new(model_id, c, r.w_plus.clone(), &r.noise, provenance)?;
            Ok((a, r.final_image.mse(&target)))
        })
        .py_err()?;
    Ok((PyLatentArchive { inner: archive }, mse))
}

/// FID of `n` samples against the images under `reference`.
#[pyfunction]
#[pyo3(signature = (ckpt, reference, n = 2000, seed = 0, extractor_id = DEFAULT_EXTRACTOR))]
fn fid(
    py: Python<'_>,
    ckpt: &PyCheckpoint,
    reference: PathBuf,
    n: usize,
    seed: u64,
    extractor_id: &str,
) -> PyResult<f64> {
    let c = &ckpt.inner;
    py.detach(|| {
        let ex = extractor(extractor_id)?;
        let refs = image_stats(&load_images(&reference, c.arch().resolution)?, ex.as_ref())?;
        fid_core(c, &refs, n, seed, ex.as_ref())
    })
    .py_err()
}

/// FID between constant-noise and per-latent-noise renders.
#[pyfunction]
#[pyo3(signature = (ckpt, n = 2000, seed_a = 1, seed_b = 2, extractor_id = DEFAULT_EXTRACTOR))]
fn noise_sensitivity(
    py: Python<'_>,
    ckpt: &PyCheckpoint,
    n: usize,
    seed_a: u64,
    seed_b: u64,
    extractor_id: &str,
) -> PyResult<f64> {
    let c = &ckpt.inner;
    py.detach(|| {
        let ex = extractor(extractor_id)?;
        ns_core(c, n, seed_a, seed_b, ex.as_ref())
    })
    .py_err()
}

/// Trains on the images under `data` for `steps` batches; returns the
/// final checkpoint.
#[pyfunction]
#[pyo3(signature = (data, resolution, steps, gates = "coarse-off", batch = 8, seed = 0, w_mean_samples = 1000))]
fn train(
    py: Python<'_>,
    data: PathBuf,
    resolution: usize,
    steps: u64,
    gates: &str,
    batch: usize,
    seed: u64,
    w_mean_samples: usize,
) -> PyResult<PyCheckpoint> {
    let inner = py
        .detach(|| -> gatedgan::Result<_> {
            let arch = ArchConfig::toy(resolution);
            let gates = NoiseGateConfig::parse(gates, &arch)?;
            let mut cfg = TrainConfig::new(arch, gates);
            cfg.seed = seed;
            cfg.batch_size = batch;
            cfg.total_images = steps * batch as u64;
            cfg.w_mean_samples = w_mean_samples;
            cfg.validate()?;
            let images = ImageTensor::batch(&load_images(&data, resolution)?)?;
            train_core(&cfg, &images, None, |_| {})?.state.checkpoint(&cfg)
        })
        .py_err()?;
    Ok(PyCheckpoint { inner })
}

#[pymodule]
#[pyo3(name = "gatedgan")]
fn gatedgan_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyPcaBasis>()?;
    m.add_class::<PyLatentArchive>()?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(noise_sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("DEFAULT_EXTRACTOR", DEFAULT_EXTRACTOR)?;
    Ok(())
}
