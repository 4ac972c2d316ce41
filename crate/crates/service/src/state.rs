use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use gatedgan::latent::{compute_pca_basis, PcaBasis};
use gatedgan::model::GeneratorCheckpoint;
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::config::ServiceConfig;
use crate::error::ServiceError;
use crate::jobs::JobTable;

/// Seed of the latents averaged into `w_mean` when a checkpoint has none.
pub const W_MEAN_SEED: u64 = 0x3ea7;

pub struct LoadedModel {
    pub id: String,
    pub ckpt: GeneratorCheckpoint,
    pub basis: Option<PcaBasis>,
    /// Hex SHA-256 of the checkpoint file.
    pub digest: String,
}

#[derive(Clone)]
pub enum SlotState {
    Pending,
    Loading,
    Ready(Arc<LoadedModel>),
    Failed(String),
}

impl SlotState {
    pub fn label(&self) -> &'static str {
        match self {
            SlotState::Pending => "pending",
            SlotState::Loading => "loading",
            SlotState::Ready(_) => "ready",
            SlotState::Failed(_) => "failed",
        }
    }
}

pub struct ModelSlot {
    pub path: PathBuf,
    pub state: RwLock<SlotState>,
    /// Bounds concurrent forward passes on this model.
    pub workers: Arc<Semaphore>,
}

/// Content-addressed latent archives, oldest evicted first.
#[derive(Default)]
pub struct ArchiveStore {
    items: HashMap<String, Arc<Vec<u8>>>,
    order: VecDeque<String>,
}

impl ArchiveStore {
    pub fn insert(&mut self, bytes: Vec<u8>, cap: usize) -> String {
        let id = hex::encode(Sha256::digest(&bytes));
        if !self.items.contains_key(&id) {
            self.items.insert(id.clone(), Arc::new(bytes));
            self.order.push_back(id.clone());
            while self.order.len() > cap.max(1) {
                if let Some(old) = self.order.pop_front() {
                    self.items.remove(&old);
                }
            }
        }
        id
    }

    pub fn get(&self, id: &str) -> Option<Arc<Vec<u8>>> {
        self.items.get(id).cloned()
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub models: BTreeMap<String, ModelSlot>,
    pub archives: Mutex<ArchiveStore>,
    pub jobs: JobTable,
}

impl AppState {
    /// Registers every `*.ckpt` in the model directory without loading it.
    /// A missing directory serves no models.
    pub fn new(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        config.validate()?;
        let mut models = BTreeMap::new();
        if config.model_dir.is_dir() {
            let entries = std::fs::read_dir(&config.model_dir)
                .map_err(|e| ServiceError::Config(format!("{}: {e}", config.model_dir.display())))?;
            for entry in entries {
                let path = entry.map_err(|e| ServiceError::Config(e.to_string()))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("ckpt") {
                    continue;
                }
                let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                    continue;
                };
                models.insert(
                    id.to_string(),
                    ModelSlot {
                        path: path.clone(),
                        state: RwLock::new(SlotState::Pending),
                        workers: Arc::new(Semaphore::new(config.workers)),
                    },
                );
            }
        } else {
            tracing::warn!(dir = %config.model_dir.display(), "model directory does not exist");
        }
        Ok(Arc::new(Self {
            config,
            models,
            archives: Mutex::new(ArchiveStore::default()),
            jobs: JobTable::default(),
        }))
    }

    pub fn slot(&self, id: &str) -> Result<&ModelSlot, ServiceError> {
        self.models
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown model '{id}'")))
    }

    pub fn slot_state(&self, id: &str) -> Result<SlotState, ServiceError> {
        Ok(self.slot(id)?.state.read().expect("slot lock").clone())
    }

    /// The loaded model, or 503 while it loads.
    pub fn model(&self, id: &str) -> Result<Arc<LoadedModel>, ServiceError> {
        match self.slot_state(id)? {
            SlotState::Ready(m) => Ok(m),
            SlotState::Failed(msg) => Err(ServiceError::Internal(format!("model '{id}' failed to load: {msg}"))),
            SlotState::Pending | SlotState::Loading => Err(ServiceError::Loading(id.to_string())),
        }
    }

    /// Loads one model on the calling thread. Concurrent calls for the same
    /// model load it once.
    pub fn load_model(&self, id: &str) -> Result<Arc<LoadedModel>, ServiceError> {
        let slot = self.slot(id)?;
        {
            let mut st = slot.state.write().expect("slot lock");
            match &*st {
                SlotState::Ready(m) => return Ok(m.clone()),
                SlotState::Loading => return Err(ServiceError::Loading(id.to_string())),
                SlotState::Pending | SlotState::Failed(_) => *st = SlotState::Loading,
            }
        }
        let started = std::time::Instant::now();
        let result = load_from_disk(id, &slot.path, &self.config);
        let mut st = slot.state.write().expect("slot lock");
        match result {
            Ok(m) => {
                let m = Arc::new(m);
                tracing::info!(
                    model = id,
                    basis = m.basis.is_some(),
                    secs = started.elapsed().as_secs_f64(),
                    "model loaded"
                );
                *st = SlotState::Ready(m.clone());
                Ok(m)
            }
            Err(e) => {
                tracing::error!(model = id, error = %e, "model failed to load");
                *st = SlotState::Failed(e.to_string());
                Err(e)
            }
        }
    }

    /// Loads every registered model on the calling thread.
    pub fn load_all(&self) -> Result<(), ServiceError> {
        for id in self.models.keys() {
            self.load_model(id)?;
        }
        Ok(())
    }

    pub fn store_archive(&self, bytes: Vec<u8>) -> String {
        self.archives
            .lock()
            .expect("archive lock")
            .insert(bytes, self.config.max_archives)
    }

    pub fn archive(&self, id: &str) -> Result<Arc<Vec<u8>>, ServiceError> {
        self.archives
            .lock()
            .expect("archive lock")
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown latent archive '{id}'")))
    }
}

fn load_from_disk(id: &str, path: &Path, cfg: &ServiceConfig) -> Result<LoadedModel, ServiceError> {
    let bytes = std::fs::read(path).map_err(|e| gatedgan::Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let mut ckpt = GeneratorCheckpoint::from_bytes(&bytes)?;
    if ckpt.w_mean.is_none() {
        ckpt.w_mean = Some(ckpt.generator.estimate_w_mean(cfg.w_mean_samples, W_MEAN_SEED)?);
    }
    let basis = load_basis(id, &digest, &ckpt, cfg);
    Ok(LoadedModel {
        id: id.to_string(),
        ckpt,
        basis,
        digest,
    })
}

/// Cached basis when present, else computed and cached. A model whose basis
/// cannot be computed is still served, without PCA edits.
fn load_basis(id: &str, digest: &str, ckpt: &GeneratorCheckpoint, cfg: &ServiceConfig) -> Option<PcaBasis> {
    let cache = cfg.basis_cache_dir.as_ref().map(|dir| {
        dir.join(format!(
            "{id}-{}-{}-{}.pca",
            &digest[..16],
            cfg.pca_samples,
            cfg.pca_seed
        ))
    });
    if let Some(path) = cache.as_ref().filter(|p| p.is_file()) {
        match PcaBasis::load(path) {
            Ok(b) if b.dim() == ckpt.arch().latent_dim => return Some(b),
            Ok(_) => tracing::warn!(path = %path.display(), "cached basis has the wrong dimension"),
            Err(e) => tracing::warn!(path = %path.display(), error = %e, "ignoring unreadable cached basis"),
        }
    }
    let basis = match compute_pca_basis(ckpt, cfg.pca_samples, cfg.pca_seed) {
        Ok(b) => b,
        Err(e) => {
            tracing::warn!(model = id, error = %e, "no PCA basis");
            return None;
        }
    };
    if let Some(path) = cache {
        let saved = std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| gatedgan::Error::io(&path, e))
            .and_then(|_| basis.save(&path));
        if let Err(e) = saved {
            tracing::warn!(path = %path.display(), error = %e, "could not cache basis");
        }
    }
    Some(basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_store_is_content_addressed_and_bounded() {
        let mut s = ArchiveStore::default();
        let a = s.insert(b"one".to_vec(), 2);
        assert_eq!(s.insert(b"one".to_vec(), 2), a);
        let b = s.insert(b"two".to_vec(), 2);
        s.insert(b"three".to_vec(), 2);
        assert!(s.get(&a).is_none());
        assert_eq!(s.get(&b).unwrap().as_slice(), b"two");
    }
}
