use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Service configuration: a TOML file, then `GATEDGAN_*` environment
/// overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Every `*.ckpt` here is served under its file stem.
    pub model_dir: PathBuf,
    /// Concurrent forward passes per model.
    pub workers: usize,
    /// PCA bases are cached here across restarts.
    pub basis_cache_dir: Option<PathBuf>,
    pub pca_samples: usize,
    pub pca_seed: u64,
    pub pca_top_k: usize,
    pub max_upload_bytes: usize,
    /// Latent archives kept in memory for download.
    pub max_archives: usize,
    /// Latents averaged when a checkpoint carries no `w_mean`.
    pub w_mean_samples: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            model_dir: PathBuf::from("models"),
            workers: 1,
            basis_cache_dir: None,
            pca_samples: 4096,
            pca_seed: 0,
            pca_top_k: 10,
            max_upload_bytes: 8 << 20,
            max_archives: 4096,
            w_mean_samples: 10_000,
        }
    }
}

pub const ENV_PREFIX: &str = "GATEDGAN_";

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Reads `path` when given, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ServiceError> {
            v.parse()
                .map_err(|_| ServiceError::Config(format!("{key}={v} is not valid")))
        }
        let key = |k: &str| format!("{ENV_PREFIX}{k}");
        if let Some(v) = get(&key("HOST")) {
            self.host = v;
        }
        if let Some(v) = get(&key("PORT")) {
            self.port = parse(&key("PORT"), &v)?;
        }
        if let Some(v) = get(&key("MODEL_DIR")) {
            self.model_dir = v.into();
        }
        if let Some(v) = get(&key("WORKERS")) {
            self.workers = parse(&key("WORKERS"), &v)?;
        }
        if let Some(v) = get(&key("BASIS_CACHE_DIR")) {
            self.basis_cache_dir = Some(v.into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.workers == 0 {
            return Err(ServiceError::Config("workers must be at least 1".into()));
        }
        if self.pca_top_k == 0 {
            return Err(ServiceError::Config("pca_top_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_env_overrides() {
        let mut c = ServiceConfig::from_toml("port = 9000\nmodel_dir = \"/srv/models\"\nworkers = 2\n").unwrap();
        assert_eq!((c.port, c.workers), (9000, 2));
        c.apply_env(|k| match k {
            "GATEDGAN_PORT" => Some("9100".into()),
            "GATEDGAN_BASIS_CACHE_DIR" => Some("/tmp/b".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.port, 9100);
        assert_eq!(c.model_dir, PathBuf::from("/srv/models"));
        assert_eq!(c.basis_cache_dir, Some(PathBuf::from("/tmp/b")));
        assert!(c.apply_env(|k| (k == "GATEDGAN_WORKERS").then(|| "many".into())).is_err());
        assert!(ServiceConfig::from_toml("prot = 1").is_err());
    }
}
