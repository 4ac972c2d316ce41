//! Noise gates and the seeded spatial noise they govern.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::ArchConfig;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Per-resolution switch for noise injection. A gated-off resolution adds
/// exactly nothing, so its noise buffers cannot influence the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseGateConfig {
    enabled_by_resolution: BTreeMap<usize, bool>,
}

impl NoiseGateConfig {
    fn uniform(arch: &ArchConfig, on: bool) -> Self {
        Self {
            enabled_by_resolution: arch.resolutions().into_iter().map(|r| (r, on)).collect(),
        }
    }

    pub fn all_on(arch: &ArchConfig) -> Self {
        Self::uniform(arch, true)
    }

    pub fn all_off(arch: &ArchConfig) -> Self {
        Self::uniform(arch, false)
    }

    /// Noise off at 4² through 32², on from 64² up.
    pub fn coarse_off(arch: &ArchConfig) -> Self {
        Self {
            enabled_by_resolution: arch.resolutions().into_iter().map(|r| (r, r >= 64)).collect(),
        }
    }

    pub fn from_map(arch: &ArchConfig, map: BTreeMap<usize, bool>) -> Result<Self> {
        let cfg = Self {
            enabled_by_resolution: map,
        };
        cfg.validate(arch)?;
        Ok(cfg)
    }

    /// Parses a gate spec: comma-separated clauses applied left to right on
    /// top of "all on". Clauses: `on`, `off`, `on:<lo>-<hi>`, `off:<lo>-<hi>`,
    /// `off:<res>`; ranges are inclusive resolutions. `coarse-off` is shorthand
    /// for `off:4-32`.
    pub fn parse(spec: &str, arch: &ArchConfig) -> Result<Self> {
        let mut cfg = Self::all_on(arch);
        for clause in spec.split(',').map(str::trim).filter(|c| !c.is_empty()) {
            if clause == "coarse-off" {
                cfg = Self::coarse_off(arch);
                continue;
            }
            let (state, range) = match clause.split_once(':') {
                Some((s, r)) => (s, Some(r)),
                None => (clause, None),
            };
            let on = match state {
                "on" => true,
                "off" => false,
                other => return Err(Error::config(format!("gate clause '{other}' must be on/off"))),
            };
            let (lo, hi) = match range {
                None => (0, usize::MAX),
                Some(r) => {
                    let parse = |s: &str| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::config(format!("bad resolution '{s}' in gate spec")))
                    };
                    match r.split_once('-') {
                        Some((a, b)) => (parse(a)?, parse(b)?),
                        None => {
                            let v = parse(r)?;
                            (v, v)
                        }
                    }
                }
            };
            for (res, e) in cfg.enabled_by_resolution.iter_mut() {
                if (lo..=hi).contains(res) {
                    *e = on;
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        let expected = arch.resolutions();
        let got: Vec<usize> = self.enabled_by_resolution.keys().copied().collect();
        if expected != got {
            return Err(Error::ArchitectureMismatch(format!(
                "gate config covers resolutions {got:?}, architecture has {expected:?}"
            )));
        }
        Ok(())
    }

    pub fn is_enabled(&self, res: usize) -> bool {
        self.enabled_by_resolution.get(&res).copied().unwrap_or(false)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, bool)> + '_ {
        self.enabled_by_resolution.iter().map(|(r, e)| (*r, *e))
    }

    /// Compact rendering, e.g. `off:4-32,on:64-64`.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        let mut run: Option<(bool, usize, usize)> = None;
        for (r, e) in self.entries() {
            run = match run {
                Some((s, lo, _)) if s == e => Some((s, lo, r)),
                Some((s, lo, hi)) => {
                    parts.push(format!("{}:{lo}-{hi}", if s { "on" } else { "off" }));
                    Some((e, r, r))
                }
                None => Some((e, r, r)),
            };
        }
        if let Some((s, lo, hi)) = run {
            parts.push(format!("{}:{lo}-{hi}", if s { "on" } else { "off" }));
        }
        parts.join(",")
    }
}

/// One `h×w` standard-normal buffer per noise-injection site.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBuffers {
    pub seed: Option<u64>,
    pub buffers: Vec<Tensor>,
}

/// Deterministic noise for every site; site `i` uses sub-stream `i` of
/// `seed`, so sites are independent of each other.
pub fn sample_noise(seed: u64, arch: &ArchConfig) -> NoiseBuffers {
    let buffers = arch
        .noise_sites()
        .iter()
        .map(|site| {
            let r = site.resolution;
            let mut rng = SeededRng::derive(seed, site.index as u64);
            Tensor::from_parts(vec![r, r], rng.normals(r * r))
        })
        .collect();
    NoiseBuffers {
        seed: Some(seed),
        buffers,
    }
}

impl NoiseBuffers {
    pub fn zeros(arch: &ArchConfig) -> Self {
        Self {
            seed: None,
            buffers: arch
                .noise_sites()
                .iter()
                .map(|s| Tensor::zeros(&[s.resolution, s.resolution]))
                .collect(),
        }
    }

    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        let sites = arch.noise_sites();
        if sites.len() != self.buffers.len() {
            return Err(Error::invalid(format!(
                "expected {} noise buffers, got {}",
                sites.len(),
                self.buffers.len()
            )));
        }
        for (s, b) in sites.iter().zip(&self.buffers) {
            if b.shape() != [s.resolution, s.resolution] {
                return Err(Error::invalid(format!(
                    "noise site {} expects {r}x{r}, got {:?}",
                    s.index,
                    b.shape(),
                    r = s.resolution
                )));
            }
        }
        Ok(())
    }

    /// Copy whose buffers at gated-off sites are replaced by zeros.
    pub fn with_gated_sites_zeroed(&self, arch: &ArchConfig, gates: &NoiseGateConfig) -> Self {
        let buffers = arch
            .noise_sites()
            .iter()
            .zip(&self.buffers)
            .map(|(s, b)| {
                if gates.is_enabled(s.resolution) {
                    b.clone()
                } else {
                    Tensor::zeros(b.shape())
                }
            })
            .collect();
        Self {
            seed: self.seed,
            buffers,
        }
    }
}
