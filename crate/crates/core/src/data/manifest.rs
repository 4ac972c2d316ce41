use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::resample::CropBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source_uri: String,
    /// SHA-256 of the downloaded bytes.
    #[serde(default)]
    pub content_hash: Option<String>,
    /// Raw file, relative to the dataset directory.
    #[serde(default)]
    pub raw_path: Option<String>,
    #[serde(default)]
    pub crop_box: Option<CropBox>,
    #[serde(default)]
    pub class_tags: Vec<String>,
    #[serde(default)]
    pub pruned: bool,
    #[serde(default)]
    pub prune_reason: Option<String>,
    #[serde(default)]
    pub fetch_error: Option<String>,
    /// Processed image, relative to the dataset directory.
    #[serde(default)]
    pub processed_path: Option<String>,
}

impl ManifestEntry {
    pub fn new(id: impl Into<String>, source_uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source_uri: source_uri.into(),
            content_hash: None,
            raw_path: None,
            crop_box: None,
            class_tags: Vec::new(),
            pruned: false,
            prune_reason: None,
            fetch_error: None,
            processed_path: None,
        }
    }

    /// Fetched successfully and not pruned.
    pub fn is_kept(&self) -> bool {
        !self.pruned && self.fetch_error.is_none() && self.raw_path.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub entries: Vec<ManifestEntry>,
    /// Kept entries per class tag.
    #[serde(default)]
    pub tag_counts: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(resolution: usize, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut m = Self {
            resolution,
            entries,
            tag_counts: BTreeMap::new(),
        };
        m.validate()?;
        m.refresh_counts();
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 4 {
            return Err(Error::config(format!("resolution {} is not a power of two >= 4", self.resolution)));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::config(format!("duplicate manifest id '{}'", e.id)));
            }
        }
        Ok(())
    }

    pub fn refresh_counts(&mut self) {
        let mut counts = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.is_kept()) {
            for t in &e.class_tags {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
        self.tag_counts = counts;
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn kept(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.is_kept())
    }

    /// Canonical JSON: sorted keys, two-space indent, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        // serde_json maps are ordered by key
        let v = serde_json::to_value(self).expect("manifest serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Parses a prune list: one `id [reason…]` per line, `#` comments.
pub fn parse_prune_list(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| match l.split_once(char::is_whitespace) {
            Some((id, reason)) => (id.to_string(), reason.trim().to_string()),
            None => (l.to_string(), String::new()),
        })
        .collect()
}

/// Marks listed ids as pruned. Unknown ids are returned as warnings.
pub fn apply_prune_list(manifest: &DatasetManifest, prune_text: &str) -> (DatasetManifest, Vec<String>) {
    let mut out = manifest.clone();
    let mut warnings = Vec::new();
    for (id, reason) in parse_prune_list(prune_text) {
        match out.entries.iter_mut().find(|e| e.id == id) {
            Some(e) => {
                e.pruned = true;
                e.prune_reason = Some(if reason.is_empty() { "manual".into() } else { reason });
            }
            None => {
                tracing::warn!(id = %id, "prune list names an unknown id");
                warnings.push(format!("unknown id '{id}' in prune list"));
            }
        }
    }
    out.refresh_counts();
    (out, warnings)
}
