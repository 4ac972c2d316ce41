//! Single-file archive for checkpoints, latent archives, PCA bases and
//! packed datasets.
//!
//! Layout:
//!
//! ```text
//! 0..8      magic  b"GGANARC1"
//! 8..16     manifest length M, u64 little-endian
//! 16..16+M  UTF-8 JSON manifest
//! 16+M..    blob: little-endian f32 values, tensors in manifest order
//! ```
//!
//! The manifest carries `format_version`, a `kind` tag, free-form `meta`
//! and the tensor index (`name`, `dtype`, `shape`, byte `offset` into the
//! blob). Encoding is deterministic: identical contents give identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GGANARC1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("archive has no tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mend = HEADER_LEN
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(8, format!("manifest length {mlen} exceeds file size {}", bytes.len())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..mend]).map_err(|e| {
            let col = e.column().saturating_sub(1);
            fail(HEADER_LEN + col, format!("manifest is not valid JSON: {e}"))
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(fail(
                HEADER_LEN,
                format!("unsupported format_version {}", manifest.format_version),
            ));
        }
        let blob = &bytes[mend..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(fail(HEADER_LEN, format!("tensor '{}' has dtype {}", entry.name, entry.dtype)));
            }
            if entry.offset != expected {
                return Err(fail(
                    mend + entry.offset as usize,
                    format!("tensor '{}' offset {} out of order (expected {expected})", entry.name, entry.offset),
                ));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            if end > blob.len() {
                return Err(fail(
                    mend + blob.len(),
                    format!("blob truncated: tensor '{}' needs bytes {start}..{end} of {}", entry.name, blob.len()),
                ));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name.clone(), Tensor::from_parts(entry.shape.clone(), data)));
            expected = end as u64;
        }
        if expected as usize != blob.len() {
            return Err(fail(
                mend + expected as usize,
                format!("{} trailing bytes after last tensor", blob.len() - expected as usize),
            ));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Archive {
        let mut a = Archive::new("test", serde_json::json!({"b": 1, "a": [1, 2]}));
        a.push("x", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        a.push("y", Tensor::new(vec![3], vec![f32::MIN_POSITIVE, 7.0, -0.0]).unwrap());
        a
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert!(offset > 16, "{offset}");
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_garbage_manifest() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = sample().to_bytes();
        bytes[20] = b'}';
        assert!(matches!(Archive::from_bytes(&bytes), Err(Error::Format { .. })));
        assert!(Archive::from_bytes(b"GGA").is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(sample().to_bytes(), sample().to_bytes());
    }

    proptest! {
        #[test]
        fn round_trip_preserves_bits(
            vals in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..64),
            kind in "[a-z]{1,8}",
        ) {
            let mut a = Archive::new(kind, serde_json::json!({"n": vals.len()}));
            a.push("v", Tensor::new(vec![vals.len()], vals.clone()).unwrap());
            let back = Archive::from_bytes(&a.to_bytes()).unwrap();
            let bits: Vec<u32> = back.require("v").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
            prop_assert_eq!(back.kind, a.kind);
        }
    }
}
