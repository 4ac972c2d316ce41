use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::manifest::{DatasetManifest, ManifestEntry};
use super::resample::CropBox;
use crate::error::{Error, Result};

pub const CATALOG_FILE: &str = "catalog.json";
pub const MANIFEST_FILE: &str = "manifest.json";
const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Where card images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CatalogSource {
    /// `{api_base}/catalog.json` lists the entries; relative image URIs
    /// resolve against `api_base`.
    Http { api_base: String },
    /// A local directory, with an optional `catalog.json`; without one every
    /// image file becomes an entry named after its stem.
    Mirror { dir: PathBuf },
}

impl CatalogSource {
    /// `http://` and `https://` URIs are remote, anything else is a path.
    pub fn parse(s: &str) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            CatalogSource::Http {
                api_base: s.trim_end_matches('/').to_string(),
            }
        } else {
            CatalogSource::Mirror {
                dir: PathBuf::from(s.strip_prefix("file://").unwrap_or(s)),
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct CatalogItem {
    id: String,
    image: String,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    crop_box: Option<CropBox>,
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub resolution: usize,
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            resolution: 256,
            retries: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FetchReport {
    pub downloaded: usize,
    pub skipped: usize,
    pub failed: Vec<String>,
}

enum Attempt {
    Permanent(String),
    Transient(String),
}

fn http_get(uri: &str) -> std::result::Result<Vec<u8>, Attempt> {
    match ureq::get(uri).call() {
        Ok(mut resp) => resp
            .body_mut()
            .with_config()
            .limit(64 << 20)
            .read_to_vec()
            .map_err(|e| Attempt::Transient(e.to_string())),
        Err(ureq::Error::StatusCode(code)) if (400..500).contains(&code) && code != 429 => {
            Err(Attempt::Permanent(format!("HTTP {code}")))
        }
        Err(e) => Err(Attempt::Transient(e.to_string())),
    }
}

fn get_with_retry(uri: &str, opts: &FetchOptions) -> Result<Vec<u8>> {
    let mut delay = opts.backoff;
    let mut last = String::new();
    for attempt in 0..=opts.retries {
        match http_get(uri) {
            Ok(b) => return Ok(b),
            Err(Attempt::Permanent(m)) => {
                return Err(Error::Network {
                    uri: uri.into(),
                    message: m,
                })
            }
            Err(Attempt::Transient(m)) => {
                tracing::debug!(uri, attempt, error = %m, "retrying");
                last = m;
                if attempt < opts.retries {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    Err(Error::Network {
        uri: uri.into(),
        message: format!("gave up after {} attempts: {last}", opts.retries + 1),
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn safe_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn extension(uri: &str) -> String {
    let name = uri.rsplit('/').next().unwrap_or(uri);
    let ext = name.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase()).unwrap_or_default();
    if IMAGE_EXTS.contains(&ext.as_str()) {
        ext
    } else {
        "png".into()
    }
}

fn read_catalog(source: &CatalogSource, opts: &FetchOptions) -> Result<Vec<CatalogItem>> {
    match source {
        CatalogSource::Http { api_base } => {
            let bytes = get_with_retry(&format!("{api_base}/{CATALOG_FILE}"), opts)?;
            Ok(serde_json::from_slice(&bytes)?)
        }
        CatalogSource::Mirror { dir } => {
            let cat = dir.join(CATALOG_FILE);
            if cat.exists() {
                let text = std::fs::read_to_string(&cat).map_err(|e| Error::io(&cat, e))?;
                return Ok(serde_json::from_str(&text)?);
            }
            let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut items = Vec::new();
            for entry in rd {
                let path = entry.map_err(|e| Error::io(dir, e))?.path();
                let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
                if !ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
                    continue;
                }
                let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
                let name = path.file_name().and_then(|s| s.to_str()).unwrap_or(stem);
                items.push(CatalogItem {
                    id: stem.to_string(),
                    image: name.to_string(),
                    tags: Vec::new(),
                    crop_box: None,
                });
            }
            items.sort_by(|a, b| a.id.cmp(&b.id));
            Ok(items)
        }
    }
}

fn resolve_uri(source: &CatalogSource, image: &str) -> String {
    if image.contains("://") {
        return image.to_string();
    }
    match source {
        CatalogSource::Http { api_base } => format!("{api_base}/{}", image.trim_start_matches('/')),
        CatalogSource::Mirror { dir } => {
            let p = dir.join(image);
            format!("file://{}", std::path::absolute(&p).unwrap_or(p).display())
        }
    }
}

fn read_source(uri: &str, opts: &FetchOptions) -> Result<Vec<u8>> {
    match uri.strip_prefix("file://") {
        Some(path) => std::fs::read(path).map_err(|e| Error::io(path, e)),
        None => get_with_retry(uri, opts),
    }
}

/// Downloads every catalog entry into `out_dir/raw/` and writes
/// `out_dir/manifest.json`. Entries whose raw file is present with the
/// recorded hash are not fetched again; prune marks and crop boxes of an
/// existing manifest are kept. Per-entry failures are recorded, not fatal.
pub fn fetch_catalog(
    source: &CatalogSource,
    out_dir: &Path,
    opts: &FetchOptions,
) -> Result<(DatasetManifest, FetchReport)> {
    let raw_dir = out_dir.join("raw");
    std::fs::create_dir_all(&raw_dir).map_err(|e| Error::io(&raw_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let previous = if manifest_path.exists() {
        Some(DatasetManifest::load(&manifest_path)?)
    } else {
        None
    };
    let items = read_catalog(source, opts)?;
    let mut report = FetchReport::default();
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let uri = resolve_uri(source, &item.image);
        let mut e = previous
            .as_ref()
            .and_then(|m| m.get(&item.id))
            .cloned()
            .unwrap_or_else(|| ManifestEntry::new(&item.id, &uri));
        e.source_uri = uri.clone();
        e.class_tags = item.tags.clone();
        if item.crop_box.is_some() {
            e.crop_box = item.crop_box;
        }
        if !safe_id(&item.id) {
            e.fetch_error = Some(format!("id '{}' is not a safe file name", item.id));
            report.failed.push(item.id.clone());
            entries.push(e);
            continue;
        }
        let rel = format!("raw/{}.{}", item.id, extension(&uri));
        let dest = out_dir.join(&rel);
        if let (Some(h), true) = (&e.content_hash, dest.exists()) {
            let bytes = std::fs::read(&dest).map_err(|err| Error::io(&dest, err))?;
            if &sha256_hex(&bytes) == h {
                e.raw_path = Some(rel);
                e.fetch_error = None;
                report.skipped += 1;
                entries.push(e);
                continue;
            }
        }
        match read_source(&uri, opts) {
            Ok(bytes) => {
                std::fs::write(&dest, &bytes).map_err(|err| Error::io(&dest, err))?;
                e.content_hash = Some(sha256_hex(&bytes));
                e.raw_path = Some(rel);
                e.fetch_error = None;
                report.downloaded += 1;
            }
            Err(err) => {
                tracing::warn!(id = %item.id, error = %err, "fetch failed");
                e.fetch_error = Some(err.to_string());
                e.raw_path = None;
                e.content_hash = None;
                report.failed.push(item.id.clone());
            }
        }
        entries.push(e);
    }
    let manifest = DatasetManifest::new(opts.resolution, entries)?;
    manifest.save(&manifest_path)?;
    Ok((manifest, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;

    /// Minimal HTTP/1.1 server: serves `files`, 404 otherwise.
    fn serve(files: Vec<(String, Vec<u8>)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut s) = stream else { continue };
                let mut reader = BufReader::new(s.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).is_err() {
                    continue;
                }
                loop {
                    let mut h = String::new();
                    if reader.read_line(&mut h).is_err() || h == "\r\n" || h.is_empty() {
                        break;
                    }
                }
                let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
                let body = files.iter().find(|(p, _)| *p == path).map(|(_, b)| b.clone());
                let (status, body) = match body {
                    Some(b) => ("200 OK", b),
                    None => ("404 Not Found", b"missing".to_vec()),
                };
                let _ = write!(s, "HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
                let _ = s.write_all(&body);
            }
        });
        format!("http://{addr}")
    }

    fn png(v: u8) -> Vec<u8> {
        let img = image::RgbImage::from_pixel(8, 8, image::Rgb([v, v, v]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn mirror_fetch_is_idempotent() {
        let mirror = tempfile::tempdir().unwrap();
        for i in 0..10 {
            std::fs::write(mirror.path().join(format!("c{i}.png")), png(i * 20)).unwrap();
        }
        std::fs::write(mirror.path().join("notes.txt"), "x").unwrap();
        let out = tempfile::tempdir().unwrap();
        let src = CatalogSource::parse(mirror.path().to_str().unwrap());
        let opts = FetchOptions { resolution: 64, ..Default::default() };
        let (m, r) = fetch_catalog(&src, out.path(), &opts).unwrap();
        assert_eq!(m.entries.len(), 10);
        assert_eq!(r.downloaded, 10);
        let first = std::fs::read(out.path().join(MANIFEST_FILE)).unwrap();
        let (m2, r2) = fetch_catalog(&src, out.path(), &opts).unwrap();
        assert_eq!(r2, FetchReport { downloaded: 0, skipped: 10, failed: vec![] });
        assert_eq!(m2, m);
        assert_eq!(std::fs::read(out.path().join(MANIFEST_FILE)).unwrap(), first);
    }

    #[test]
    fn http_fetch_isolates_failures() {
        let catalog = serde_json::json!([
            {"id": "a", "image": "img/a.png", "tags": ["monster"]},
            {"id": "b", "image": "img/missing.png"},
            {"id": "c", "image": "img/c.png", "crop_box": {"x": 1, "y": 1, "width": 4, "height": 4}},
        ]);
        let base = serve(vec![
            ("/catalog.json".into(), serde_json::to_vec(&catalog).unwrap()),
            ("/img/a.png".into(), png(10)),
            ("/img/c.png".into(), png(200)),
        ]);
        let out = tempfile::tempdir().unwrap();
        let opts = FetchOptions {
            resolution: 64,
            retries: 1,
            backoff: Duration::from_millis(1),
        };
        let (m, r) = fetch_catalog(&CatalogSource::parse(&base), out.path(), &opts).unwrap();
        assert_eq!(r.downloaded, 2);
        assert_eq!(r.failed, vec!["b".to_string()]);
        assert!(m.get("b").unwrap().fetch_error.as_deref().unwrap().contains("404"));
        assert_eq!(m.get("c").unwrap().crop_box, Some(CropBox::square(1, 1, 4)));
        assert_eq!(m.kept().count(), 2);
        assert_eq!(m.tag_counts["monster"], 1);
        assert_eq!(
            m.get("a").unwrap().content_hash.as_deref(),
            Some(sha256_hex(&png(10)).as_str())
        );
    }
}
