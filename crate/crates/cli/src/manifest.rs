//! Run manifests and content hashing of command inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub role: String,
    pub hash: String,
}

#[derive(Debug, Serialize)]
pub struct Timestamps {
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` wins when set.
    pub started: u64,
}

/// Written into every output directory before any work starts. Paths are
/// left out on purpose: inputs are identified by content, so reruns into a
/// different directory produce the same manifest.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputHash>,
    pub timestamps: Timestamps,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            timestamps: Timestamps { started: now() },
        }
    }

    pub fn with_config<K: ToString, V: ToString>(mut self, pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        self.config
            .extend(pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())));
        self
    }

    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.push(InputHash {
            role: role.to_string(),
            hash: hash_path(path)?,
        });
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_MANIFEST), self)
    }
}

fn now() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return v;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn blob_hash(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style hash: files hash as blobs, directories as a sorted listing of
/// `relative/path blob-hash` lines. Run manifests inside the tree are skipped.
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).with_context(|| format!("cannot read {}", path.display()))?;
    if meta.is_file() {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        return Ok(format!("sha256:{}", hex(&blob_hash(&bytes))));
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    let mut entries: Vec<(String, PathBuf)> = files
        .into_iter()
        .filter(|p| p.file_name().and_then(|n| n.to_str()) != Some(RUN_MANIFEST))
        .map(|p| {
            let rel = p
                .strip_prefix(path)
                .unwrap_or(&p)
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            (rel, p)
        })
        .collect();
    entries.sort();
    let mut tree = Sha256::new();
    for (rel, p) in entries {
        let bytes = fs::read(&p).with_context(|| format!("cannot read {}", p.display()))?;
        tree.update(format!("{rel} {}\n", hex(&blob_hash(&bytes))).as_bytes());
    }
    Ok(format!("sha256:{}", hex(&tree.finalize())))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
