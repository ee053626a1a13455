//! Reproducibility stamp written next to each run's outputs.
//!
//! A stamp holds the resolved settings, every seed, tool versions and a
//! digest of each input. It has no timestamps or host details, so repeated
//! runs with the same inputs produce the same stamp.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Stamp {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub core_version: &'static str,
    pub command: String,
    pub settings: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input name to hex SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
}

impl Stamp {
    pub fn new(command: &str, settings: impl Serialize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            tool_version: env!("CARGO_PKG_VERSION"),
            core_version: machsim_core::VERSION,
            command: command.to_owned(),
            settings: serde_json::to_value(settings).expect("settings serialize"),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_owned(), value);
        self
    }

    /// Records the digest of a file, or of every file under a directory.
    pub fn input(mut self, name: &str, path: &Path) -> anyhow::Result<Self> {
        self.inputs.insert(name.to_owned(), digest_path(path)?);
        Ok(self)
    }

    pub fn input_digest(mut self, name: &str, digest: String) -> Self {
        self.inputs.insert(name.to_owned(), digest);
        self
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing stamp {}", path.display()))
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_path(path: &Path) -> anyhow::Result<String> {
    if !path.is_dir() {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(digest_bytes(&bytes));
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex(&h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// `out.json` -> `out.<suffix>`, keeping the directory.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_digest_ignores_listing_order_and_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.png"), b"two").unwrap();
        std::fs::write(dir.path().join("a.png"), b"one").unwrap();
        let d1 = digest_path(dir.path()).unwrap();
        assert_eq!(d1, digest_path(dir.path()).unwrap());
        std::fs::write(dir.path().join("a.png"), b"changed").unwrap();
        assert_ne!(d1, digest_path(dir.path()).unwrap());
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            digest_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar(Path::new("o/m.jsonl"), "stats.json"), Path::new("o/m.stats.json"));
        assert_eq!(sidecar(Path::new("ckpt"), "report.json"), Path::new("ckpt.report.json"));
    }
}
