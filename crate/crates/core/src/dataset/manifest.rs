//! Line-delimited JSON manifests: one header line, then one record per line.
//!
//! External pair sets can use a smaller adapter schema with one
//! `{"ref": ..., "dist_0": ..., "dist_1": ..., "y": ...}` object per line.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetError, SamplerConfig};
use crate::consistency::VoteResult;

pub const MANIFEST_FORMAT: &str = "machsim-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub sampler: SamplerConfig,
    pub voters: Vec<String>,
    pub library_version: u32,
    pub library_size: usize,
    pub references: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub reference_id: String,
    pub variant_id_0: String,
    pub variant_id_1: String,
    pub ref_path: String,
    pub path_0: String,
    pub path_1: String,
    pub psnr_0: f64,
    pub psnr_1: f64,
    pub vote_result: VoteResult,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<PairRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(ManifestHeader),
    Pair(PairRecord),
}

impl DatasetManifest {
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &Line::Header(self.header.clone()))?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, &Line::Pair(r.clone()))?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
            .map_err(|e| DatasetError::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header = match lines.next() {
            Some((_, l)) => match serde_json::from_str::<Line>(l) {
                Ok(Line::Header(h)) => h,
                _ => return Err(DatasetError::Manifest("first line must be a header".into())),
            },
            None => return Err(DatasetError::Manifest("empty manifest".into())),
        };
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest(format!(
                "unsupported manifest {} v{}",
                header.format, header.version
            )));
        }
        let mut records = Vec::new();
        for (n, l) in lines {
            match serde_json::from_str::<Line>(l) {
                Ok(Line::Pair(r)) => records.push(r),
                Ok(Line::Header(_)) => {
                    return Err(DatasetError::Manifest(format!("line {}: second header", n + 1)))
                }
                Err(e) => return Err(DatasetError::Manifest(format!("line {}: {e}", n + 1))),
            }
        }
        Ok(Self { header, records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn labeled_pairs(&self) -> Vec<LabeledPair> {
        self.records
            .iter()
            .map(|r| LabeledPair {
                reference_id: r.reference_id.clone(),
                ref_path: r.ref_path.clone(),
                path_0: r.path_0.clone(),
                path_1: r.path_1.clone(),
                y: r.y,
            })
            .collect()
    }
}

/// A pair with its label, independent of how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub reference_id: String,
    pub ref_path: String,
    pub path_0: String,
    pub path_1: String,
    /// Fraction of voters preferring the first variant.
    pub y: f64,
}

#[derive(Deserialize)]
struct AdapterRow {
    #[serde(rename = "ref")]
    reference: String,
    dist_0: String,
    dist_1: String,
    y: f64,
}

/// Loads labeled pairs from a manifest or an adapter-schema file. Returned
/// paths are relative to the returned base directory.
pub fn load_labeled_pairs(path: impl AsRef<Path>) -> Result<(Vec<LabeledPair>, PathBuf), DatasetError> {
    let path = path.as_ref();
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let f = std::fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut first = String::new();
    let mut reader = std::io::BufReader::new(f);
    reader
        .read_line(&mut first)
        .map_err(|e| DatasetError::io(path, e))?;
    if first.contains("\"kind\":\"header\"") {
        return Ok((DatasetManifest::load(path)?.labeled_pairs(), base));
    }
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: AdapterRow = serde_json::from_str(line)
            .map_err(|e| DatasetError::Manifest(format!("line {}: {e}", n + 1)))?;
        if !(0.0..=1.0).contains(&row.y) {
            return Err(DatasetError::Manifest(format!("line {}: y outside [0, 1]", n + 1)));
        }
        pairs.push(LabeledPair {
            reference_id: row.reference.clone(),
            ref_path: row.reference,
            path_0: row.dist_0,
            path_1: row.dist_1,
            y: row.y,
        });
    }
    Ok((pairs, base))
}
