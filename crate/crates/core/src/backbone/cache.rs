//! On-disk feature bundles keyed by image content and backbone id.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{Backbone, BackboneError, FeatureBundle, GlobalEmbedding, LayerFeatures};
use crate::image::Image;

const MAGIC: &[u8; 4] = b"MSF1";

#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, backbone_id: &str, img: &Image) -> PathBuf {
        let mut h = Sha256::new();
        h.update(backbone_id.as_bytes());
        h.update([0]);
        h.update(img.content_hash().as_bytes());
        self.dir.join(format!("{}.feat", crate::image::to_hex(&h.finalize())))
    }

    /// Cached features, computing and storing them on a miss. An unreadable
    /// entry is recomputed and overwritten.
    pub fn get_or_compute(&self, backbone: &dyn Backbone, img: &Image) -> Result<FeatureBundle, BackboneError> {
        let path = self.path(backbone.id(), img);
        if let Ok(bytes) = std::fs::read(&path) {
            match decode(&bytes) {
                Some(b) => return Ok(b),
                None => log::warn!("ignoring corrupt cache entry {}", path.display()),
            }
        }
        let bundle = backbone.extract_features(img)?;
        std::fs::create_dir_all(&self.dir).map_err(|e| BackboneError::io(&self.dir, e))?;
        // write then rename so concurrent readers never see a partial file
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, encode(&bundle)).map_err(|e| BackboneError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| BackboneError::io(&path, e))?;
        Ok(bundle)
    }
}

fn encode(b: &FeatureBundle) -> Vec<u8> {
    let (t, d) = b.token_shape();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for n in [b.layers.len(), t, d, b.global.dim()] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for l in &b.layers {
        out.extend_from_slice(&(l.layer_index as u32).to_le_bytes());
    }
    for l in &b.layers {
        for v in l.tokens.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in b.global.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8]) -> Option<FeatureBundle> {
    let rest = bytes.strip_prefix(MAGIC)?;
    let u32_at = |i: usize| -> Option<usize> {
        Some(u32::from_le_bytes(rest.get(4 * i..4 * i + 4)?.try_into().ok()?) as usize)
    };
    let (nl, t, d, dg) = (u32_at(0)?, u32_at(1)?, u32_at(2)?, u32_at(3)?);
    let indices: Vec<usize> = (0..nl).map(|k| u32_at(4 + k)).collect::<Option<_>>()?;
    let floats = &rest[4 * (4 + nl)..];
    if floats.len() != 8 * (nl * t * d + dg) {
        return None;
    }
    let mut vals = floats
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut layers = Vec::with_capacity(nl);
    for idx in indices {
        let data: Vec<f64> = vals.by_ref().take(t * d).collect();
        layers.push(LayerFeatures {
            layer_index: idx,
            tokens: Array2::from_shape_vec((t, d), data).ok()?,
        });
    }
    let global = GlobalEmbedding::from_unit(vals.collect()).ok()?;
    let b = FeatureBundle { layers, global };
    b.validate().ok()?;
    Some(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SyntheticEncoder;
    use crate::synthetic::reference_image;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path().join("feats"));
        let enc = SyntheticEncoder::default();
        let img = reference_image(64, 64, 8);
        let a = cache.get_or_compute(&enc, &img).unwrap();
        let b = cache.get_or_compute(&enc, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, enc.extract_features(&img).unwrap());
        assert_eq!(std::fs::read_dir(cache.dir()).unwrap().count(), 1);
    }

    #[test]
    fn corrupt_entry_is_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let enc = SyntheticEncoder::default();
        let img = reference_image(64, 64, 9);
        let path = cache.path(enc.id(), &img);
        std::fs::write(&path, b"MSF1 truncated").unwrap();
        assert_eq!(cache.get_or_compute(&enc, &img).unwrap(), enc.extract_features(&img).unwrap());
    }
}
