//! Deterministic distorted variants of reference images, and PSNR.

pub mod codec;
pub mod library;
pub mod ops;
pub mod spec;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use codec::{HaarStubCodec, LearnedCodec};
pub use library::{default_library, Library, LibraryEntry};
pub use spec::{DistortionSpec, Family, Operator, Param};

use crate::image::Image;

#[derive(Debug, thiserror::Error)]
pub enum DistortionError {
    #[error("invalid {family} parameter `{param}`: {reason}")]
    InvalidParams {
        family: Family,
        param: String,
        reason: String,
    },
    #[error("unsupported family or backend: {0}")]
    UnsupportedFamily(String),
    #[error("codec failure: {0}")]
    Codec(String),
    #[error("image shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("distortion library is empty")]
    EmptyLibrary,
    #[error("variant `{id}` failed: {source}")]
    Variant {
        id: String,
        #[source]
        source: Box<DistortionError>,
    },
    #[error("library: {0}")]
    Library(String),
}

/// Peak signal-to-noise ratio over all RGB channels in the 8-bit domain.
/// Identical images give `f64::INFINITY`.
pub fn psnr(reference: &Image, distorted: &Image) -> Result<f64, DistortionError> {
    if reference.dimensions() != distorted.dimensions() {
        return Err(DistortionError::ShapeMismatch {
            a: reference.dimensions(),
            b: distorted.dimensions(),
        });
    }
    let sse: u64 = reference
        .as_raw()
        .iter()
        .zip(distorted.as_raw())
        .map(|(&a, &b)| {
            let d = a as i64 - b as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse as f64 / reference.as_raw().len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// Applies distortion specs. Holds the learned-codec registry; everything
/// else is built in.
#[derive(Clone)]
pub struct DistortionEngine {
    learned: BTreeMap<String, Arc<dyn LearnedCodec>>,
}

impl Default for DistortionEngine {
    fn default() -> Self {
        let mut e = Self {
            learned: BTreeMap::new(),
        };
        e.register_codec(Arc::new(HaarStubCodec));
        e
    }
}

impl DistortionEngine {
    pub fn register_codec(&mut self, codec: Arc<dyn LearnedCodec>) {
        self.learned.insert(codec.id().to_owned(), codec);
    }

    pub fn apply(&self, img: &Image, spec: &DistortionSpec) -> Result<Image, DistortionError> {
        let out = match spec.resolve()? {
            Operator::Jpeg { quality } => codec::jpeg(img, quality)?,
            Operator::Webp { quality } => codec::webp_style(img, quality),
            Operator::Learned {
                codec,
                step,
                levels,
            } => {
                let backend = self.learned.get(&codec).ok_or_else(|| {
                    DistortionError::UnsupportedFamily(format!("learned codec `{codec}`"))
                })?;
                backend.round_trip(img, step, levels)?
            }
            Operator::Resample { scale, filter } => ops::resample(img, scale, filter),
            Operator::GaussianBlur { sigma } => ops::gaussian_blur(img, sigma),
            Operator::BoxBlur { radius } => ops::box_blur(img, radius),
            Operator::GaussianNoise { sigma } => ops::gaussian_noise(img, sigma, spec.seed),
            Operator::SaltPepper { amount } => ops::salt_pepper(img, amount, spec.seed),
            Operator::Tone { op, amount } => ops::tone(img, op, amount),
        };
        debug_assert_eq!(out.dimensions(), img.dimensions());
        Ok(out)
    }

    /// One variant per library entry, or the first failure tagged with its id.
    pub fn generate_variants(
        &self,
        reference_id: &str,
        img: &Image,
        library: &Library,
    ) -> Result<(VariantSet, Vec<Image>), DistortionError> {
        if library.entries.is_empty() {
            return Err(DistortionError::EmptyLibrary);
        }
        let mut variants = Vec::with_capacity(library.entries.len());
        let mut images = Vec::with_capacity(library.entries.len());
        for entry in &library.entries {
            let tag = |e| DistortionError::Variant {
                id: entry.id.clone(),
                source: Box::new(e),
            };
            let out = self.apply(img, &entry.spec).map_err(tag)?;
            let psnr_db = psnr(img, &out).map_err(tag)?;
            variants.push(Variant {
                variant_id: entry.id.clone(),
                spec: entry.spec.clone(),
                psnr_db,
                content_hash: out.content_hash(),
            });
            images.push(out);
        }
        Ok((
            VariantSet {
                reference_id: reference_id.to_owned(),
                variants,
            },
            images,
        ))
    }
}

pub fn apply_distortion(img: &Image, spec: &DistortionSpec) -> Result<Image, DistortionError> {
    DistortionEngine::default().apply(img, spec)
}

pub fn generate_variants(
    reference_id: &str,
    img: &Image,
    library: &Library,
) -> Result<(VariantSet, Vec<Image>), DistortionError> {
    DistortionEngine::default().generate_variants(reference_id, img, library)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub variant_id: String,
    pub spec: DistortionSpec,
    /// `f64::INFINITY` when the variant equals the reference.
    pub psnr_db: f64,
    /// Hash of the decoded pixels; bit-identical variants share it.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSet {
    pub reference_id: String,
    pub variants: Vec<Variant>,
}

impl VariantSet {
    pub fn ids_unique(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.variants.iter().all(|v| seen.insert(v.variant_id.as_str()))
    }
}
