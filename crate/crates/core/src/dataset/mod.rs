//! PSNR-matched pair sampling, vote labeling and dataset manifests.

pub mod manifest;
pub mod stats;
pub mod store;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use manifest::{load_labeled_pairs, DatasetManifest, LabeledPair, ManifestHeader, PairRecord};
pub use stats::DatasetStats;
pub use store::{DirStore, ImageSource, ImageStore, MemoryStore};

use crate::consistency::{
    discrepancy, ConsistencyError, TaskPrediction, VoteResult, VoterModel,
};
use crate::distortion::{DistortionEngine, DistortionError, Library, VariantSet};
use crate::image::{Image, ImageError};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("every voter was skipped for this pair")]
    AllVotersSkipped,
    #[error("no pairs survived the build")]
    EmptyOutput,
    #[error("nothing to build: {0}")]
    EmptyInput(&'static str),
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("image `{0}` not found")]
    MissingImage(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Distortion(#[from] DistortionError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// PSNR tolerance in dB.
    pub delta_db: f64,
    /// `None` keeps every matched pair.
    pub max_pairs_per_reference: Option<usize>,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            delta_db: 0.5,
            max_pairs_per_reference: None,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.delta_db.is_finite() && self.delta_db > 0.0) {
            return Err(DatasetError::Config(format!(
                "delta_db must be finite and positive, got {}",
                self.delta_db
            )));
        }
        Ok(())
    }
}

/// A stream seed that depends on the run seed and a name.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Unordered pairs of finite-PSNR variants whose PSNRs differ by at most
/// `delta_db`. Pairs of bit-identical variants are dropped. Pairs keep
/// library order (`variant_id_0` comes first in the set).
pub fn sample_pairs(variants: &VariantSet, cfg: &SamplerConfig) -> Vec<(String, String)> {
    let finite: Vec<_> = variants
        .variants
        .iter()
        .filter(|v| v.psnr_db.is_finite())
        .collect();
    let mut pairs = Vec::new();
    for (i, a) in finite.iter().enumerate() {
        for b in &finite[i + 1..] {
            if (a.psnr_db - b.psnr_db).abs() <= cfg.delta_db && a.content_hash != b.content_hash {
                pairs.push((a.variant_id.clone(), b.variant_id.clone()));
            }
        }
    }
    match cfg.max_pairs_per_reference {
        Some(max) if pairs.len() > max => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &variants.reference_id));
            let mut keep = rand::seq::index::sample(&mut rng, pairs.len(), max).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| pairs[i].clone()).collect()
        }
        _ => pairs,
    }
}

/// Votes from precomputed predictions. `reference[k]` is voter `k`'s
/// prediction on the reference image.
fn vote_with_predictions(
    voters: &[Box<dyn VoterModel>],
    reference: &[Result<TaskPrediction, ConsistencyError>],
    p0: &[Result<TaskPrediction, ConsistencyError>],
    p1: &[Result<TaskPrediction, ConsistencyError>],
) -> Result<VoteResult, DatasetError> {
    let mut rows = Vec::with_capacity(voters.len());
    for (k, voter) in voters.iter().enumerate() {
        let d = |pred: &Result<TaskPrediction, ConsistencyError>| -> Result<f64, ConsistencyError> {
            let r = reference[k].as_ref().map_err(Clone::clone)?;
            let p = pred.as_ref().map_err(Clone::clone)?;
            discrepancy(voter.task(), r, p)
        };
        match (d(&p0[k]), d(&p1[k])) {
            (Ok(d0), Ok(d1)) => rows.push((voter.id().to_owned(), d0, d1)),
            (Err(e), _) | (_, Err(e)) => {
                log::debug!("voter `{}` skipped: {e}", voter.id());
            }
        }
    }
    if rows.is_empty() {
        return Err(DatasetError::AllVotersSkipped);
    }
    Ok(VoteResult::from_discrepancies(rows)?)
}

fn predict_all(
    voters: &[Box<dyn VoterModel>],
    img: &Image,
) -> Vec<Result<TaskPrediction, ConsistencyError>> {
    voters.iter().map(|v| v.predict(img)).collect()
}

/// Labels one pair by the vote ratio of voters preferring `x0`.
pub fn label_pair(
    reference: &Image,
    x0: &Image,
    x1: &Image,
    voters: &[Box<dyn VoterModel>],
) -> Result<VoteResult, DatasetError> {
    vote_with_predictions(
        voters,
        &predict_all(voters, reference),
        &predict_all(voters, x0),
        &predict_all(voters, x1),
    )
}

struct ReferenceOutput {
    records: Vec<PairRecord>,
    images: Vec<(String, Image)>,
}

fn process_reference(
    engine: &DistortionEngine,
    reference_id: &str,
    img: &Image,
    library: &Library,
    voters: &[Box<dyn VoterModel>],
    cfg: &SamplerConfig,
) -> Result<ReferenceOutput, DatasetError> {
    let (set, images) = engine.generate_variants(reference_id, img, library)?;
    let pairs = sample_pairs(&set, cfg);
    if pairs.is_empty() {
        return Ok(ReferenceOutput {
            records: Vec::new(),
            images: Vec::new(),
        });
    }
    let index = |id: &str| {
        set.variants
            .iter()
            .position(|v| v.variant_id == id)
            .expect("sampled ids come from the set")
    };
    let ref_preds = predict_all(voters, img);
    let mut preds: Vec<Option<Vec<_>>> = vec![None; set.variants.len()];
    let mut records = Vec::with_capacity(pairs.len());
    for (a, b) in &pairs {
        let (i, j) = (index(a), index(b));
        for k in [i, j] {
            if preds[k].is_none() {
                preds[k] = Some(predict_all(voters, &images[k]));
            }
        }
        let vote = match vote_with_predictions(
            voters,
            &ref_preds,
            preds[i].as_ref().expect("filled"),
            preds[j].as_ref().expect("filled"),
        ) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("{reference_id}: dropping pair ({a}, {b}): {e}");
                continue;
            }
        };
        records.push(PairRecord {
            reference_id: reference_id.to_owned(),
            variant_id_0: a.clone(),
            variant_id_1: b.clone(),
            ref_path: store::reference_path(reference_id),
            path_0: store::variant_path(reference_id, a),
            path_1: store::variant_path(reference_id, b),
            psnr_0: set.variants[i].psnr_db,
            psnr_1: set.variants[j].psnr_db,
            y: vote.soft_label,
            vote_result: vote,
        });
    }
    let mut used: Vec<usize> = records
        .iter()
        .flat_map(|r| [index(&r.variant_id_0), index(&r.variant_id_1)])
        .collect();
    used.sort_unstable();
    used.dedup();
    let mut out_images = Vec::with_capacity(used.len() + 1);
    if !records.is_empty() {
        out_images.push((store::reference_path(reference_id), img.clone()));
        for k in used {
            out_images.push((
                store::variant_path(reference_id, &set.variants[k].variant_id),
                images[k].clone(),
            ));
        }
    }
    Ok(ReferenceOutput {
        records,
        images: out_images,
    })
}

/// Builds a labeled manifest. References are processed in parallel; a
/// reference that fails is logged and skipped. Images referenced by records
/// are written through `store`, and records come out sorted by reference id
/// then variant ids.
pub fn build_dataset(
    references: &[(String, Image)],
    library: &Library,
    voters: &[Box<dyn VoterModel>],
    cfg: &SamplerConfig,
    store: &dyn ImageStore,
) -> Result<DatasetManifest, DatasetError> {
    build_dataset_with(
        &DistortionEngine::default(),
        references,
        library,
        voters,
        cfg,
        store,
    )
}

pub fn build_dataset_with(
    engine: &DistortionEngine,
    references: &[(String, Image)],
    library: &Library,
    voters: &[Box<dyn VoterModel>],
    cfg: &SamplerConfig,
    store: &dyn ImageStore,
) -> Result<DatasetManifest, DatasetError> {
    cfg.validate()?;
    if references.is_empty() {
        return Err(DatasetError::EmptyInput("no reference images"));
    }
    if library.entries.is_empty() {
        return Err(DatasetError::EmptyInput("empty distortion library"));
    }
    if voters.is_empty() {
        return Err(DatasetError::EmptyInput("empty voter pool"));
    }
    let mut ids: Vec<&str> = references.iter().map(|(id, _)| id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(DatasetError::Config("duplicate reference ids".into()));
    }

    let mut outputs: Vec<(String, ReferenceOutput)> = references
        .par_iter()
        .filter_map(|(id, img)| {
            match process_reference(engine, id, img, library, voters, cfg) {
                Ok(out) => Some((id.clone(), out)),
                Err(e) => {
                    log::warn!("reference `{id}` skipped: {e}");
                    None
                }
            }
        })
        .collect();
    outputs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut records = Vec::new();
    for (_, out) in outputs {
        for (path, img) in &out.images {
            store.put(path, img)?;
        }
        records.extend(out.records);
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyOutput);
    }
    records.sort_by(|a, b| {
        (&a.reference_id, &a.variant_id_0, &a.variant_id_1).cmp(&(
            &b.reference_id,
            &b.variant_id_0,
            &b.variant_id_1,
        ))
    });
    Ok(DatasetManifest {
        header: ManifestHeader {
            format: manifest::MANIFEST_FORMAT.into(),
            version: manifest::MANIFEST_VERSION,
            sampler: cfg.clone(),
            voters: voters.iter().map(|v| v.id().to_owned()).collect(),
            library_version: library.version,
            library_size: library.entries.len(),
            references: references.len(),
        },
        records,
    })
}
