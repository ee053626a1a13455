//! Scores full-reference metrics against labeled pairs, and computes BD-rate
//! and the rate–distortion adapter.
//!
//! On pair sets the rank and linear correlations are taken between the
//! per-pair score difference `S0 - S1` and the label `y`.

mod bdrate;
mod correlation;
mod msssim;
mod rd;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bdrate::{bd_rate, RateTaskCurve};
pub use correlation::{average_ranks, krcc, plcc, srcc};
pub use msssim::{ms_ssim, scale_count};
pub use rd::{rd_distortion, rd_distortion_with_grad, rd_loss, RD_LAMBDAS};

use crate::backbone::{Backbone, BackboneError, FeatureCache};
use crate::dataset::{ImageSource, LabeledPair};
use crate::distortion::psnr;
use crate::image::Image;
use crate::metric::{self, MetricError, MetricParams};
use crate::trainer::{self, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no pairs to evaluate")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooShort { got: usize, need: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("zero variance input")]
    ZeroVariance,
    #[error("tied label (y = 0.5) in a pair set that must not contain ties")]
    TieLabel,
    #[error("bad curve: {0}")]
    Curve(String),
    #[error("score ranges of the two curves do not overlap")]
    NoOverlap,
    #[error("cubic fit is degenerate")]
    DegenerateFit,
    #[error("{metric}: {message}")]
    Metric { metric: String, message: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Head(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub trait MetricUnderTest: Send + Sync {
    fn id(&self) -> &str;

    /// Raw score of `distorted` against `reference`.
    fn score(&self, reference: &Image, distorted: &Image) -> Result<f64, EvalError>;

    fn higher_is_better(&self) -> bool {
        true
    }

    /// Score with higher always meaning better quality.
    fn oriented_score(&self, reference: &Image, distorted: &Image) -> Result<f64, EvalError> {
        let s = self.score(reference, distorted)?;
        Ok(if self.higher_is_better() { s } else { -s })
    }

    /// Oriented scores of both variants of every pair.
    fn score_pairs(&self, pairs: &[LabeledPair], source: &dyn ImageSource) -> Result<Vec<(f64, f64)>, EvalError> {
        let load = |p: &str| {
            source.load(p).map_err(|e| EvalError::Metric {
                metric: self.id().to_owned(),
                message: e.to_string(),
            })
        };
        pairs
            .par_iter()
            .map(|p| {
                let r = load(&p.ref_path)?;
                Ok((
                    self.oriented_score(&r, &load(&p.path_0)?)?,
                    self.oriented_score(&r, &load(&p.path_1)?)?,
                ))
            })
            .collect()
    }
}

/// PSNR in dB, capped so identical images stay comparable.
pub struct PsnrMetric;

pub const PSNR_CAP_DB: f64 = 100.0;

impl MetricUnderTest for PsnrMetric {
    fn id(&self) -> &str {
        "psnr"
    }

    fn score(&self, reference: &Image, distorted: &Image) -> Result<f64, EvalError> {
        psnr(reference, distorted)
            .map(|v| v.min(PSNR_CAP_DB))
            .map_err(|e| EvalError::Metric {
                metric: "psnr".into(),
                message: e.to_string(),
            })
    }
}

pub struct MsSsimMetric;

impl MetricUnderTest for MsSsimMetric {
    fn id(&self) -> &str {
        "ms_ssim"
    }

    fn score(&self, reference: &Image, distorted: &Image) -> Result<f64, EvalError> {
        ms_ssim(reference, distorted).ok_or_else(|| EvalError::Metric {
            metric: "ms_ssim".into(),
            message: "images differ in size or are smaller than the window".into(),
        })
    }
}

/// Learned head over a frozen backbone. With a global-only head this is the
/// plain global-embedding cosine.
pub struct LearnedMetric {
    id: String,
    backbone: Arc<dyn Backbone>,
    params: MetricParams,
    cache: Option<FeatureCache>,
}

impl LearnedMetric {
    pub fn new(id: impl Into<String>, backbone: Arc<dyn Backbone>, params: MetricParams) -> Self {
        Self {
            id: id.into(),
            backbone,
            params,
            cache: None,
        }
    }

    /// Cosine of global embeddings only.
    pub fn global_cosine(backbone: Arc<dyn Backbone>) -> Self {
        let layers = backbone.num_layers().unwrap_or(12);
        Self::new("clipscore", backbone, metric::Ablation::GlobalOnly.params(layers))
    }

    pub fn with_cache(mut self, cache: FeatureCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn params(&self) -> &MetricParams {
        &self.params
    }
}

impl MetricUnderTest for LearnedMetric {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, reference: &Image, distorted: &Image) -> Result<f64, EvalError> {
        let get = |img: &Image| match &self.cache {
            Some(c) => c.get_or_compute(self.backbone.as_ref(), img),
            None => self.backbone.extract_features(img),
        };
        Ok(metric::score(&get(reference)?, &get(distorted)?, &self.params)?.s)
    }

    fn score_pairs(&self, pairs: &[LabeledPair], source: &dyn ImageSource) -> Result<Vec<(f64, f64)>, EvalError> {
        let sims = trainer::pair_similarities(pairs, source, self.backbone.as_ref(), self.cache.as_ref(), &self.params)?;
        Ok(sims
            .iter()
            .map(|p| {
                (
                    metric::score_from_similarities(&p.layers_0, p.global_0, &self.params).s,
                    metric::score_from_similarities(&p.layers_1, p.global_1, &self.params).s,
                )
            })
            .collect())
    }
}

/// Share of pairs where the higher-scored variant is the one the label
/// prefers. Equal scores count as wrong.
pub fn pairwise_accuracy(scores: &[(f64, f64)], labels: &[f64]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if labels.contains(&0.5) {
        return Err(EvalError::TieLabel);
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|((s0, s1), y)| s0 != s1 && (s0 > s1) == (**y > 0.5))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub pairs: usize,
    pub ties_skipped: usize,
    pub accuracy: f64,
    /// `None` when undefined for this set (for example constant labels).
    pub srcc: Option<f64>,
    pub krcc: Option<f64>,
    pub plcc: Option<f64>,
}

/// Evaluates `metric` on the non-tie pairs of `pairs`.
pub fn evaluate(metric: &dyn MetricUnderTest, pairs: &[LabeledPair], source: &dyn ImageSource) -> Result<EvalReport, EvalError> {
    let kept: Vec<LabeledPair> = pairs.iter().filter(|p| p.y != 0.5).cloned().collect();
    if kept.is_empty() {
        return Err(EvalError::Empty);
    }
    let scores = metric.score_pairs(&kept, source)?;
    let labels: Vec<f64> = kept.iter().map(|p| p.y).collect();
    let diffs: Vec<f64> = scores.iter().map(|(a, b)| a - b).collect();
    let opt = |r: Result<f64, EvalError>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::info!("{}: correlation undefined: {e}", metric.id());
            None
        }
    };
    Ok(EvalReport {
        metric: metric.id().to_owned(),
        pairs: kept.len(),
        ties_skipped: pairs.len() - kept.len(),
        accuracy: pairwise_accuracy(&scores, &labels)?,
        srcc: opt(srcc(&diffs, &labels)),
        krcc: opt(krcc(&diffs, &labels)),
        plcc: opt(plcc(&diffs, &labels)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageStore, MemoryStore};

    #[test]
    fn accuracy_examples() {
        let labels = [1.0, 0.0, 1.0, 0.0];
        let good = [(0.9, 0.1), (0.1, 0.9), (0.8, 0.2), (0.3, 0.4)];
        assert_eq!(pairwise_accuracy(&good, &labels).unwrap(), 1.0);
        assert_eq!(pairwise_accuracy(&[(0.5, 0.5); 4], &labels).unwrap(), 0.0);
        let three = [(0.9, 0.1), (0.1, 0.9), (0.8, 0.2), (0.5, 0.4)];
        assert_eq!(pairwise_accuracy(&three, &labels).unwrap(), 0.75);
        assert!(matches!(pairwise_accuracy(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(pairwise_accuracy(&[(1.0, 0.0)], &[0.5]), Err(EvalError::TieLabel)));
    }

    struct Mse;

    impl MetricUnderTest for Mse {
        fn id(&self) -> &str {
            "mse"
        }

        fn score(&self, r: &Image, d: &Image) -> Result<f64, EvalError> {
            let n = r.as_raw().len() as f64;
            Ok(r.as_raw().iter().zip(d.as_raw()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / n)
        }

        fn higher_is_better(&self) -> bool {
            false
        }
    }

    fn pair_set() -> (Vec<LabeledPair>, MemoryStore) {
        let store = MemoryStore::new();
        let mut pairs = Vec::new();
        for k in 0..6u8 {
            let r = Image::filled(32, 32, [100 + k, 100, 100]).unwrap();
            let near = Image::filled(32, 32, [102 + k, 100, 100]).unwrap();
            let far = Image::filled(32, 32, [110 + k, 100, 100]).unwrap();
            let (a, b) = (format!("r{k}"), format!("n{k}"));
            store.put(&a, &r).unwrap();
            store.put(&b, &near).unwrap();
            store.put(&format!("f{k}"), &far).unwrap();
            // label prefers the nearer variant, with varying confidence
            let y = if k % 2 == 0 { 1.0 - k as f64 / 20.0 } else { k as f64 / 20.0 };
            let (p0, p1) = if k % 2 == 0 { (b, format!("f{k}")) } else { (format!("f{k}"), b) };
            pairs.push(LabeledPair {
                reference_id: a.clone(),
                ref_path: a,
                path_0: p0,
                path_1: p1,
                y,
            });
        }
        (pairs, store)
    }

    #[test]
    fn lower_is_better_metrics_are_negated() {
        let (pairs, store) = pair_set();
        let mse = evaluate(&Mse, &pairs, &store).unwrap();
        let ps = evaluate(&PsnrMetric, &pairs, &store).unwrap();
        assert_eq!(mse.accuracy, 1.0);
        assert_eq!(ps.accuracy, 1.0);
        assert!(mse.srcc.unwrap() > 0.0);
    }

    #[test]
    fn ties_are_skipped_in_evaluation() {
        let (mut pairs, store) = pair_set();
        pairs[0].y = 0.5;
        let rep = evaluate(&PsnrMetric, &pairs, &store).unwrap();
        assert_eq!((rep.pairs, rep.ties_skipped), (5, 1));
    }

    #[test]
    fn global_cosine_ignores_tokens() {
        let b: Arc<dyn Backbone> = Arc::new(crate::backbone::SyntheticEncoder::default());
        let m = LearnedMetric::global_cosine(b.clone());
        assert_eq!(m.params().fusion, metric::Fusion::GlobalOnly);
        let r = crate::synthetic::reference_image(64, 64, 1);
        let d = crate::synthetic::reference_image(64, 64, 2);
        let (fr, fd) = (b.extract_features(&r).unwrap(), b.extract_features(&d).unwrap());
        let want = metric::global_similarity(&fr.global, &fd.global).unwrap();
        assert_eq!(m.score(&r, &d).unwrap(), want);
    }
}
