//! Fits the metric head to soft pairwise labels.
//!
//! A pair's logit is the score difference of its two variants; the loss is
//! binary cross-entropy against the vote ratio. The backbone is frozen, so
//! per-layer similarities are computed once per pair and the optimizer only
//! ever touches the head parameters.

mod adam;

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::Adam;

use crate::backbone::{Backbone, BackboneError, FeatureBundle, FeatureCache};
use crate::dataset::{ImageSource, LabeledPair};
use crate::metric::{self, MetricError, MetricParams};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("too few records: {0} after filtering (need at least 2)")]
    TooFewRecords(usize),
    #[error("empty training split")]
    EmptyTrainSplit,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (params {params:?})")]
    NonFiniteLoss { epoch: usize, batch: usize, params: Vec<f64> },
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn default_lr() -> f64 {
    2e-4
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    5
}
fn default_split() -> f64 {
    0.8
}
fn default_seed() -> u64 {
    123
}
fn default_true() -> bool {
    true
}
fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Train share of the train/validation split.
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    /// Share of references held out as the test partition before any training.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
    #[serde(default = "default_true")]
    pub drop_ties: bool,
    #[serde(default)]
    pub hard_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            split_fraction: default_split(),
            test_fraction: default_test_fraction(),
            rng_seed: default_seed(),
            drop_ties: true,
            hard_labels: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction must be in (0, 1), got {}", self.split_fraction));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must be in [0, 1), got {}", self.test_fraction));
        }
        // zero is allowed: it turns training into a pure evaluation run
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        Ok(())
    }
}

#[inline]
pub fn pair_logit(s0: f64, s1: f64) -> f64 {
    s0 - s1
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Cross-entropy of sigmoid(z) against a soft label `y`.
pub fn pairwise_bce(z: f64, y: f64) -> f64 {
    // -log sigmoid(z) = softplus(-z) and -log(1 - sigmoid(z)) = softplus(z);
    // written this way swapping (z, y) for (-z, 1 - y) only reorders a sum
    y * softplus(-z) + (1.0 - y) * softplus(z)
}

/// d pairwise_bce / dz.
pub fn pairwise_bce_grad(z: f64, y: f64) -> f64 {
    metric::sigmoid(z) - y
}

fn is_tie(y: f64) -> bool {
    y == 0.5
}

/// Label used for training: rounded to 0 or 1 when `hard`, ties unchanged.
pub fn training_label(y: f64, hard: bool) -> f64 {
    match (hard, y.partial_cmp(&0.5)) {
        (true, Some(std::cmp::Ordering::Greater)) => 1.0,
        (true, Some(std::cmp::Ordering::Less)) => 0.0,
        _ => y,
    }
}

/// Splits by reference id so no reference appears on both sides. Returns
/// (rest, test).
pub fn holdout(pairs: &[LabeledPair], test_fraction: f64, seed: u64) -> (Vec<LabeledPair>, Vec<LabeledPair>) {
    let mut refs: Vec<&str> = pairs.iter().map(|p| p.reference_id.as_str()).collect();
    refs.sort_unstable();
    refs.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::dataset::derive_seed(seed, "test-partition"));
    refs.shuffle(&mut rng);
    let n_test = (test_fraction * refs.len() as f64).round() as usize;
    let test: std::collections::BTreeSet<&str> = refs[..n_test.min(refs.len())].iter().copied().collect();
    let (t, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().partition(|p| test.contains(p.reference_id.as_str()));
    (r, t)
}

/// Seeded train/validation split over pairs, after dropping ties when
/// configured. Both sides are non-empty.
pub fn split_dataset(pairs: &[LabeledPair], cfg: &TrainConfig) -> Result<(Vec<LabeledPair>, Vec<LabeledPair>), TrainError> {
    cfg.validate()?;
    let kept: Vec<&LabeledPair> = pairs.iter().filter(|p| !(cfg.drop_ties && is_tie(p.y))).collect();
    let n = kept.len();
    if n < 2 {
        return Err(TrainError::TooFewRecords(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::dataset::derive_seed(cfg.rng_seed, "train-val"));
    order.shuffle(&mut rng);
    let n_train = ((cfg.split_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| kept[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Similarities of both variants of a pair to their reference, in partition
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSimilarities {
    pub layers_0: Vec<f64>,
    pub global_0: f64,
    pub layers_1: Vec<f64>,
    pub global_1: f64,
    pub y: f64,
}

impl PairSimilarities {
    pub fn logit(&self, params: &MetricParams) -> f64 {
        let s0 = metric::score_from_similarities(&self.layers_0, self.global_0, params).s;
        let s1 = metric::score_from_similarities(&self.layers_1, self.global_1, params).s;
        pair_logit(s0, s1)
    }
}

fn extract(
    backbone: &dyn Backbone,
    cache: Option<&FeatureCache>,
    source: &dyn ImageSource,
    path: &str,
) -> Result<FeatureBundle, TrainError> {
    let img = source.load(path).map_err(|e| TrainError::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    Ok(match cache {
        Some(c) => c.get_or_compute(backbone, &img)?,
        None => backbone.extract_features(&img)?,
    })
}

/// Per-pair similarities. Pairs sharing a reference are processed together
/// so each image goes through the backbone once.
pub fn pair_similarities(
    pairs: &[LabeledPair],
    source: &dyn ImageSource,
    backbone: &dyn Backbone,
    cache: Option<&FeatureCache>,
    params: &MetricParams,
) -> Result<Vec<PairSimilarities>, TrainError> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(p.ref_path.as_str()).or_default().push(i);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let done: Vec<Vec<(usize, PairSimilarities)>> = groups
        .par_iter()
        .map(|(ref_path, idx)| {
            let reference = extract(backbone, cache, source, ref_path)?;
            let mut seen: HashMap<&str, (Vec<f64>, f64)> = HashMap::new();
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                let p = &pairs[i];
                for path in [&p.path_0, &p.path_1] {
                    if !seen.contains_key(path.as_str()) {
                        let b = extract(backbone, cache, source, path)?;
                        seen.insert(path, metric::similarities(&reference, &b, params)?);
                    }
                }
                let (l0, g0) = seen[p.path_0.as_str()].clone();
                let (l1, g1) = seen[p.path_1.as_str()].clone();
                out.push((
                    i,
                    PairSimilarities {
                        layers_0: l0,
                        global_0: g0,
                        layers_1: l1,
                        global_1: g1,
                        y: p.y,
                    },
                ));
            }
            Ok(out)
        })
        .collect::<Result<_, TrainError>>()?;
    let mut flat: Vec<(usize, PairSimilarities)> = done.into_iter().flatten().collect();
    flat.sort_by_key(|(i, _)| *i);
    Ok(flat.into_iter().map(|(_, s)| s).collect())
}

/// Mean loss over `batch` and its gradient with respect to
/// [`MetricParams::to_vec`].
pub fn batch_loss_and_grad(batch: &[&PairSimilarities], params: &MetricParams, hard_labels: bool) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.group_logits.len() + 1];
    let mut loss = 0.0;
    for p in batch {
        let (b0, g0) = metric::score_with_param_grad(&p.layers_0, p.global_0, params);
        let (b1, g1) = metric::score_with_param_grad(&p.layers_1, p.global_1, params);
        let z = pair_logit(b0.s, b1.s);
        let y = training_label(p.y, hard_labels);
        loss += pairwise_bce(z, y);
        let dz = pairwise_bce_grad(z, y);
        for k in 0..grad.len() {
            grad[k] += dz * (g0[k] - g1[k]);
        }
    }
    let n = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Mean loss; accuracy counts metric ties as wrong and skips label ties.
pub fn loss_and_accuracy(pairs: &[PairSimilarities], params: &MetricParams, hard_labels: bool) -> (f64, f64) {
    let refs: Vec<&PairSimilarities> = pairs.iter().collect();
    let (loss, _) = batch_loss_and_grad(&refs, params, hard_labels);
    let (mut hit, mut n) = (0usize, 0usize);
    for p in pairs.iter().filter(|p| !is_tie(p.y)) {
        let z = p.logit(params);
        n += 1;
        hit += usize::from(z != 0.0 && (z > 0.0) == (p.y > 0.5));
    }
    (loss, if n == 0 { f64::NAN } else { hit as f64 / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss with the parameters at the end of the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub backbone: String,
    pub backbone_checksum: String,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub initial_params: MetricParams,
    pub final_params: MetricParams,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn final_val_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.val_accuracy)
    }
}

/// Mask of trainable entries in [`MetricParams::to_vec`].
fn trainable(params: &MetricParams) -> Vec<bool> {
    let token_live = params.fusion != metric::Fusion::GlobalOnly && params.learn_layer_weights;
    let mut m = vec![token_live; params.group_logits.len()];
    m.push(params.fusion == metric::Fusion::Gated);
    m
}

/// Optimizes the head on precomputed similarities.
pub fn fit(
    train: &[PairSimilarities],
    val: &[PairSimilarities],
    init: &MetricParams,
    cfg: &TrainConfig,
) -> Result<(MetricParams, f64, Vec<EpochStats>), TrainError> {
    cfg.validate()?;
    init.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let mut params = init.clone();
    let mask = trainable(&params);
    let mut opt = Adam::new(cfg.learning_rate, mask.len());
    let mut rng = ChaCha8Rng::seed_from_u64(crate::dataset::derive_seed(cfg.rng_seed, "batches"));
    let (initial_loss, _) = loss_and_accuracy(train, &params, cfg.hard_labels);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PairSimilarities> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grad) = batch_loss_and_grad(&batch, &params, cfg.hard_labels);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    params: params.to_vec(),
                });
            }
            for (g, &live) in grad.iter_mut().zip(&mask) {
                if !live {
                    *g = 0.0;
                }
            }
            let mut theta = params.to_vec();
            opt.step(&mut theta, &grad, &mask);
            params.set_from_slice(&theta);
        }
        let (train_loss, _) = loss_and_accuracy(train, &params, cfg.hard_labels);
        let (val_loss, val_accuracy) = loss_and_accuracy(val, &params, cfg.hard_labels);
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} acc {val_accuracy:.4}");
        stats.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
    }
    Ok((params, initial_loss, stats))
}

/// Splits `pairs`, computes similarities and fits the head.
pub fn train(
    pairs: &[LabeledPair],
    source: &dyn ImageSource,
    backbone: &dyn Backbone,
    cache: Option<&FeatureCache>,
    init: &MetricParams,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let (train_set, val_set) = split_dataset(pairs, cfg)?;
    let train_sims = pair_similarities(&train_set, source, backbone, cache, init)?;
    let val_sims = pair_similarities(&val_set, source, backbone, cache, init)?;
    let (final_params, initial_train_loss, epochs) = fit(&train_sims, &val_sims, init, cfg)?;
    Ok(TrainReport {
        config: cfg.clone(),
        backbone: backbone.id().to_owned(),
        backbone_checksum: backbone.param_checksum(),
        train_pairs: train_set.len(),
        val_pairs: val_set.len(),
        initial_train_loss,
        epochs,
        initial_params: init.clone(),
        final_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lp(i: usize, y: f64) -> LabeledPair {
        LabeledPair {
            reference_id: format!("r{}", i / 3),
            ref_path: format!("r{}", i / 3),
            path_0: format!("a{i}"),
            path_1: format!("b{i}"),
            y,
        }
    }

    #[test]
    fn logit_examples() {
        assert_eq!(pair_logit(0.9, 0.9), 0.0);
        assert!((pair_logit(0.9, 0.7) - 0.2).abs() < 1e-15);
        assert_eq!(pair_logit(0.3, 0.8), -pair_logit(0.8, 0.3));
    }

    #[test]
    fn bce_examples() {
        assert!((pairwise_bce(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        let sat = pairwise_bce(20.0, 1.0);
        assert!(sat > 0.0 && sat <= 1e-8);
        assert!((sat - 2.061e-9).abs() < 1e-12);
        // direct formula with the logistic written out
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        let direct = -(0.7 * s.ln() + 0.3 * (1.0 - s).ln());
        assert!((pairwise_bce(1.0, 0.7) - direct).abs() < 1e-9);
        assert!(pairwise_bce(-800.0, 1.0).is_finite());
        assert!((pairwise_bce(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn split_examples() {
        let cfg = TrainConfig::default();
        let pairs: Vec<_> = (0..10).map(|i| lp(i, 1.0)).collect();
        let (a, b) = split_dataset(&pairs, &cfg).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert!(a.iter().all(|p| !b.contains(p)));
        assert_eq!(split_dataset(&pairs, &cfg).unwrap(), (a, b));

        let mut with_ties = pairs.clone();
        with_ties.extend((10..14).map(|i| lp(i, 0.5)));
        let (a, b) = split_dataset(&with_ties, &cfg).unwrap();
        assert!(a.iter().chain(&b).all(|p| p.y != 0.5));
        assert_eq!(a.len() + b.len(), 10);

        let ties: Vec<_> = (0..5).map(|i| lp(i, 0.5)).chain([lp(9, 1.0)]).collect();
        assert!(matches!(split_dataset(&ties, &cfg), Err(TrainError::TooFewRecords(1))));
    }

    #[test]
    fn holdout_keeps_references_whole() {
        let pairs: Vec<_> = (0..60).map(|i| lp(i, 0.0)).collect();
        let (rest, test) = holdout(&pairs, 0.2, 123);
        assert_eq!(rest.len() + test.len(), 60);
        assert_eq!(test.len(), 12);
        assert!(rest.iter().all(|p| test.iter().all(|q| q.reference_id != p.reference_id)));
        assert_eq!(holdout(&pairs, 0.2, 123), (rest, test));
    }

    #[test]
    fn config_checks() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.split_fraction = 1.0;
        assert!(c.validate().is_err());
        c.split_fraction = 0.8;
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
        c.learning_rate = 0.0;
        c.validate().unwrap();
    }

    fn toy_sims(n: usize, seed: u64) -> Vec<PairSimilarities> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let l0: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..1.0)).collect();
                let l1: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..1.0)).collect();
                // late layers decide the label
                let late = |l: &[f64]| l[8..].iter().sum::<f64>();
                let y = if late(&l0) > late(&l1) { 1.0 } else { 0.0 };
                PairSimilarities {
                    layers_0: l0,
                    global_0: rng.random_range(0.5..1.0),
                    layers_1: l1,
                    global_1: rng.random_range(0.5..1.0),
                    y,
                }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let sims = toy_sims(50, 1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let init = MetricParams::new(12);
        let (p, _, _) = fit(&sims[..40], &sims[40..], &init, &cfg).unwrap();
        for (a, b) in p.to_vec().iter().zip(init.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn learns_late_layer_preference() {
        let sims = toy_sims(400, 2);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 20,
            ..Default::default()
        };
        let (p, init_loss, stats) = fit(&sims[..320], &sims[320..], &MetricParams::new(12), &cfg).unwrap();
        assert_eq!(stats.len(), 20);
        assert!(stats.last().unwrap().train_loss < init_loss);
        assert!(p.group_logits[2] > p.group_logits[0]);
    }

    #[test]
    fn frozen_entries_do_not_move() {
        let sims = toy_sims(100, 3);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let uni = metric::Ablation::UniformWeights.params(12);
        let (p, _, _) = fit(&sims[..80], &sims[80..], &uni, &cfg).unwrap();
        assert_eq!(p.group_logits, vec![0.0; 3]);
        assert_ne!(p.gate_logit, 0.0);
        let glob = metric::Ablation::GlobalOnly.params(12);
        let (p, _, _) = fit(&sims[..80], &sims[80..], &glob, &cfg).unwrap();
        assert_eq!(p, glob);
    }

    #[test]
    fn batch_grad_matches_central_differences() {
        let sims = toy_sims(64, 4);
        let batch: Vec<_> = sims.iter().collect();
        let mut p = MetricParams::new(12);
        p.group_logits = vec![0.3, -0.2, 0.5];
        p.gate_logit = -0.4;
        let (_, grad) = batch_loss_and_grad(&batch, &p, false);
        let h = 1e-4;
        for k in 0..4 {
            let mut v = p.to_vec();
            v[k] += h;
            let mut up = p.clone();
            up.set_from_slice(&v);
            v[k] -= 2.0 * h;
            let mut dn = p.clone();
            dn.set_from_slice(&v);
            let fd = (batch_loss_and_grad(&batch, &up, false).0 - batch_loss_and_grad(&batch, &dn, false).0) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-3 * fd.abs(), "k={k}: {fd} vs {}", grad[k]);
        }
    }

    proptest! {
        #[test]
        fn label_flip_equivariance(z in -60.0f64..60.0, k in 0u32..=64) {
            let y = k as f64 / 64.0;
            prop_assert_eq!(pairwise_bce(z, y), pairwise_bce(-z, 1.0 - y));
        }

        #[test]
        fn bce_nonnegative(z in -1e3f64..1e3, y in 0.0f64..=1.0) {
            prop_assert!(pairwise_bce(z, y) >= 0.0);
        }
    }
}
