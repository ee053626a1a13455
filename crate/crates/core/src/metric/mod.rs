//! Layer-weighted token similarity blended with global embedding similarity.
//!
//! Each layer contributes the mean cosine between matching patch tokens. Layers
//! are grouped into contiguous stages whose weights come from a softmax over
//! one logit per stage, spread evenly over the stage's layers. A sigmoid gate
//! blends the resulting token score with the cosine of the global embeddings.

mod checkpoint;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::backbone::{BundleGrad, FeatureBundle, GlobalEmbedding, LayerFeatures};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid params: {0}")]
    InvalidParams(String),
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How the two branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Sigmoid-gated blend of both branches.
    Gated,
    TokenOnly,
    GlobalOnly,
}

/// The trainable head. Layer indices in `partition` refer to
/// [`LayerFeatures::layer_index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub partition: Vec<Vec<usize>>,
    pub group_logits: Vec<f64>,
    pub gate_logit: f64,
    pub fusion: Fusion,
    /// When false the group logits stay fixed during training.
    pub learn_layer_weights: bool,
}

/// Table of head variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    GlobalOnly,
    UniformWeights,
    PerLayerWeights,
    TokenOnly,
    /// Same head as `Full`; the trainer rounds labels.
    HardLabels,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::GlobalOnly,
        Ablation::UniformWeights,
        Ablation::PerLayerWeights,
        Ablation::TokenOnly,
        Ablation::HardLabels,
    ];

    pub fn params(self, layers: usize) -> MetricParams {
        let mut p = MetricParams::new(layers);
        match self {
            Ablation::Full | Ablation::HardLabels => {}
            Ablation::GlobalOnly => p.fusion = Fusion::GlobalOnly,
            Ablation::TokenOnly => p.fusion = Fusion::TokenOnly,
            Ablation::UniformWeights => p.learn_layer_weights = false,
            Ablation::PerLayerWeights => {
                p.partition = (1..=layers).map(|l| vec![l]).collect();
                p.group_logits = vec![0.0; layers];
            }
        }
        p
    }

    pub fn hard_labels(self) -> bool {
        self == Ablation::HardLabels
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::GlobalOnly => "global_only",
            Ablation::UniformWeights => "uniform_weights",
            Ablation::PerLayerWeights => "per_layer_weights",
            Ablation::TokenOnly => "token_only",
            Ablation::HardLabels => "hard_labels",
        }
    }
}

impl MetricParams {
    /// Three equal contiguous stages over layers `1..=layers`, all logits zero.
    pub fn new(layers: usize) -> Self {
        Self::with_partition(default_partition(layers))
    }

    pub fn with_partition(partition: Vec<Vec<usize>>) -> Self {
        Self {
            group_logits: vec![0.0; partition.len()],
            partition,
            gate_logit: 0.0,
            fusion: Fusion::Gated,
            learn_layer_weights: true,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.partition.iter().map(Vec::len).sum()
    }

    /// Layer indices in partition order.
    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.partition.iter().flatten().copied()
    }

    /// Groups must be non-empty runs of consecutive indices that follow one
    /// another and cover `first..=last` once.
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.partition.is_empty() || self.partition.iter().any(Vec::is_empty) {
            return Err(MetricError::InvalidPartition("empty group".into()));
        }
        let flat: Vec<usize> = self.layers().collect();
        if flat.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(MetricError::InvalidPartition(format!(
                "groups must be contiguous and ordered, got {:?}",
                self.partition
            )));
        }
        if self.group_logits.len() != self.partition.len() {
            return Err(MetricError::InvalidParams(format!(
                "{} logits for {} groups",
                self.group_logits.len(),
                self.partition.len()
            )));
        }
        if self.group_logits.iter().chain([&self.gate_logit]).any(|v| !v.is_finite()) {
            return Err(MetricError::InvalidParams("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Softmax over group logits.
    pub fn group_weights(&self) -> Vec<f64> {
        let m = self.group_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.group_logits.iter().map(|w| (w - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Per-layer weights in partition order.
    pub fn layer_weights(&self) -> Vec<f64> {
        self.partition
            .iter()
            .zip(self.group_weights())
            .flat_map(|(g, pi)| std::iter::repeat_n(pi / g.len() as f64, g.len()))
            .collect()
    }

    /// Weight of the token branch in the final score.
    pub fn eta(&self) -> f64 {
        match self.fusion {
            Fusion::Gated => sigmoid(self.gate_logit),
            Fusion::TokenOnly => 1.0,
            Fusion::GlobalOnly => 0.0,
        }
    }

    /// Parameters as a flat vector: group logits then the gate.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.group_logits.clone();
        v.push(self.gate_logit);
        v
    }

    pub fn set_from_slice(&mut self, v: &[f64]) {
        let g = self.group_logits.len();
        self.group_logits.copy_from_slice(&v[..g]);
        self.gate_logit = v[g];
    }
}

/// `layers` split into three contiguous stages, earlier stages taking the
/// remainder.
pub fn default_partition(layers: usize) -> Vec<Vec<usize>> {
    let g = 3.min(layers.max(1));
    let (base, extra) = (layers / g, layers % g);
    let mut next = 1;
    (0..g)
        .map(|k| {
            let n = base + usize::from(k < extra);
            let grp = (next..next + n).collect();
            next += n;
            grp
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    /// Layer similarity in partition order.
    pub per_layer: Vec<f64>,
    pub layer_weights: Vec<f64>,
    pub s_token: f64,
    pub s_global: f64,
    /// Effective token-branch weight: the gate for the gated head, 1 for
    /// token-only and 0 for global-only.
    pub eta: f64,
    pub s: f64,
}

fn unit_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        norms.push(n);
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (out, norms)
}

fn check_layer_shapes(a: &LayerFeatures, b: &LayerFeatures) -> Result<(), MetricError> {
    if a.tokens.dim() != b.tokens.dim() {
        return Err(MetricError::ShapeMismatch(format!(
            "layer {}: {:?} vs {:?}",
            a.layer_index,
            a.tokens.dim(),
            b.tokens.dim()
        )));
    }
    if a.num_tokens() < 2 {
        return Err(MetricError::ShapeMismatch("need a class token and at least one patch token".into()));
    }
    Ok(())
}

/// Mean cosine between matching patch tokens; the class token (row 0) is
/// ignored. A zero row has cosine 0 with anything.
pub fn layer_similarity(reference: &LayerFeatures, distorted: &LayerFeatures) -> Result<f64, MetricError> {
    check_layer_shapes(reference, distorted)?;
    let (a, _) = unit_rows(&reference.tokens);
    let (b, _) = unit_rows(&distorted.tokens);
    let p = a.nrows() - 1;
    let sum: f64 = (1..a.nrows()).map(|t| a.row(t).dot(&b.row(t))).sum();
    Ok((sum / p as f64).clamp(-1.0, 1.0))
}

/// Gradient of [`layer_similarity`] with respect to the distorted tokens.
fn layer_similarity_grad(reference: &LayerFeatures, distorted: &LayerFeatures) -> Array2<f64> {
    let (a, _) = unit_rows(&reference.tokens);
    let (b, norms) = unit_rows(&distorted.tokens);
    let p = (a.nrows() - 1) as f64;
    let mut g = Array2::zeros(b.dim());
    for t in 1..a.nrows() {
        if norms[t] == 0.0 {
            continue;
        }
        let cos = a.row(t).dot(&b.row(t));
        let row = (&a.row(t) - &(&b.row(t) * cos)) / (norms[t] * p);
        g.row_mut(t).assign(&row);
    }
    g
}

pub fn global_similarity(reference: &GlobalEmbedding, distorted: &GlobalEmbedding) -> Result<f64, MetricError> {
    if reference.dim() != distorted.dim() {
        return Err(MetricError::ShapeMismatch(format!(
            "global embeddings {} vs {}",
            reference.dim(),
            distorted.dim()
        )));
    }
    let dot: f64 = reference.as_slice().iter().zip(distorted.as_slice()).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

fn layers_in_order<'a>(
    bundle: &'a FeatureBundle,
    params: &MetricParams,
) -> Result<Vec<&'a LayerFeatures>, MetricError> {
    params
        .layers()
        .map(|idx| {
            bundle
                .layers
                .iter()
                .find(|l| l.layer_index == idx)
                .ok_or_else(|| MetricError::ShapeMismatch(format!("bundle has no layer {idx}")))
        })
        .collect()
}

/// Per-layer similarities in partition order and the global similarity.
pub fn similarities(
    reference: &FeatureBundle,
    distorted: &FeatureBundle,
    params: &MetricParams,
) -> Result<(Vec<f64>, f64), MetricError> {
    params.validate()?;
    let ra = layers_in_order(reference, params)?;
    let da = layers_in_order(distorted, params)?;
    let per_layer = ra
        .iter()
        .zip(&da)
        .map(|(a, b)| layer_similarity(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((per_layer, global_similarity(&reference.global, &distorted.global)?))
}

pub fn token_score(reference: &FeatureBundle, distorted: &FeatureBundle, params: &MetricParams) -> Result<f64, MetricError> {
    let (s, _) = similarities(reference, distorted, params)?;
    Ok(weighted_sum(&params.layer_weights(), &s))
}

fn weighted_sum(w: &[f64], s: &[f64]) -> f64 {
    w.iter().zip(s).map(|(a, b)| a * b).sum()
}

/// Score from precomputed similarities (partition order).
pub fn score_from_similarities(per_layer: &[f64], s_global: f64, params: &MetricParams) -> ScoreBreakdown {
    let layer_weights = params.layer_weights();
    let s_token = weighted_sum(&layer_weights, per_layer);
    let eta = params.eta();
    let s = match params.fusion {
        Fusion::Gated => eta * s_token + (1.0 - eta) * s_global,
        Fusion::TokenOnly => s_token,
        Fusion::GlobalOnly => s_global,
    };
    ScoreBreakdown {
        per_layer: per_layer.to_vec(),
        layer_weights,
        s_token,
        s_global,
        eta,
        s,
    }
}

/// Score and its gradient with respect to [`MetricParams::to_vec`]. Frozen
/// parameters get a zero gradient.
pub fn score_with_param_grad(per_layer: &[f64], s_global: f64, params: &MetricParams) -> (ScoreBreakdown, Vec<f64>) {
    let b = score_from_similarities(per_layer, s_global, params);
    let mut grad = vec![0.0; params.group_logits.len() + 1];
    let token_coef = match params.fusion {
        Fusion::Gated => b.eta,
        Fusion::TokenOnly => 1.0,
        Fusion::GlobalOnly => 0.0,
    };
    if params.learn_layer_weights && token_coef != 0.0 {
        let pi = params.group_weights();
        let mut offset = 0;
        for (j, g) in params.partition.iter().enumerate() {
            let mean = per_layer[offset..offset + g.len()].iter().sum::<f64>() / g.len() as f64;
            grad[j] = token_coef * pi[j] * (mean - b.s_token);
            offset += g.len();
        }
    }
    if params.fusion == Fusion::Gated {
        grad[params.group_logits.len()] = b.eta * (1.0 - b.eta) * (b.s_token - b.s_global);
    }
    (b, grad)
}

pub fn score(reference: &FeatureBundle, distorted: &FeatureBundle, params: &MetricParams) -> Result<ScoreBreakdown, MetricError> {
    let (s, g) = similarities(reference, distorted, params)?;
    Ok(score_from_similarities(&s, g, params))
}

/// Score and its gradient with respect to the distorted bundle. Layers absent
/// from the partition get zero gradient.
pub fn score_with_feature_grad(
    reference: &FeatureBundle,
    distorted: &FeatureBundle,
    params: &MetricParams,
) -> Result<(ScoreBreakdown, BundleGrad), MetricError> {
    let b = score(reference, distorted, params)?;
    let mut layers: Vec<Array2<f64>> = distorted.layers.iter().map(|l| Array2::zeros(l.tokens.dim())).collect();
    for (k, idx) in params.layers().enumerate() {
        let coef = b.eta * b.layer_weights[k];
        let pos = distorted
            .layers
            .iter()
            .position(|l| l.layer_index == idx)
            .expect("checked by score");
        let r = reference.layers.iter().find(|l| l.layer_index == idx).expect("checked by score");
        layers[pos] = layer_similarity_grad(r, &distorted.layers[pos]) * coef;
    }
    let global = reference.global.as_slice().iter().map(|v| v * (1.0 - b.eta)).collect();
    Ok((b, BundleGrad { layers, global }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn layer(idx: usize, t: Array2<f64>) -> LayerFeatures {
        LayerFeatures {
            layer_index: idx,
            tokens: t,
        }
    }

    #[test]
    fn layer_similarity_examples() {
        let a = layer(1, array![[5.0, 5.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!((layer_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let b = layer(1, array![[-3.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        // cosines 1 and 0 over the two patch tokens
        assert!((layer_similarity(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        let orth = layer(1, array![[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]]);
        assert_eq!(layer_similarity(&a, &orth).unwrap(), 0.0);
        let small = layer(1, array![[1.0, 0.0], [0.0, 2.0]]);
        assert!(matches!(layer_similarity(&a, &small), Err(MetricError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_rows_give_zero_cosine() {
        let a = layer(1, array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]);
        let b = layer(1, array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(layer_similarity(&a, &b).unwrap(), 0.5);
        assert_eq!(layer_similarity(&b, &a).unwrap(), 0.5);
    }

    #[test]
    fn layer_weight_examples() {
        let mut p = MetricParams::new(12);
        assert_eq!(p.partition, vec![(1..=4).collect::<Vec<_>>(), (5..=8).collect(), (9..=12).collect()]);
        assert!(p.layer_weights().iter().all(|&a| (a - 1.0 / 12.0).abs() < 1e-15));
        p.group_logits = vec![2f64.ln(), 0.0, 0.0];
        let pi = p.group_weights();
        for (got, want) in pi.iter().zip([0.5, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-12);
        }
        let a = p.layer_weights();
        assert!(a[..4].iter().all(|&v| (v - 0.125).abs() < 1e-9));
        assert!(a[4..].iter().all(|&v| (v - 0.0625).abs() < 1e-9));
    }

    #[test]
    fn partition_validation() {
        let mut p = MetricParams::new(12);
        p.validate().unwrap();
        p.partition = vec![vec![1, 2], vec![4, 3]];
        p.group_logits = vec![0.0; 2];
        assert!(p.validate().is_err());
        p.partition = vec![vec![1, 2], vec![]];
        assert!(p.validate().is_err());
        let q = MetricParams::with_partition(vec![vec![1], vec![2, 3]]);
        q.validate().unwrap();
        assert_eq!(default_partition(7), vec![vec![1, 2, 3], vec![4, 5], vec![6, 7]]);
    }

    #[test]
    fn blend_examples() {
        let mut p = MetricParams::new(12);
        let b = score_from_similarities(&[0.8; 12], 0.6, &p);
        assert!((b.s - 0.7).abs() < 1e-12);
        p.gate_logit = 20.0;
        let b = score_from_similarities(&[0.8; 12], 0.6, &p);
        assert!((b.s - 0.8).abs() < 1e-6);
        let half: Vec<f64> = (0..12).map(|i| if i < 6 { 1.0 } else { 0.0 }).collect();
        let b = score_from_similarities(&half, 0.0, &MetricParams::new(12));
        assert!((b.s_token - 0.5).abs() < 1e-12);
        let g = Ablation::GlobalOnly.params(12);
        assert_eq!(score_from_similarities(&[0.9; 12], 0.3, &g).s, 0.3);
        let t = Ablation::TokenOnly.params(12);
        assert_eq!(score_from_similarities(&[0.9; 12], 0.3, &t).s, weighted_sum(&t.layer_weights(), &[0.9; 12]));
    }

    #[test]
    fn ablation_presets_are_distinct() {
        let all: Vec<_> = Ablation::ALL.iter().map(|a| a.params(12)).collect();
        for a in &all {
            a.validate().unwrap();
        }
        assert_eq!(all[3].partition.len(), 12);
        assert_eq!(all[0], all[5]);
        assert!(Ablation::HardLabels.hard_labels());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!(sigmoid(30.0) < 1.0 && sigmoid(-30.0) > 0.0);
    }

    fn sims_strategy() -> impl Strategy<Value = (Vec<f64>, f64, Vec<f64>, f64)> {
        (
            prop::collection::vec(-1.0f64..1.0, 12),
            -1.0f64..1.0,
            prop::collection::vec(-4.0f64..4.0, 3),
            -4.0f64..4.0,
        )
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(w in prop::collection::vec(-50.0f64..50.0, 3)) {
            let mut p = MetricParams::new(12);
            p.group_logits = w;
            prop_assert!((p.layer_weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn gate_in_open_interval(g in -30.0f64..30.0) {
            let mut p = MetricParams::new(12);
            p.gate_logit = g;
            prop_assert!(p.eta() > 0.0 && p.eta() < 1.0);
        }

        #[test]
        fn param_grad_matches_central_differences((s, sg, w, gate) in sims_strategy()) {
            let mut p = MetricParams::new(12);
            p.group_logits = w;
            p.gate_logit = gate;
            let (_, grad) = score_with_param_grad(&s, sg, &p);
            let h = 1e-4;
            let base = p.to_vec();
            for k in 0..base.len() {
                let mut up = p.clone();
                let mut v = base.clone();
                v[k] += h;
                up.set_from_slice(&v);
                let mut dn = p.clone();
                v[k] -= 2.0 * h;
                dn.set_from_slice(&v);
                let fd = (score_from_similarities(&s, sg, &up).s - score_from_similarities(&s, sg, &dn).s) / (2.0 * h);
                let err = (fd - grad[k]).abs();
                prop_assert!(err <= 1e-3 * fd.abs().max(grad[k].abs()) || err < 1e-10, "k={} fd={} an={}", k, fd, grad[k]);
            }
        }
    }
}
