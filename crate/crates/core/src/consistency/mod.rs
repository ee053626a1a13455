//! Prediction-discrepancy scores between a model's outputs on a reference
//! and on a distorted image, per-model votes, and vote-ratio soft labels.

mod matching;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::image::Image;

pub use matching::{box_iou, mask_iou};

/// Detections below this confidence are dropped from both sides before matching.
pub const DETECTION_SCORE_THRESHOLD: f64 = 0.3;

/// Probability floor applied inside the KL logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConsistencyError {
    #[error("prediction lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("classification needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("non-finite logits")]
    NonFinite,
    #[error("reference prediction is empty; voter skipped for this pair")]
    EmptyReference,
    #[error("prediction dimensions differ: {0:?} vs {1:?}")]
    DimMismatch((u32, u32), (u32, u32)),
    #[error("invalid prediction: {0}")]
    InvalidPrediction(String),
    #[error("voter `{voter}` is a {task:?} model but returned a different payload")]
    TaskMismatch { voter: String, task: Task },
    #[error("no votes to aggregate")]
    EmptyVotes,
    #[error("voter `{0}` failed: {1}")]
    Voter(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Detection,
    InstanceSegmentation,
    SemanticSegmentation,
}

/// Binary instance mask in image coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// `[x1, y1, x2, y2]` with `x1 < x2`, `y1 < y2`.
    pub bbox: [f64; 4],
    pub class_id: u32,
    pub confidence: f64,
    pub mask: Option<Mask>,
}

impl Detection {
    pub fn new(bbox: [f64; 4], class_id: u32, confidence: f64) -> Self {
        Self {
            bbox,
            class_id,
            confidence,
            mask: None,
        }
    }

    fn validate(&self) -> Result<(), ConsistencyError> {
        let [x1, y1, x2, y2] = self.bbox;
        if !(x1 < x2 && y1 < y2) || self.bbox.iter().any(|v| !v.is_finite()) {
            return Err(ConsistencyError::InvalidPrediction(format!("degenerate box {:?}", self.bbox)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ConsistencyError::InvalidPrediction(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskPrediction {
    Classification { logits: Vec<f64> },
    Detections(Vec<Detection>),
    SemanticMap { width: u32, height: u32, classes: Vec<u32> },
}

/// A downstream model that votes on pairs. `predict` must be deterministic.
pub trait VoterModel: Send + Sync {
    fn id(&self) -> &str;
    fn task(&self) -> Task;
    fn predict(&self, img: &Image) -> Result<TaskPrediction, ConsistencyError>;
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// `KL(softmax(reference) || softmax(distorted))`, reference first.
pub fn classification_discrepancy(
    logits_ref: &[f64],
    logits_dist: &[f64],
) -> Result<f64, ConsistencyError> {
    if logits_ref.len() != logits_dist.len() {
        return Err(ConsistencyError::LengthMismatch(logits_ref.len(), logits_dist.len()));
    }
    if logits_ref.len() < 2 {
        return Err(ConsistencyError::TooFewClasses(logits_ref.len()));
    }
    if logits_ref.iter().chain(logits_dist).any(|v| !v.is_finite()) {
        return Err(ConsistencyError::NonFinite);
    }
    let floor = PROB_FLOOR.ln();
    let (lp, lq) = (log_softmax(logits_ref), log_softmax(logits_dist));
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| a.exp() * (a.max(floor) - b.max(floor)))
        .sum();
    Ok(kl.max(0.0))
}

fn detections(p: &TaskPrediction) -> Result<&[Detection], ConsistencyError> {
    match p {
        TaskPrediction::Detections(d) => Ok(d),
        _ => Err(ConsistencyError::InvalidPrediction("expected detections".into())),
    }
}

/// Confidence-weighted mean of `1 - IoU` over reference boxes, matched to
/// same-class distorted boxes; unmatched reference boxes cost 1.
pub fn detection_discrepancy(
    pred_ref: &TaskPrediction,
    pred_dist: &TaskPrediction,
) -> Result<f64, ConsistencyError> {
    let (r, d) = (detections(pred_ref)?, detections(pred_dist)?);
    matching::weighted_match_cost(r, d, |a, b| Ok(box_iou(&a.bbox, &b.bbox)))
}

/// Semantic maps: `1 - mIoU` over classes present in the reference map.
/// Instance predictions: the detection discrepancy with mask IoU.
pub fn segmentation_discrepancy(
    pred_ref: &TaskPrediction,
    pred_dist: &TaskPrediction,
) -> Result<f64, ConsistencyError> {
    match (pred_ref, pred_dist) {
        (
            TaskPrediction::SemanticMap {
                width: wa,
                height: ha,
                classes: a,
            },
            TaskPrediction::SemanticMap {
                width: wb,
                height: hb,
                classes: b,
            },
        ) => {
            if (wa, ha) != (wb, hb) || a.len() != b.len() || a.len() != (*wa as usize * *ha as usize)
            {
                return Err(ConsistencyError::DimMismatch((*wa, *ha), (*wb, *hb)));
            }
            semantic_discrepancy(a, b)
        }
        (TaskPrediction::Detections(r), TaskPrediction::Detections(d)) => {
            matching::weighted_match_cost(r, d, |a, b| match (&a.mask, &b.mask) {
                (Some(ma), Some(mb)) => mask_iou(ma, mb),
                _ => Err(ConsistencyError::InvalidPrediction(
                    "instance predictions need masks".into(),
                )),
            })
        }
        _ => Err(ConsistencyError::InvalidPrediction(
            "segmentation payloads must both be semantic maps or both instances".into(),
        )),
    }
}

fn semantic_discrepancy(a: &[u32], b: &[u32]) -> Result<f64, ConsistencyError> {
    if a.is_empty() {
        return Err(ConsistencyError::EmptyReference);
    }
    let mut classes: Vec<u32> = a.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let miou = classes
        .iter()
        .map(|&c| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&x, &y) in a.iter().zip(b) {
                let (ix, iy) = (x == c, y == c);
                inter += (ix && iy) as usize;
                union += (ix || iy) as usize;
            }
            inter as f64 / union as f64
        })
        .sum::<f64>()
        / classes.len() as f64;
    Ok(1.0 - miou)
}

/// Task-appropriate discrepancy for one voter.
pub fn discrepancy(
    task: Task,
    pred_ref: &TaskPrediction,
    pred_dist: &TaskPrediction,
) -> Result<f64, ConsistencyError> {
    match (task, pred_ref, pred_dist) {
        (
            Task::Classification,
            TaskPrediction::Classification { logits: a },
            TaskPrediction::Classification { logits: b },
        ) => classification_discrepancy(a, b),
        (Task::Detection, _, _) => detection_discrepancy(pred_ref, pred_dist),
        (Task::InstanceSegmentation | Task::SemanticSegmentation, _, _) => {
            segmentation_discrepancy(pred_ref, pred_dist)
        }
        (Task::Classification, _, _) => Err(ConsistencyError::InvalidPrediction(
            "classification voter returned a non-logit payload".into(),
        )),
    }
}

/// 1 when the first variant is strictly more consistent, else 0 (ties included).
#[inline]
pub fn cast_vote(d0: f64, d1: f64) -> u8 {
    u8::from(d0 < d1)
}

pub fn aggregate_votes(votes: &[u8]) -> Result<f64, ConsistencyError> {
    if votes.is_empty() {
        return Err(ConsistencyError::EmptyVotes);
    }
    Ok(votes.iter().map(|&v| v as f64).sum::<f64>() / votes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoterVote {
    pub voter: String,
    pub d0: f64,
    pub d1: f64,
    pub vote: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub per_voter: Vec<VoterVote>,
    pub soft_label: f64,
}

impl VoteResult {
    /// Votes from `(voter, d0, d1)` triples.
    pub fn from_discrepancies<S: Into<String>>(
        rows: impl IntoIterator<Item = (S, f64, f64)>,
    ) -> Result<Self, ConsistencyError> {
        let per_voter: Vec<VoterVote> = rows
            .into_iter()
            .map(|(voter, d0, d1)| VoterVote {
                voter: voter.into(),
                d0,
                d1,
                vote: cast_vote(d0, d1),
            })
            .collect();
        let votes: Vec<u8> = per_voter.iter().map(|v| v.vote).collect();
        let soft_label = aggregate_votes(&votes)?;
        Ok(Self {
            per_voter,
            soft_label,
        })
    }

    pub fn voters(&self) -> usize {
        self.per_voter.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // KL(p||q) by direct summation over the classes.
    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn kl_identical_is_zero() {
        let l = [0.3, -1.0, 2.0];
        assert_eq!(classification_discrepancy(&l, &l).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_class_hand_instance() {
        let r = [0.0, 3f64.ln()];
        let d = [0.0, 0.0];
        let expected = kl_oracle(&[0.25, 0.75], &[0.5, 0.5]);
        let got = classification_discrepancy(&r, &d).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} {expected}");
        let back = classification_discrepancy(&d, &r).unwrap();
        assert!((back - kl_oracle(&[0.5, 0.5], &[0.25, 0.75])).abs() < 1e-12);
        assert!((got - back).abs() > 1e-3);
    }

    #[test]
    fn kl_errors() {
        assert_eq!(
            classification_discrepancy(&[1.0, 2.0], &[1.0]),
            Err(ConsistencyError::LengthMismatch(2, 1))
        );
        assert_eq!(
            classification_discrepancy(&[1.0], &[1.0]),
            Err(ConsistencyError::TooFewClasses(1))
        );
        assert_eq!(
            classification_discrepancy(&[1.0, f64::NAN], &[1.0, 0.0]),
            Err(ConsistencyError::NonFinite)
        );
    }

    #[test]
    fn kl_survives_extreme_logits() {
        let v = classification_discrepancy(&[1000.0, -1000.0], &[-1000.0, 1000.0]).unwrap();
        assert!(v.is_finite() && v > 20.0);
    }

    fn dets(v: &[([f64; 4], u32, f64)]) -> TaskPrediction {
        TaskPrediction::Detections(v.iter().map(|&(b, c, w)| Detection::new(b, c, w)).collect())
    }

    #[test]
    fn detection_examples() {
        let r = dets(&[([0.0, 0.0, 10.0, 10.0], 1, 0.9)]);
        assert_eq!(detection_discrepancy(&r, &r).unwrap(), 0.0);
        let other_class = dets(&[([0.0, 0.0, 10.0, 10.0], 2, 0.9)]);
        assert_eq!(detection_discrepancy(&r, &other_class).unwrap(), 1.0);

        let r2 = dets(&[([0.0, 0.0, 10.0, 10.0], 1, 0.9), ([20.0, 20.0, 30.0, 30.0], 3, 0.1 + 0.3)]);
        let d2 = dets(&[([0.0, 0.0, 10.0, 10.0], 1, 0.8)]);
        // weights (0.9, 0.4) after filtering, costs (0, 1)
        let v = detection_discrepancy(&r2, &d2).unwrap();
        assert!((v - 0.4 / 1.3).abs() < 1e-12);
    }

    #[test]
    fn detection_weighted_mean_hand_instance() {
        // the 0.1-confidence box survives only when the threshold is ignored,
        // so exercise the weighted mean directly
        let r = [
            Detection::new([0.0, 0.0, 10.0, 10.0], 1, 0.9),
            Detection::new([20.0, 20.0, 30.0, 30.0], 2, 0.1),
        ];
        let d = [Detection::new([0.0, 0.0, 10.0, 10.0], 1, 0.9)];
        let v = matching::weighted_match_cost_with_threshold(&r, &d, 0.0, |a, b| {
            Ok(box_iou(&a.bbox, &b.bbox))
        })
        .unwrap();
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn detection_empty_reference_skips() {
        let empty = dets(&[]);
        let low = dets(&[([0.0, 0.0, 1.0, 1.0], 0, 0.1)]);
        let d = dets(&[([0.0, 0.0, 10.0, 10.0], 1, 0.9)]);
        assert_eq!(detection_discrepancy(&empty, &d), Err(ConsistencyError::EmptyReference));
        assert_eq!(detection_discrepancy(&low, &d), Err(ConsistencyError::EmptyReference));
    }

    #[test]
    fn detection_rejects_bad_boxes() {
        let bad = dets(&[([5.0, 0.0, 1.0, 1.0], 0, 0.9)]);
        assert!(matches!(
            detection_discrepancy(&bad, &bad),
            Err(ConsistencyError::InvalidPrediction(_))
        ));
    }

    fn semantic(w: u32, h: u32, classes: &[u32]) -> TaskPrediction {
        TaskPrediction::SemanticMap {
            width: w,
            height: h,
            classes: classes.to_vec(),
        }
    }

    #[test]
    fn semantic_examples() {
        let a = semantic(2, 2, &[0, 0, 1, 1]);
        assert_eq!(segmentation_discrepancy(&a, &a).unwrap(), 0.0);
        let disjoint = semantic(2, 2, &[2, 2, 3, 3]);
        assert_eq!(segmentation_discrepancy(&a, &disjoint).unwrap(), 1.0);

        // one pixel flipped 1 -> 0: class 0 I=2 U=3, class 1 I=1 U=2
        let flipped = semantic(2, 2, &[0, 0, 0, 1]);
        let expected = 1.0 - (2.0 / 3.0 + 1.0 / 2.0) / 2.0;
        let got = segmentation_discrepancy(&a, &flipped).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn semantic_dim_mismatch() {
        let a = semantic(2, 2, &[0, 0, 1, 1]);
        let b = semantic(4, 1, &[0, 0, 1, 1]);
        assert!(matches!(
            segmentation_discrepancy(&a, &b),
            Err(ConsistencyError::DimMismatch(..))
        ));
    }

    #[test]
    fn instance_masks() {
        let mask = |bits: &[bool]| Mask {
            width: 2,
            height: 2,
            bits: bits.to_vec(),
        };
        let det = |m: Mask| Detection {
            bbox: [0.0, 0.0, 2.0, 2.0],
            class_id: 0,
            confidence: 1.0,
            mask: Some(m),
        };
        let r = TaskPrediction::Detections(vec![det(mask(&[true, true, false, false]))]);
        let d = TaskPrediction::Detections(vec![det(mask(&[true, false, false, false]))]);
        let v = segmentation_discrepancy(&r, &d).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn votes() {
        assert_eq!(cast_vote(0.1, 0.2), 1);
        assert_eq!(cast_vote(0.2, 0.1), 0);
        assert_eq!(cast_vote(0.3, 0.3), 0);
        assert_eq!(aggregate_votes(&[1; 7]).unwrap(), 1.0);
        assert!((aggregate_votes(&[1, 1, 1, 0, 0, 0, 0]).unwrap() - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(aggregate_votes(&[1, 0]).unwrap(), 0.5);
        assert_eq!(aggregate_votes(&[]), Err(ConsistencyError::EmptyVotes));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_nonnegative(a in proptest::collection::vec(-20.0f64..20.0, 2..8), shift in -5.0f64..5.0) {
                let b: Vec<f64> = a.iter().rev().copied().collect();
                prop_assert!(classification_discrepancy(&a, &b).unwrap() >= 0.0);
                let shifted: Vec<f64> = a.iter().map(|v| v + shift).collect();
                prop_assert!(classification_discrepancy(&a, &shifted).unwrap() < 1e-9);
            }

            #[test]
            fn vote_antisymmetry(a in -1.0f64..1.0, b in -1.0f64..1.0) {
                let s = cast_vote(a, b) + cast_vote(b, a);
                prop_assert_eq!(s, if a == b { 0 } else { 1 });
            }

            #[test]
            fn ratio_times_k_is_integral(votes in proptest::collection::vec(0u8..=1, 1..12)) {
                let y = aggregate_votes(&votes).unwrap();
                let k = y * votes.len() as f64;
                prop_assert!((k - k.round()).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&y));
            }

            #[test]
            fn detection_bounded(
                boxes in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0, 0u32..3, 0.3f64..1.0), 1..5),
                other in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0, 0u32..3, 0.0f64..1.0), 0..5),
            ) {
                let mk = |v: &[(f64, f64, f64, f64, u32, f64)]| TaskPrediction::Detections(
                    v.iter().map(|&(x, y, w, h, c, s)| Detection::new([x, y, x + w, y + h], c, s)).collect());
                let d = detection_discrepancy(&mk(&boxes), &mk(&other)).unwrap();
                prop_assert!((0.0..=1.0).contains(&d));
            }
        }
    }
}
