use super::{ConsistencyError, Detection, Mask, DETECTION_SCORE_THRESHOLD};

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, ConsistencyError> {
    if (a.width, a.height) != (b.width, b.height) || a.bits.len() != b.bits.len() {
        return Err(ConsistencyError::DimMismatch((a.width, a.height), (b.width, b.height)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

pub(crate) fn weighted_match_cost(
    reference: &[Detection],
    distorted: &[Detection],
    iou: impl Fn(&Detection, &Detection) -> Result<f64, ConsistencyError>,
) -> Result<f64, ConsistencyError> {
    weighted_match_cost_with_threshold(reference, distorted, DETECTION_SCORE_THRESHOLD, iou)
}

/// Greedy one-to-one label-aware matching in descending reference confidence.
/// A reference box takes the unused same-class distorted box of highest
/// positive IoU; without one its cost is 1.
pub(crate) fn weighted_match_cost_with_threshold(
    reference: &[Detection],
    distorted: &[Detection],
    threshold: f64,
    iou: impl Fn(&Detection, &Detection) -> Result<f64, ConsistencyError>,
) -> Result<f64, ConsistencyError> {
    for d in reference.iter().chain(distorted) {
        d.validate()?;
    }
    let r: Vec<&Detection> = reference.iter().filter(|d| d.confidence >= threshold).collect();
    let d: Vec<&Detection> = distorted.iter().filter(|d| d.confidence >= threshold).collect();
    let total_weight: f64 = r.iter().map(|d| d.confidence).sum();
    if r.is_empty() || total_weight <= 0.0 {
        return Err(ConsistencyError::EmptyReference);
    }

    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r[b].confidence.total_cmp(&r[a].confidence));
    let mut used = vec![false; d.len()];
    let mut weighted = 0.0;
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, cand) in d.iter().enumerate() {
            if used[j] || cand.class_id != r[i].class_id {
                continue;
            }
            let v = iou(r[i], cand)?;
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        let cost = match best {
            Some((j, v)) => {
                used[j] = true;
                1.0 - v
            }
            None => 1.0,
        };
        weighted += r[i].confidence * cost;
    }
    Ok((weighted / total_weight).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert!((box_iou(&a, &[1.0, 0.0, 3.0, 2.0]) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn one_to_one_prefers_confident_reference() {
        // both reference boxes want the same distorted box; the more confident
        // one takes it and the other pays full cost
        let r = [
            Detection::new([0.0, 0.0, 10.0, 10.0], 0, 0.5),
            Detection::new([0.0, 0.0, 10.0, 10.0], 0, 1.0),
        ];
        let d = [Detection::new([0.0, 0.0, 10.0, 10.0], 0, 1.0)];
        let v = weighted_match_cost(&r, &d, |a, b| Ok(box_iou(&a.bbox, &b.bbox))).unwrap();
        assert!((v - 0.5 / 1.5).abs() < 1e-12);
    }
}
