//! `1 - S` as the distortion term of a rate–distortion objective.

use super::EvalError;
use crate::backbone::DifferentiableBackbone;
use crate::image::PixelTensor;
use crate::metric::{self, MetricParams};

/// Trade-off weights used to trace a rate–distortion curve.
pub const RD_LAMBDAS: [f64; 5] = [0.6, 2.0, 6.0, 10.0, 18.0];

#[inline]
pub fn rd_distortion(score: f64) -> f64 {
    1.0 - score
}

/// R + lambda * D.
#[inline]
pub fn rd_loss(rate: f64, lambda: f64, distortion: f64) -> f64 {
    rate + lambda * distortion
}

/// Distortion of `distorted` against `reference` (raw 0..=255 pixels) and
/// its gradient with respect to the distorted pixels.
pub fn rd_distortion_with_grad(
    backbone: &dyn DifferentiableBackbone,
    params: &MetricParams,
    reference: &PixelTensor,
    distorted: &PixelTensor,
) -> Result<(f64, PixelTensor), EvalError> {
    let (ref_bundle, _) = backbone.extract_with_pullback(reference)?;
    let (dist_bundle, pullback) = backbone.extract_with_pullback(distorted)?;
    let (b, grad) = metric::score_with_feature_grad(&ref_bundle, &dist_bundle, params)?;
    let mut g = pullback(&grad);
    g.data.iter_mut().for_each(|v| *v = -*v);
    Ok((rd_distortion(b.s), g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, SyntheticEncoder};
    use crate::synthetic::reference_image;

    #[test]
    fn arithmetic() {
        assert_eq!(rd_distortion(1.0), 0.0);
        assert!((rd_loss(0.5, 2.0, rd_distortion(0.7)) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        let enc = SyntheticEncoder::default();
        let mut params = MetricParams::new(12);
        params.group_logits = vec![0.4, -0.3, 0.2];
        params.gate_logit = 0.3;
        let r = PixelTensor::from_image(&reference_image(64, 64, 11));
        let mut d = r.clone();
        for (i, v) in d.data.iter_mut().enumerate() {
            *v += ((i * 7919) % 23) as f64 - 11.0;
        }
        let (_, g) = rd_distortion_with_grad(&enc, &params, &r, &d).unwrap();
        let h = 1e-3;
        for &(c, y, x) in &[(0, 3, 4), (1, 30, 31), (2, 63, 0), (0, 17, 50), (1, 44, 9)] {
            let i = d.index(c, y, x);
            let mut up = d.clone();
            up.data[i] += h;
            let mut dn = d.clone();
            dn.data[i] -= h;
            let f = |t: &PixelTensor| rd_distortion_with_grad(&enc, &params, &r, t).unwrap().0;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-2 * fd.abs(), "{fd} vs {}", g.data[i]);
        }
        assert!(enc.as_differentiable().is_some());
    }
}
