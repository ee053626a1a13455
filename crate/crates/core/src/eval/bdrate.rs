//! Bjøntegaard delta rate between two rate–score curves.
//!
//! log10(rate) is fitted as a cubic in score on each curve; the mean gap of
//! the fits over the shared score range gives the rate ratio at equal score.

use nalgebra::{DMatrix, DVector};

use super::EvalError;

#[derive(Debug, Clone, PartialEq)]
pub struct RateTaskCurve {
    /// (bits per pixel, score), bpp strictly increasing.
    pub points: Vec<(f64, f64)>,
}

impl RateTaskCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, EvalError> {
        if points.len() < 4 {
            return Err(EvalError::Curve(format!("need at least 4 points, got {}", points.len())));
        }
        if points.iter().any(|&(r, s)| !(r.is_finite() && r > 0.0 && s.is_finite())) {
            return Err(EvalError::Curve("rates must be positive and finite, scores finite".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(EvalError::Curve("bpp must be strictly increasing".into()));
        }
        if points.windows(2).any(|w| w[1].1 < w[0].1) {
            log::warn!("score is not monotone in rate");
        }
        Ok(Self { points })
    }

    /// `bpp,score` rows. A first line that does not parse as numbers is taken
    /// as a header.
    pub fn parse_csv(text: &str) -> Result<Self, EvalError> {
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = match cols.as_slice() {
                [a, b] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
                _ => None,
            };
            match parsed {
                Some(p) => points.push(p),
                None if points.is_empty() && n == 0 => continue,
                None => return Err(EvalError::Curve(format!("line {}: expected `bpp,score`", n + 1))),
            }
        }
        Self::new(points)
    }
}

/// Least-squares cubic in the normalized variable u = (x - center) / scale.
struct Cubic {
    coef: [f64; 4],
    center: f64,
    scale: f64,
}

impl Cubic {
    fn fit(xs: &[f64], ys: &[f64], center: f64, scale: f64) -> Result<Self, EvalError> {
        let n = xs.len();
        let a = DMatrix::from_fn(n, 4, |i, j| ((xs[i] - center) / scale).powi(j as i32));
        let b = DVector::from_column_slice(ys);
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-10 * smax) {
            return Err(EvalError::DegenerateFit);
        }
        let sol = svd.solve(&b, 1e-12).map_err(|_| EvalError::DegenerateFit)?;
        let coef = [sol[0], sol[1], sol[2], sol[3]];
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(EvalError::DegenerateFit);
        }
        Ok(Self { coef, center, scale })
    }

    /// Integral over [lo, hi] in the original variable.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            let u = (x - self.center) / self.scale;
            self.coef
                .iter()
                .enumerate()
                .map(|(k, c)| c * u.powi(k as i32 + 1) / (k as f64 + 1.0))
                .sum::<f64>()
        };
        self.scale * (anti(hi) - anti(lo))
    }
}

/// Percent rate change of `test` against `anchor` at equal score; negative
/// means `test` needs fewer bits.
pub fn bd_rate(anchor: &RateTaskCurve, test: &RateTaskCurve) -> Result<f64, EvalError> {
    let split = |c: &RateTaskCurve| -> (Vec<f64>, Vec<f64>) {
        c.points.iter().map(|&(r, s)| (s, r.log10())).unzip()
    };
    let (sa, ra) = split(anchor);
    let (st, rt) = split(test);
    let range = |v: &[f64]| {
        (
            v.iter().copied().fold(f64::INFINITY, f64::min),
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (a_lo, a_hi) = range(&sa);
    let (t_lo, t_hi) = range(&st);
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if !(hi > lo) {
        return Err(EvalError::NoOverlap);
    }
    let all_lo = a_lo.min(t_lo);
    let all_hi = a_hi.max(t_hi);
    let center = 0.5 * (all_lo + all_hi);
    let scale = 0.5 * (all_hi - all_lo);
    let fa = Cubic::fit(&sa, &ra, center, scale)?;
    let ft = Cubic::fit(&st, &rt, center, scale)?;
    let avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(100.0 * (10f64.powf(avg) - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor() -> RateTaskCurve {
        RateTaskCurve::new(vec![(0.1, 0.55), (0.2, 0.68), (0.4, 0.78), (0.8, 0.85), (1.6, 0.89)]).unwrap()
    }

    fn scaled(c: &RateTaskCurve, f: f64) -> RateTaskCurve {
        RateTaskCurve::new(c.points.iter().map(|&(r, s)| (r * f, s)).collect()).unwrap()
    }

    #[test]
    fn identical_curves() {
        assert!(bd_rate(&anchor(), &anchor()).unwrap().abs() < 1e-9);
    }

    #[test]
    fn constant_rate_ratio() {
        // a constant log-rate offset of log10(f) gives exactly (f - 1) * 100
        assert!((bd_rate(&anchor(), &scaled(&anchor(), 2.0)).unwrap() - 100.0).abs() < 0.1);
        assert!((bd_rate(&anchor(), &scaled(&anchor(), 0.5)).unwrap() + 50.0).abs() < 0.1);
    }

    #[test]
    fn swap_is_reciprocal() {
        let a = anchor();
        let b = RateTaskCurve::new(vec![(0.08, 0.57), (0.15, 0.70), (0.33, 0.79), (0.7, 0.86), (1.3, 0.9)]).unwrap();
        let ab = bd_rate(&a, &b).unwrap();
        let ba = bd_rate(&b, &a).unwrap();
        assert!(((1.0 + ab / 100.0) * (1.0 + ba / 100.0) - 1.0).abs() < 0.01);
        assert!(ab < 0.0);
    }

    #[test]
    fn errors() {
        assert!(RateTaskCurve::new(vec![(0.1, 0.5), (0.2, 0.6), (0.3, 0.7)]).is_err());
        assert!(RateTaskCurve::new(vec![(0.1, 0.5), (0.1, 0.6), (0.3, 0.7), (0.4, 0.8)]).is_err());
        let far = RateTaskCurve::new(vec![(0.1, 10.0), (0.2, 11.0), (0.3, 12.0), (0.4, 13.0)]).unwrap();
        assert!(matches!(bd_rate(&anchor(), &far), Err(EvalError::NoOverlap)));
        let flat = RateTaskCurve::new(vec![(0.1, 0.5), (0.2, 0.5), (0.3, 0.9), (0.4, 0.9)]).unwrap();
        assert!(matches!(bd_rate(&flat, &anchor()), Err(EvalError::DegenerateFit)));
    }

    #[test]
    fn csv_parsing() {
        let c = RateTaskCurve::parse_csv("bpp,score\n0.1,0.55\n0.2,0.68\n0.4,0.78\n0.8,0.85\n").unwrap();
        assert_eq!(c.points.len(), 4);
        assert!(RateTaskCurve::parse_csv("0.1,0.55\nx,y\n").is_err());
    }
}
