//! Multi-scale SSIM on luma, with an 11-tap Gaussian window (sigma 1.5) and
//! valid-region filtering. Scales are halved by 2x2 averaging. Images too
//! small for five scales use the leading scale weights, renormalized.

use crate::image::Image;

const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn luma(img: &Image) -> Self {
        let v = img
            .as_raw()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();
        Self {
            w: img.width() as usize,
            h: img.height() as usize,
            v,
        }
    }

    fn halve(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| self.v[yy * self.w + xx];
                v.push((at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4.0);
            }
        }
        Self { w, h, v }
    }

    fn map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&other.v).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Separable valid-region filter.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (ow, oh) = (self.w + 1 - n, self.h + 1 - n);
        let mut tmp = vec![0.0; ow * self.h];
        for y in 0..self.h {
            for x in 0..ow {
                tmp[y * ow + x] = (0..n).map(|i| k[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut v = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                v[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
            }
        }
        Plane { w: ow, h: oh, v }
    }
}

fn window() -> Vec<f64> {
    let c = (WIN / 2) as f64;
    let k: Vec<f64> = (0..WIN).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_cs(a: &Plane, b: &Plane, k: &[f64]) -> (f64, f64) {
    let mu_a = a.filter(k);
    let mu_b = b.filter(k);
    let saa = a.map(a, |x, y| x * y).filter(k);
    let sbb = b.map(b, |x, y| x * y).filter(k);
    let sab = a.map(b, |x, y| x * y).filter(k);
    let n = mu_a.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = saa.v[i] - ma * ma;
        let vb = sbb.v[i] - mb * mb;
        let cov = sab.v[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        cs += c;
        ssim += c * (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
    }
    (ssim / n, cs / n)
}

/// Number of scales whose smaller side still fits the window.
pub fn scale_count(width: u32, height: u32) -> usize {
    let mut side = width.min(height) as usize;
    let mut n = 0;
    while n < WEIGHTS.len() && side >= WIN {
        n += 1;
        side /= 2;
    }
    n
}

/// MS-SSIM in [0, 1]; negative per-scale terms are clipped to zero.
pub fn ms_ssim(a: &Image, b: &Image) -> Option<f64> {
    if a.dimensions() != b.dimensions() {
        return None;
    }
    let scales = scale_count(a.width(), a.height());
    if scales == 0 {
        return None;
    }
    let total: f64 = WEIGHTS[..scales].iter().sum();
    let k = window();
    let (mut pa, mut pb) = (Plane::luma(a), Plane::luma(b));
    let mut out = 1.0;
    for (s, &w) in WEIGHTS[..scales].iter().enumerate() {
        let (ssim, cs) = ssim_cs(&pa, &pb, &k);
        let term = if s + 1 == scales { ssim } else { cs };
        out *= term.max(0.0).powf(w / total);
        if s + 1 < scales {
            pa = pa.halve();
            pb = pb.halve();
        }
    }
    Some(out)
}
