//! Square resize plus per-channel normalization.
//!
//! The resize is bilinear with half-pixel centers and no antialiasing. It is
//! linear in the pixels, so the backward pass is the transposed map.

use crate::image::{Image, PixelTensor};

pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    /// Side of the square input.
    pub size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl InputSpec {
    pub fn clip(size: usize) -> Self {
        Self {
            size,
            mean: CLIP_MEAN,
            std: CLIP_STD,
        }
    }
}

/// For each output index, the two source indices and the weight of the second.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn resize(x: &PixelTensor, size: usize) -> PixelTensor {
    if x.width == size && x.height == size {
        return x.clone();
    }
    let rows = taps(x.height, size);
    let cols = taps(x.width, size);
    let mut out = PixelTensor::zeros(size, size);
    for c in 0..3 {
        for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
                let top = x.get(c, y0, x0) * (1.0 - tx) + x.get(c, y0, x1) * tx;
                let bot = x.get(c, y1, x0) * (1.0 - tx) + x.get(c, y1, x1) * tx;
                let i = out.index(c, oy, ox);
                out.data[i] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn resize_transpose(g: &PixelTensor, width: usize, height: usize) -> PixelTensor {
    if g.width == width && g.height == height {
        return g.clone();
    }
    let rows = taps(height, g.height);
    let cols = taps(width, g.width);
    let mut out = PixelTensor::zeros(width, height);
    for c in 0..3 {
        for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
                let v = g.get(c, oy, ox);
                for (yy, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                    for (xx, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                        let i = out.index(c, yy, xx);
                        out.data[i] += v * wy * wx;
                    }
                }
            }
        }
    }
    out
}

/// Resizes raw 0..=255 pixels to the input size (aspect ratio is not kept)
/// and normalizes each channel.
pub fn preprocess_tensor(x: &PixelTensor, spec: &InputSpec) -> PixelTensor {
    let mut out = resize(x, spec.size);
    let plane = spec.size * spec.size;
    for c in 0..3 {
        for v in &mut out.data[c * plane..(c + 1) * plane] {
            *v = (*v / 255.0 - spec.mean[c]) / spec.std[c];
        }
    }
    out
}

pub fn preprocess(img: &Image, spec: &InputSpec) -> PixelTensor {
    preprocess_tensor(&PixelTensor::from_image(img), spec)
}

/// Pulls a gradient on the preprocessed tensor back to the raw pixels of a
/// `width`x`height` input.
pub fn preprocess_backward(grad: &PixelTensor, width: usize, height: usize, spec: &InputSpec) -> PixelTensor {
    let mut g = grad.clone();
    let plane = g.width * g.height;
    for c in 0..3 {
        for v in &mut g.data[c * plane..(c + 1) * plane] {
            *v /= 255.0 * spec.std[c];
        }
    }
    resize_transpose(&g, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> PixelTensor {
        let mut t = PixelTensor::zeros(w, h);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64;
        }
        t
    }

    #[test]
    fn output_sizes() {
        let spec = InputSpec::clip(224);
        for (w, h) in [(224, 224), (448, 448), (300, 100)] {
            let out = preprocess_tensor(&ramp(w, h), &spec);
            assert_eq!((out.width, out.height), (224, 224));
        }
    }

    #[test]
    fn same_size_is_only_normalization() {
        let spec = InputSpec::clip(32);
        let x = ramp(32, 32);
        let out = preprocess_tensor(&x, &spec);
        let i = x.index(1, 5, 7);
        assert!((out.data[i] - (x.data[i] / 255.0 - CLIP_MEAN[1]) / CLIP_STD[1]).abs() < 1e-12);
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        // half-pixel centers land midway between source pixels
        let x = ramp(64, 64);
        let out = resize(&x, 32);
        let want = (x.get(0, 2, 4) + x.get(0, 2, 5) + x.get(0, 3, 4) + x.get(0, 3, 5)) / 4.0;
        assert!((out.get(0, 1, 2) - want).abs() < 1e-12);
    }

    #[test]
    fn backward_is_adjoint() {
        // <R x, g> == <x, R^T g>
        let spec = InputSpec::clip(24);
        let x = ramp(40, 33);
        let mut g = PixelTensor::zeros(24, 24);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = ((i * 13) % 7) as f64 - 3.0;
        }
        let fx = preprocess_tensor(&x, &spec);
        let zero = preprocess_tensor(&PixelTensor::zeros(40, 33), &spec);
        let lhs: f64 = fx.data.iter().zip(&zero.data).zip(&g.data).map(|((a, b), g)| (a - b) * g).sum();
        let bt = preprocess_backward(&g, 40, 33, &spec);
        let rhs: f64 = x.data.iter().zip(&bt.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
