//! Pixel-domain distortions: resampling, blur, noise and tone curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::spec::{ResampleFilter, ToneOp};
use crate::image::Image;

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Down-then-up resampling back to the original size.
pub fn resample(img: &Image, scale: f64, filter: ResampleFilter) -> Image {
    if scale >= 1.0 {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    let sw = ((w as f64 * scale).round() as u32).max(1);
    let sh = ((h as f64 * scale).round() as u32).max(1);
    let filter = match filter {
        ResampleFilter::Nearest => image::imageops::FilterType::Nearest,
        ResampleFilter::Bilinear => image::imageops::FilterType::Triangle,
        ResampleFilter::Bicubic => image::imageops::FilterType::CatmullRom,
        ResampleFilter::Lanczos => image::imageops::FilterType::Lanczos3,
    };
    let small = image::imageops::resize(&img.to_rgb_image(), sw, sh, filter);
    let restored = image::imageops::resize(&small, w, h, filter);
    img.with_data(restored.into_raw())
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution with clamp-to-edge borders, rounded once at the end.
fn separable(img: &Image, kernel: &[f64]) -> Image {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let r = (kernel.len() / 2) as i64;
    let src = img.as_raw();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let xx = (x + k as i64 - r).clamp(0, w - 1);
                    acc += wgt * src[((y * w + xx) * 3 + c) as usize] as f64;
                }
                tmp[((y * w + x) * 3 + c) as usize] = acc;
            }
        }
    }
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let yy = (y + k as i64 - r).clamp(0, h - 1);
                    acc += wgt * tmp[((yy * w + x) * 3 + c) as usize];
                }
                out[((y * w + x) * 3 + c) as usize] = to_u8(acc);
            }
        }
    }
    img.with_data(out)
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    separable(img, &gaussian_kernel(sigma))
}

pub fn box_blur(img: &Image, radius: u32) -> Image {
    let n = 2 * radius as usize + 1;
    separable(img, &vec![1.0 / n as f64; n])
}

/// Additive Gaussian noise. The noise field depends only on the seed and
/// image size, so larger `sigma` scales the same field.
pub fn gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = img
        .as_raw()
        .iter()
        .map(|&p| {
            let n: f64 = StandardNormal.sample(&mut rng);
            to_u8(p as f64 + sigma * n)
        })
        .collect();
    img.with_data(out)
}

/// Sets a seeded fraction of pixels to pure black or white.
pub fn salt_pepper(img: &Image, amount: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.as_raw().to_vec();
    for px in out.chunks_exact_mut(3) {
        let hit: f64 = rng.random();
        let salt: bool = rng.random();
        if hit < amount {
            px.fill(if salt { 255 } else { 0 });
        }
    }
    img.with_data(out)
}

pub fn tone(img: &Image, op: ToneOp, amount: f64) -> Image {
    let lut = |f: &dyn Fn(f64) -> f64| -> [u8; 256] {
        let mut t = [0u8; 256];
        for (i, v) in t.iter_mut().enumerate() {
            *v = to_u8(f(i as f64));
        }
        t
    };
    let table = match op {
        ToneOp::Brightness => lut(&|v| v + amount),
        ToneOp::Contrast => lut(&|v| 127.5 + (v - 127.5) * amount),
        ToneOp::Gamma => lut(&|v| 255.0 * (v / 255.0).powf(amount)),
        ToneOp::Saturation => {
            let out = img
                .as_raw()
                .chunks_exact(3)
                .flat_map(|px| {
                    let [r, g, b] = [px[0] as f64, px[1] as f64, px[2] as f64];
                    let luma = 0.299 * r + 0.587 * g + 0.114 * b;
                    [r, g, b].map(|c| to_u8(luma + (c - luma) * amount))
                })
                .collect();
            return img.with_data(out);
        }
    };
    img.with_data(img.as_raw().iter().map(|&p| table[p as usize]).collect())
}
