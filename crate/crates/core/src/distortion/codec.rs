//! Lossy codec round-trips. Every codec returns a decoded 8-bit image of the
//! input's size.

use super::DistortionError;
use crate::image::Image;

/// Identifier of the bundled learned-codec stand-in.
pub const HAAR_STUB_ID: &str = "haar_stub";

/// A learned image codec, used as encode-then-decode.
///
/// Production backends wrap pretrained networks. `step` is the codec's
/// rate knob (larger means coarser) and `levels` its analysis depth.
pub trait LearnedCodec: Send + Sync {
    fn id(&self) -> &str;
    fn round_trip(&self, img: &Image, step: f64, levels: u32) -> Result<Image, DistortionError>;
}

pub fn jpeg(img: &Image, quality: u8) -> Result<Image, DistortionError> {
    let mut buf = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| DistortionError::Codec(e.to_string()))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| DistortionError::Codec(e.to_string()))?
        .to_rgb8();
    Ok(img.with_data(decoded.into_raw()))
}

/// Planar f64 buffer with edge-replicated padding.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn padded(src_w: usize, src_h: usize, mult: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let w = src_w.div_ceil(mult) * mult;
        let h = src_h.div_ceil(mult) * mult;
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                v.push(f(x.min(src_w - 1), y.min(src_h - 1)));
            }
        }
        Self { w, h, v }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.v[y * self.w + x]
    }
}

fn channel(img: &Image, c: usize) -> impl Fn(usize, usize) -> f64 + '_ {
    let w = img.width() as usize;
    let raw = img.as_raw();
    move |x, y| raw[(y * w + x) * 3 + c] as f64
}

// 4-point orthonormal DCT-II basis.
fn dct4() -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { 0.5 } else { (0.5f64).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 8.0).cos();
        }
    }
    m
}

fn quantize_blocks(p: &mut Plane, dc_step: f64, ac_step: f64) {
    let m = dct4();
    for by in (0..p.h).step_by(4) {
        for bx in (0..p.w).step_by(4) {
            let mut blk = [[0.0; 4]; 4];
            for (y, row) in blk.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = p.at(bx + x, by + y) - 128.0;
                }
            }
            // coef = M * blk * M^T
            let mut coef = [[0.0; 4]; 4];
            for u in 0..4 {
                for v in 0..4 {
                    let mut acc = 0.0;
                    for y in 0..4 {
                        for x in 0..4 {
                            acc += m[u][y] * blk[y][x] * m[v][x];
                        }
                    }
                    let step = if u == 0 && v == 0 { dc_step } else { ac_step };
                    coef[u][v] = (acc / step).round() * step;
                }
            }
            for y in 0..4 {
                for x in 0..4 {
                    let mut acc = 0.0;
                    for u in 0..4 {
                        for v in 0..4 {
                            acc += m[u][y] * coef[u][v] * m[v][x];
                        }
                    }
                    p.v[(by + y) * p.w + bx + x] = acc + 128.0;
                }
            }
        }
    }
}

/// WebP-style lossy round-trip: studio-range YUV 4:2:0 with 4x4 block
/// transforms quantized by a quality-derived step.
pub fn webp_style(img: &Image, quality: u8) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (r, g, b) = (channel(img, 0), channel(img, 1), channel(img, 2));
    let mut y = Plane::padded(w, h, 8, |x, yy| {
        16.0 + 0.256788 * r(x, yy) + 0.504129 * g(x, yy) + 0.097906 * b(x, yy)
    });
    let (cw, ch) = (y.w / 2, y.h / 2);
    let chroma = |cu: [f64; 3]| {
        Plane::padded(cw, ch, 4, |x, yy| {
            let mut acc = 0.0;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (sx, sy) = ((2 * x + dx).min(w - 1), (2 * yy + dy).min(h - 1));
                acc += cu[0] * r(sx, sy) + cu[1] * g(sx, sy) + cu[2] * b(sx, sy);
            }
            128.0 + acc / 4.0
        })
    };
    let mut u = chroma([-0.148223, -0.290993, 0.439216]);
    let mut v = chroma([0.439216, -0.367788, -0.071427]);

    let qi = (100.0 - quality as f64) * 1.27;
    let ac = 71f64.powf(qi / 127.0);
    let dc = (0.6 * ac).max(1.0);
    quantize_blocks(&mut y, dc, ac);
    quantize_blocks(&mut u, dc * 1.2, ac * 1.2);
    quantize_blocks(&mut v, dc * 1.2, ac * 1.2);

    let mut out = Vec::with_capacity(w * h * 3);
    for yy in 0..h {
        for x in 0..w {
            let luma = 1.164383 * (y.at(x, yy) - 16.0);
            let cu = u.at(x / 2, yy / 2) - 128.0;
            let cv = v.at(x / 2, yy / 2) - 128.0;
            for c in [
                luma + 1.596027 * cv,
                luma - 0.391762 * cu - 0.812968 * cv,
                luma + 2.017232 * cu,
            ] {
                out.push(c.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    img.with_data(out)
}

/// Bundled learned-codec stand-in: multi-level orthonormal Haar analysis with
/// uniform quantization in the transform domain. Needs no weights.
#[derive(Debug, Default, Clone, Copy)]
pub struct HaarStubCodec;

impl HaarStubCodec {
    fn haar_level(p: &mut Plane, w: usize, h: usize, inverse: bool) {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut tmp = vec![0.0; w.max(h)];
        // rows then columns; the inverse runs columns then rows
        let mut pass = |p: &mut Plane, rows: bool| {
            let (outer, len) = if rows { (h, w) } else { (w, h) };
            for o in 0..outer {
                let pw = p.w;
                let idx = |i: usize| if rows { o * pw + i } else { i * pw + o };
                let half = len / 2;
                if !inverse {
                    for i in 0..half {
                        let (a, b) = (p.v[idx(2 * i)], p.v[idx(2 * i + 1)]);
                        tmp[i] = (a + b) * s;
                        tmp[half + i] = (a - b) * s;
                    }
                } else {
                    for i in 0..half {
                        let (lo, hi) = (p.v[idx(i)], p.v[idx(half + i)]);
                        tmp[2 * i] = (lo + hi) * s;
                        tmp[2 * i + 1] = (lo - hi) * s;
                    }
                }
                for (i, t) in tmp.iter().take(len).enumerate() {
                    p.v[idx(i)] = *t;
                }
            }
        };
        if !inverse {
            pass(p, true);
            pass(p, false);
        } else {
            pass(p, false);
            pass(p, true);
        }
    }
}

impl LearnedCodec for HaarStubCodec {
    fn id(&self) -> &str {
        HAAR_STUB_ID
    }

    fn round_trip(&self, img: &Image, step: f64, levels: u32) -> Result<Image, DistortionError> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mult = 1usize << levels;
        let mut out = img.as_raw().to_vec();
        for c in 0..3 {
            let mut p = Plane::padded(w, h, mult, channel(img, c));
            let (pw, ph) = (p.w, p.h);
            for l in 0..levels {
                Self::haar_level(&mut p, pw >> l, ph >> l, false);
            }
            let (lw, lh) = (pw >> levels, ph >> levels);
            for y in 0..ph {
                for x in 0..pw {
                    let q = if x < lw && y < lh { step / 4.0 } else { step };
                    let v = &mut p.v[y * pw + x];
                    *v = (*v / q).round() * q;
                }
            }
            for l in (0..levels).rev() {
                Self::haar_level(&mut p, pw >> l, ph >> l, true);
            }
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * 3 + c] = p.at(x, y).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Ok(img.with_data(out))
    }
}
