//! Seeded synthetic reference scenes for desk-scale runs and tests.
//!
//! Each scene is a smooth two-colour gradient with a few flat shapes and a
//! low-amplitude texture. Channel values stay within [30, 225].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

pub fn reference_image(width: u32, height: u32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a6e);
    let c0: [f64; 3] = [0; 3].map(|_| rng.random_range(50.0..200.0));
    let c1: [f64; 3] = [0; 3].map(|_| rng.random_range(50.0..200.0));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq: f64 = rng.random_range(0.15..0.6);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    struct Shape {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        ellipse: bool,
        color: [f64; 3],
    }
    let n_shapes = rng.random_range(2..=4);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            cx: rng.random_range(0.15..0.85) * width as f64,
            cy: rng.random_range(0.15..0.85) * height as f64,
            rx: rng.random_range(0.08..0.25) * width as f64,
            ry: rng.random_range(0.08..0.25) * height as f64,
            ellipse: rng.random(),
            color: [0; 3].map(|_| rng.random_range(35.0..220.0)),
        })
        .collect();

    let (w, h) = (width as f64, height as f64);
    Image::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let t = ((fx / w - 0.5) * dx + (fy / h - 0.5) * dy + 0.5).clamp(0.0, 1.0);
        let mut px: [f64; 3] = [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t);
        for s in &shapes {
            let (u, v) = ((fx - s.cx) / s.rx, (fy - s.cy) / s.ry);
            let inside = if s.ellipse {
                u * u + v * v <= 1.0
            } else {
                u.abs() <= 1.0 && v.abs() <= 1.0
            };
            if inside {
                px = s.color;
            }
        }
        let tex = 6.0 * (freq * fx + phase).sin() * (freq * 0.7 * fy).cos();
        px.map(|v| (v + tex).round().clamp(30.0, 225.0) as u8)
    })
    .expect("synthetic scenes are at least 32x32")
}

/// `count` scenes named `ref_000`, `ref_001`, ...
pub fn reference_set(count: usize, width: u32, height: u32, seed: u64) -> Vec<(String, Image)> {
    (0..count)
        .map(|i| {
            (
                format!("ref_{i:03}"),
                reference_image(width, height, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)),
            )
        })
        .collect()
}
