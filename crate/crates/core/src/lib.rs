//! Machine-oriented full-reference image quality.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`distortion`] produces seeded distorted variants of reference images.
//! 2. [`consistency`] and [`dataset`] pair PSNR-matched variants and label each
//!    pair with the vote ratio of downstream models whose predictions stay
//!    closer to the reference.
//! 3. [`backbone`] and [`metric`] define a multi-layer token/global feature
//!    similarity over a frozen encoder, and [`trainer`] fits its head to the
//!    soft pairwise labels.
//! 4. [`eval`] scores any full-reference metric against labeled pairs, computes
//!    BD-rate between rate–task curves, and exposes `1 - S` as a
//!    rate–distortion term.

pub mod backbone;
pub mod consistency;
pub mod dataset;
pub mod distortion;
pub mod eval;
pub mod image;
pub mod metric;
pub mod synthetic;
pub mod trainer;

pub use crate::image::{Image, ImageError, PixelTensor};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
