//! Small deterministic encoder for tests and desk runs.
//!
//! A 64x64 input is cut into a 4x4 grid of patches. Each patch is reduced to
//! 4x4 cell means per channel, embedded with a fixed random projection and
//! passed through twelve residual tanh blocks that act on each token alone, so
//! a pixel edit only moves the tokens of its own patch. The class token is the
//! mean patch token. All weights come from a seeded generator.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::resize::{preprocess_backward, preprocess_tensor, InputSpec};
use super::{
    Backbone, BackboneError, BundleGrad, DifferentiableBackbone, FeatureBundle, GlobalEmbedding,
    LayerFeatures, Pullback,
};
use crate::image::{Image, PixelTensor};

pub const SYNTHETIC_ID: &str = "synthetic";

const SIZE: usize = 64;
const GRID: usize = 4;
const PATCH: usize = SIZE / GRID;
const CELLS: usize = 4;
const CELL: usize = PATCH / CELLS;
const IN_DIM: usize = 3 * CELLS * CELLS;
const DIM: usize = 8;
const GLOBAL_DIM: usize = 8;
const LAYERS: usize = 12;
const PATCHES: usize = GRID * GRID;
const DEFAULT_SEED: u64 = 0x5EED_F00D;

#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    spec: InputSpec,
    embed: Array2<f64>,
    position: Array2<f64>,
    mix: Vec<Array2<f64>>,
    mix_bias: Vec<Array1<f64>>,
    proj: Array2<f64>,
}

impl Default for SyntheticEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_SEED)
    }
}

struct Tape {
    in_w: usize,
    in_h: usize,
    h0: Array2<f64>,
    acts: Vec<Array2<f64>>,
    g: Array1<f64>,
    v_norm: f64,
}

impl SyntheticEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        let embed = normal(DIM, IN_DIM, 1.0 / (IN_DIM as f64).sqrt());
        let position = normal(PATCHES, DIM, 0.5);
        let mix: Vec<_> = (0..LAYERS).map(|_| normal(DIM, DIM, 1.0 / (DIM as f64).sqrt())).collect();
        let mix_bias = (0..LAYERS).map(|_| normal(1, DIM, 0.1).row(0).to_owned()).collect();
        let proj = normal(GLOBAL_DIM, DIM, 1.0 / (DIM as f64).sqrt());
        Self {
            spec: InputSpec::clip(SIZE),
            embed,
            position,
            mix,
            mix_bias,
            proj,
        }
    }

    fn cell_means(x: &PixelTensor) -> Array2<f64> {
        let mut f = Array2::zeros((PATCHES, IN_DIM));
        let norm = 1.0 / (CELL * CELL) as f64;
        for py in 0..GRID {
            for px in 0..GRID {
                let p = py * GRID + px;
                for c in 0..3 {
                    for cy in 0..CELLS {
                        for cx in 0..CELLS {
                            let mut s = 0.0;
                            for dy in 0..CELL {
                                for dx in 0..CELL {
                                    s += x.get(c, py * PATCH + cy * CELL + dy, px * PATCH + cx * CELL + dx);
                                }
                            }
                            f[[p, (c * CELLS + cy) * CELLS + cx]] = s * norm;
                        }
                    }
                }
            }
        }
        f
    }

    fn with_class_token(h: &Array2<f64>) -> Array2<f64> {
        let mut t = Array2::zeros((PATCHES + 1, DIM));
        t.row_mut(0).assign(&h.mean_axis(Axis(0)).expect("patches"));
        t.slice_mut(ndarray::s![1.., ..]).assign(h);
        t
    }

    fn forward(&self, pixels: &PixelTensor) -> Result<(FeatureBundle, Tape), BackboneError> {
        let x = preprocess_tensor(pixels, &self.spec);
        let f = Self::cell_means(&x);
        let h0 = (f.dot(&self.embed.t()) + &self.position).mapv(f64::tanh);
        let mut h = h0.clone();
        let mut layers = Vec::with_capacity(LAYERS);
        let mut acts = Vec::with_capacity(LAYERS);
        for l in 0..LAYERS {
            let t = (h.dot(&self.mix[l].t()) + &self.mix_bias[l]).mapv(f64::tanh);
            h = &h + &(&t * 0.5);
            acts.push(t);
            layers.push(LayerFeatures {
                layer_index: l + 1,
                tokens: Self::with_class_token(&h),
            });
        }
        let m = h.mean_axis(Axis(0)).expect("patches");
        let v = self.proj.dot(&m);
        let v_norm = v.dot(&v).sqrt();
        let global = GlobalEmbedding::normalized(v.to_vec())?;
        let g = Array1::from(global.as_slice().to_vec());
        let bundle = FeatureBundle { layers, global };
        Ok((
            bundle,
            Tape {
                in_w: pixels.width,
                in_h: pixels.height,
                h0,
                acts,
                g,
                v_norm,
            },
        ))
    }

    /// Gradient of the class-token-augmented layer onto its patch tokens.
    fn fold_class(g: &Array2<f64>) -> Array2<f64> {
        let mut out = g.slice(ndarray::s![1.., ..]).to_owned();
        let cls = g.row(0).to_owned() / PATCHES as f64;
        out += &cls;
        out
    }

    fn backward(&self, tape: &Tape, grad: &BundleGrad) -> PixelTensor {
        assert_eq!(grad.layers.len(), LAYERS, "one gradient per layer");
        let dg = Array1::from(grad.global.clone());
        let dv = (&dg - &(&tape.g * tape.g.dot(&dg))) / tape.v_norm;
        let dm = self.proj.t().dot(&dv) / PATCHES as f64;

        let mut dh = Self::fold_class(&grad.layers[LAYERS - 1]) + &dm;
        for l in (0..LAYERS).rev() {
            let t = &tape.acts[l];
            let du = &dh * &t.mapv(|a| 0.5 * (1.0 - a * a));
            dh = &dh + &du.dot(&self.mix[l]);
            if l > 0 {
                dh += &Self::fold_class(&grad.layers[l - 1]);
            }
        }
        let de = &dh * &tape.h0.mapv(|a| 1.0 - a * a);
        let df = de.dot(&self.embed);

        let mut dx = PixelTensor::zeros(SIZE, SIZE);
        let norm = 1.0 / (CELL * CELL) as f64;
        for py in 0..GRID {
            for px in 0..GRID {
                let p = py * GRID + px;
                for c in 0..3 {
                    for cy in 0..CELLS {
                        for cx in 0..CELLS {
                            let v = df[[p, (c * CELLS + cy) * CELLS + cx]] * norm;
                            for dy in 0..CELL {
                                for dxx in 0..CELL {
                                    let i = dx.index(c, py * PATCH + cy * CELL + dy, px * PATCH + cx * CELL + dxx);
                                    dx.data[i] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        preprocess_backward(&dx, tape.in_w, tape.in_h, &self.spec)
    }
}

impl Backbone for SyntheticEncoder {
    fn id(&self) -> &str {
        SYNTHETIC_ID
    }

    fn input_spec(&self) -> &InputSpec {
        &self.spec
    }

    fn extract_features(&self, img: &Image) -> Result<FeatureBundle, BackboneError> {
        Ok(self.forward(&PixelTensor::from_image(img))?.0)
    }

    fn num_layers(&self) -> Result<usize, BackboneError> {
        Ok(LAYERS)
    }

    fn param_checksum(&self) -> String {
        let mut h = Sha256::new();
        let all = [&self.embed, &self.position, &self.proj]
            .into_iter()
            .chain(&self.mix)
            .flat_map(|a| a.iter())
            .chain(self.mix_bias.iter().flat_map(|b| b.iter()));
        for v in all {
            h.update(v.to_le_bytes());
        }
        crate::image::to_hex(&h.finalize())
    }

    fn as_differentiable(&self) -> Option<&dyn DifferentiableBackbone> {
        Some(self)
    }
}

impl DifferentiableBackbone for SyntheticEncoder {
    fn extract_with_pullback(&self, pixels: &PixelTensor) -> Result<(FeatureBundle, Pullback<'_>), BackboneError> {
        let (bundle, tape) = self.forward(pixels)?;
        Ok((bundle, Box::new(move |g| self.backward(&tape, g))))
    }
}
