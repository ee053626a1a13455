//! Frozen vision encoders that expose per-layer tokens and a global embedding.

mod cache;
mod resize;
mod synthetic;
mod vit;

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

pub use cache::FeatureCache;
pub use resize::{preprocess, preprocess_backward, preprocess_tensor, InputSpec, CLIP_MEAN, CLIP_STD};
pub use synthetic::{SyntheticEncoder, SYNTHETIC_ID};
pub use vit::{VitBackbone, VitConfig, VIT_ID};

use crate::image::{Image, ImageError, PixelTensor};

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("bad weights: {0}")]
    Weights(String),
    #[error("feature shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Decode(#[from] ImageError),
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl BackboneError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Tokens of one block. Row 0 is the class token, rows 1.. are patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub layer_index: usize,
    pub tokens: Array2<f64>,
}

impl LayerFeatures {
    pub fn num_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Unit-norm image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding(Vec<f64>);

impl GlobalEmbedding {
    /// Normalizes `v`. Fails on a zero or non-finite vector.
    pub fn normalized(v: Vec<f64>) -> Result<Self, BackboneError> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(BackboneError::Shape("global embedding has zero or non-finite norm".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    /// Wraps an already normalized vector.
    pub fn from_unit(v: Vec<f64>) -> Result<Self, BackboneError> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(BackboneError::Shape(format!("global embedding norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub layers: Vec<LayerFeatures>,
    pub global: GlobalEmbedding,
}

impl FeatureBundle {
    /// (tokens, dim) shared by all layers.
    pub fn token_shape(&self) -> (usize, usize) {
        self.layers
            .first()
            .map(|l| (l.num_tokens(), l.dim()))
            .unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let (t, d) = self.token_shape();
        if self.layers.is_empty() || t < 2 || d == 0 {
            return Err(BackboneError::Shape("need at least one layer with T >= 2".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if (l.num_tokens(), l.dim()) != (t, d) {
                return Err(BackboneError::Shape(format!(
                    "layer {} is {}x{}, expected {t}x{d}",
                    l.layer_index,
                    l.num_tokens(),
                    l.dim()
                )));
            }
            if k > 0 && l.layer_index <= self.layers[k - 1].layer_index {
                return Err(BackboneError::Shape("layer indices must increase".into()));
            }
            if l.tokens.iter().any(|x| !x.is_finite()) {
                return Err(BackboneError::Shape(format!("layer {} has non-finite values", l.layer_index)));
            }
        }
        GlobalEmbedding::from_unit(self.global.0.clone()).map(|_| ())
    }
}

/// Gradient of a scalar with respect to every part of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGrad {
    pub layers: Vec<Array2<f64>>,
    pub global: Vec<f64>,
}

/// Maps a feature gradient back to raw 0..=255 input pixels.
pub type Pullback<'a> = Box<dyn Fn(&BundleGrad) -> PixelTensor + 'a>;

pub trait Backbone: Send + Sync {
    fn id(&self) -> &str;

    fn input_spec(&self) -> &InputSpec;

    fn preprocess(&self, img: &Image) -> PixelTensor {
        preprocess(img, self.input_spec())
    }

    fn extract_features(&self, img: &Image) -> Result<FeatureBundle, BackboneError>;

    /// Hex SHA-256 over every parameter, recomputed on each call.
    fn param_checksum(&self) -> String;

    /// Number of intermediate layers exposed; probes a small image by default.
    fn num_layers(&self) -> Result<usize, BackboneError> {
        let probe = Image::filled(crate::image::MIN_SIDE, crate::image::MIN_SIDE, [128, 128, 128])?;
        Ok(self.extract_features(&probe)?.layers.len())
    }

    fn as_differentiable(&self) -> Option<&dyn DifferentiableBackbone> {
        None
    }
}

pub trait DifferentiableBackbone: Backbone {
    /// Features of raw pixels (0..=255, any size) and the pullback for them.
    fn extract_with_pullback(&self, pixels: &PixelTensor) -> Result<(FeatureBundle, Pullback<'_>), BackboneError>;
}

/// Resolves a backbone by id. `vit-b16` needs a weights directory.
pub fn open_backbone(id: &str, weights: Option<&Path>) -> Result<Arc<dyn Backbone>, BackboneError> {
    match id {
        SYNTHETIC_ID => Ok(Arc::new(SyntheticEncoder::default())),
        VIT_ID => {
            let dir = weights.ok_or_else(|| {
                BackboneError::BackendUnavailable(format!("`{VIT_ID}` needs a weights directory"))
            })?;
            Ok(Arc::new(VitBackbone::load(dir)?))
        }
        other => Err(BackboneError::UnknownBackbone(other.to_owned())),
    }
}
