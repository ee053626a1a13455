//! Pre-norm ViT image tower read from a Hugging Face CLIP checkpoint.
//!
//! The weights directory holds `model.safetensors` and `config.json`. Only the
//! `vision_model.*` tensors and `visual_projection.weight` are read. Layer
//! features are the residual stream after each block, before the final norm.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use safetensors::{Dtype, SafeTensors};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::resize::{preprocess, InputSpec};
use super::{Backbone, BackboneError, FeatureBundle, GlobalEmbedding, LayerFeatures};
use crate::image::{Image, PixelTensor};

pub const VIT_ID: &str = "vit-b16";

fn d_hidden() -> usize {
    768
}
fn d_intermediate() -> usize {
    3072
}
fn d_heads() -> usize {
    12
}
fn d_layers() -> usize {
    12
}
fn d_image() -> usize {
    224
}
fn d_patch() -> usize {
    16
}
fn d_eps() -> f64 {
    1e-5
}
fn d_act() -> String {
    "quick_gelu".into()
}
fn d_proj() -> usize {
    512
}

/// Vision-tower settings. Missing keys take the ViT-B/16 values.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct VitConfig {
    #[serde(default = "d_hidden")]
    pub hidden_size: usize,
    #[serde(default = "d_intermediate")]
    pub intermediate_size: usize,
    #[serde(default = "d_heads")]
    pub num_attention_heads: usize,
    #[serde(default = "d_layers")]
    pub num_hidden_layers: usize,
    #[serde(default = "d_image")]
    pub image_size: usize,
    #[serde(default = "d_patch")]
    pub patch_size: usize,
    #[serde(default = "d_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "d_act")]
    pub hidden_act: String,
    #[serde(default = "d_proj")]
    pub projection_dim: usize,
}

#[derive(Deserialize)]
struct FullConfig {
    vision_config: Option<serde_json::Value>,
    projection_dim: Option<usize>,
}

impl VitConfig {
    /// Accepts either a full CLIP config (with `vision_config`) or a bare
    /// vision config.
    pub fn parse(text: &str) -> Result<Self, BackboneError> {
        let bad = |e: serde_json::Error| BackboneError::Weights(format!("config.json: {e}"));
        let full: FullConfig = serde_json::from_str(text).map_err(bad)?;
        let mut cfg: VitConfig = match full.vision_config {
            Some(v) => serde_json::from_value(v).map_err(bad)?,
            None => serde_json::from_str(text).map_err(bad)?,
        };
        if let Some(p) = full.projection_dim {
            cfg.projection_dim = p;
        }
        if cfg.hidden_act != "quick_gelu" {
            return Err(BackboneError::Weights(format!(
                "unsupported activation `{}`",
                cfg.hidden_act
            )));
        }
        if cfg.patch_size == 0
            || !cfg.image_size.is_multiple_of(cfg.patch_size)
            || cfg.num_attention_heads == 0
            || !cfg.hidden_size.is_multiple_of(cfg.num_attention_heads)
        {
            return Err(BackboneError::Weights("inconsistent vision config".into()));
        }
        Ok(cfg)
    }

    pub fn num_tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2) + 1
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Array2<f32>,
    b: Array1<f32>,
}

impl Linear {
    fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        x.dot(&self.w.t()) + &self.b
    }
}

#[derive(Debug, Clone)]
struct Norm {
    w: Array1<f32>,
    b: Array1<f32>,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct VitBackbone {
    config: VitConfig,
    spec: InputSpec,
    class_embedding: Array1<f32>,
    patch_embedding: Array2<f32>,
    position_embedding: Array2<f32>,
    pre_norm: Norm,
    blocks: Vec<Block>,
    post_norm: Norm,
    projection: Array2<f32>,
}

struct Tensors<'a> {
    st: SafeTensors<'a>,
}

impl Tensors<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>, BackboneError> {
        let t = self
            .st
            .tensor(name)
            .map_err(|e| BackboneError::Weights(format!("{name}: {e}")))?;
        if t.shape() != shape {
            return Err(BackboneError::Weights(format!(
                "{name}: shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        let bytes = t.data();
        let out = match t.dtype() {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            other => {
                return Err(BackboneError::Weights(format!("{name}: unsupported dtype {other:?}")))
            }
        };
        Ok(out)
    }

    fn vec(&self, name: &str, n: usize) -> Result<Array1<f32>, BackboneError> {
        Ok(Array1::from(self.get(name, &[n])?))
    }

    fn mat(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>, BackboneError> {
        Array2::from_shape_vec((rows, cols), self.get(name, &[rows, cols])?)
            .map_err(|e| BackboneError::Weights(format!("{name}: {e}")))
    }

    fn linear(&self, prefix: &str, out: usize, inp: usize) -> Result<Linear, BackboneError> {
        Ok(Linear {
            w: self.mat(&format!("{prefix}.weight"), out, inp)?,
            b: self.vec(&format!("{prefix}.bias"), out)?,
        })
    }

    fn norm(&self, prefix: &str, n: usize) -> Result<Norm, BackboneError> {
        Ok(Norm {
            w: self.vec(&format!("{prefix}.weight"), n)?,
            b: self.vec(&format!("{prefix}.bias"), n)?,
        })
    }
}

impl VitBackbone {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, BackboneError> {
        let dir = dir.as_ref();
        let weights = dir.join("model.safetensors");
        let config = dir.join("config.json");
        if !weights.is_file() || !config.is_file() {
            return Err(BackboneError::BackendUnavailable(format!(
                "expected model.safetensors and config.json in {}",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&config).map_err(|e| BackboneError::io(&config, e))?;
        let cfg = VitConfig::parse(&text)?;
        let bytes = std::fs::read(&weights).map_err(|e| BackboneError::io(&weights, e))?;
        Self::from_safetensors(cfg, &bytes)
    }

    pub fn from_safetensors(config: VitConfig, bytes: &[u8]) -> Result<Self, BackboneError> {
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| BackboneError::Weights(format!("safetensors: {e}")))?;
        let t = Tensors { st };
        let (d, p) = (config.hidden_size, config.patch_size);
        let tokens = config.num_tokens();
        let patch = t.get("vision_model.embeddings.patch_embedding.weight", &[d, 3, p, p])?;
        let mut blocks = Vec::with_capacity(config.num_hidden_layers);
        for i in 0..config.num_hidden_layers {
            let pre = format!("vision_model.encoder.layers.{i}");
            blocks.push(Block {
                ln1: t.norm(&format!("{pre}.layer_norm1"), d)?,
                q: t.linear(&format!("{pre}.self_attn.q_proj"), d, d)?,
                k: t.linear(&format!("{pre}.self_attn.k_proj"), d, d)?,
                v: t.linear(&format!("{pre}.self_attn.v_proj"), d, d)?,
                out: t.linear(&format!("{pre}.self_attn.out_proj"), d, d)?,
                ln2: t.norm(&format!("{pre}.layer_norm2"), d)?,
                fc1: t.linear(&format!("{pre}.mlp.fc1"), config.intermediate_size, d)?,
                fc2: t.linear(&format!("{pre}.mlp.fc2"), d, config.intermediate_size)?,
            });
        }
        Ok(Self {
            spec: InputSpec::clip(config.image_size),
            class_embedding: t.vec("vision_model.embeddings.class_embedding", d)?,
            patch_embedding: Array2::from_shape_vec((d, 3 * p * p), patch)
                .map_err(|e| BackboneError::Weights(e.to_string()))?,
            position_embedding: t.mat("vision_model.embeddings.position_embedding.weight", tokens, d)?,
            pre_norm: t.norm("vision_model.pre_layrnorm", d)?,
            blocks,
            post_norm: t.norm("vision_model.post_layernorm", d)?,
            projection: t.mat("visual_projection.weight", config.projection_dim, d)?,
            config,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    fn layer_norm(&self, x: &Array2<f32>, n: &Norm) -> Array2<f32> {
        let eps = self.config.layer_norm_eps as f32;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let mean = row.mean().expect("non-empty");
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().expect("non-empty");
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            row *= &n.w;
            row += &n.b;
        }
        out
    }

    fn attention(&self, x: &Array2<f32>, b: &Block) -> Array2<f32> {
        let heads = self.config.num_attention_heads;
        let hd = self.config.hidden_size / heads;
        let scale = (hd as f32).powf(-0.5);
        let q = b.q.apply(x) * scale;
        let k = b.k.apply(x);
        let v = b.v.apply(x);
        let mut ctx = Array2::<f32>::zeros(x.dim());
        for h in 0..heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut att = q.slice(cols).dot(&k.slice(cols).t());
            for mut row in att.rows_mut() {
                let m = row.fold(f32::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row /= z;
            }
            ctx.slice_mut(cols).assign(&att.dot(&v.slice(cols)));
        }
        b.out.apply(&ctx)
    }

    fn embed(&self, x: &PixelTensor) -> Array2<f32> {
        let p = self.config.patch_size;
        let grid = self.config.image_size / p;
        let mut patches = Array2::<f32>::zeros((grid * grid, 3 * p * p));
        for gy in 0..grid {
            for gx in 0..grid {
                let mut row = patches.row_mut(gy * grid + gx);
                for c in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            row[(c * p + ky) * p + kx] = x.get(c, gy * p + ky, gx * p + kx) as f32;
                        }
                    }
                }
            }
        }
        let emb = patches.dot(&self.patch_embedding.t());
        let mut tokens = Array2::<f32>::zeros((grid * grid + 1, self.config.hidden_size));
        tokens.row_mut(0).assign(&self.class_embedding);
        tokens.slice_mut(s![1.., ..]).assign(&emb);
        tokens + &self.position_embedding
    }

    fn forward(&self, x: &PixelTensor) -> Result<FeatureBundle, BackboneError> {
        let mut h = self.layer_norm(&self.embed(x), &self.pre_norm);
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            h = &h + &self.attention(&self.layer_norm(&h, &b.ln1), b);
            let mid = b.fc1.apply(&self.layer_norm(&h, &b.ln2)).mapv(|v| v / (1.0 + (-1.702 * v).exp()));
            h = &h + &b.fc2.apply(&mid);
            layers.push(LayerFeatures {
                layer_index: i + 1,
                tokens: h.mapv(f64::from),
            });
        }
        let cls = self.layer_norm(&h.slice(s![0..1, ..]).to_owned(), &self.post_norm);
        let g = self.projection.dot(&cls.index_axis(Axis(0), 0));
        let global = GlobalEmbedding::normalized(g.iter().map(|&v| f64::from(v)).collect())?;
        Ok(FeatureBundle { layers, global })
    }

    fn named_params(&self) -> BTreeMap<String, Vec<f32>> {
        let mut m = BTreeMap::new();
        let mut put = |k: String, v: Vec<f32>| {
            m.insert(k, v);
        };
        put("class".into(), self.class_embedding.to_vec());
        put("patch".into(), self.patch_embedding.iter().copied().collect());
        put("position".into(), self.position_embedding.iter().copied().collect());
        for (tag, n) in [("pre", &self.pre_norm), ("post", &self.post_norm)] {
            put(format!("{tag}.w"), n.w.to_vec());
            put(format!("{tag}.b"), n.b.to_vec());
        }
        put("proj".into(), self.projection.iter().copied().collect());
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, l) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("out", &b.out), ("fc1", &b.fc1), ("fc2", &b.fc2)] {
                put(format!("{i:02}.{tag}.w"), l.w.iter().copied().collect());
                put(format!("{i:02}.{tag}.b"), l.b.to_vec());
            }
            for (tag, n) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
                put(format!("{i:02}.{tag}.w"), n.w.to_vec());
                put(format!("{i:02}.{tag}.b"), n.b.to_vec());
            }
        }
        m
    }
}

impl Backbone for VitBackbone {
    fn id(&self) -> &str {
        VIT_ID
    }

    fn input_spec(&self) -> &InputSpec {
        &self.spec
    }

    fn extract_features(&self, img: &Image) -> Result<FeatureBundle, BackboneError> {
        self.forward(&preprocess(img, &self.spec))
    }

    fn num_layers(&self) -> Result<usize, BackboneError> {
        Ok(self.config.num_hidden_layers)
    }

    fn param_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.named_params() {
            h.update(k.as_bytes());
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        crate::image::to_hex(&h.finalize())
    }
}
