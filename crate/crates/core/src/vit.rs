//! A minimal CLIP-style ViT visual encoder with per-layer feature capture.
//!
//! The standard layers follow the pre-norm residual form
//! `Z = SA(LN(X)) + X`, `X' = FFN(LN(Z)) + Z`. The last layer can instead be
//! run in its calibrated form (see [`modified_last_layer`]), where the
//! attention weights are supplied from outside and the residual and FFN
//! branches are dropped.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adjust::AttentionWeights;
use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::numerics::{layer_norm, resize_bilinear, row_softmax, Tensor2D};

/// A channel-major `3 × height × width` float image, already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "3x{height}x{width} image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in value {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Copies the `h × w` region at `(top, left)`, zero-filling anything past the edge.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> ImageTensor {
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                let sy = top + y;
                if sy >= self.height {
                    break;
                }
                for x in 0..w {
                    let sx = left + x;
                    if sx >= self.width {
                        break;
                    }
                    data[(c * h + y) * w + x] = self.at(c, sy, sx);
                }
            }
        }
        ImageTensor { height: h, width: w, data }
    }
}

/// A spatial grid of patch tokens with the class token held separately.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    /// `h·w × dim`, row-major over the grid.
    pub tokens: Tensor2D,
    pub cls: Option<Vec<f32>>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, tokens: Tensor2D, cls: Option<Vec<f32>>) -> Result<Self> {
        if tokens.rows() != h * w {
            return Err(Error::Shape(format!(
                "{h}x{w} grid needs {} tokens, got {}",
                h * w,
                tokens.rows()
            )));
        }
        if let Some(c) = &cls {
            if c.len() != tokens.cols() {
                return Err(Error::Shape(format!(
                    "class token width {} differs from patch width {}",
                    c.len(),
                    tokens.cols()
                )));
            }
        }
        Ok(Self { h, w, tokens, cls })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.w + col
    }

    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        self.tokens.row(self.index(row, col))
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.h == other.h && self.w == other.w && self.dim() == other.dim()
    }

    fn check_same_shape(&self, other: &TokenGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "grid {}x{}x{} vs {}x{}x{}",
                self.h,
                self.w,
                self.dim(),
                other.h,
                other.w,
                other.dim()
            )))
        }
    }

    /// Elementwise sum of patch tokens; class tokens are summed when both exist.
    pub fn add(&self, other: &TokenGrid) -> Result<TokenGrid> {
        self.check_same_shape(other)?;
        let cls = match (&self.cls, &other.cls) {
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| x + y).collect()),
            _ => None,
        };
        Ok(TokenGrid {
            h: self.h,
            w: self.w,
            tokens: self.tokens.add(&other.tokens)?,
            cls,
        })
    }

    pub fn with_tokens(&self, tokens: Tensor2D) -> Result<TokenGrid> {
        TokenGrid::new(self.h, self.w, tokens, self.cls.clone())
    }

    /// Patch tokens with the class token prepended as row 0, if present.
    fn to_sequence(&self) -> Tensor2D {
        match &self.cls {
            None => self.tokens.clone(),
            Some(cls) => {
                let d = self.dim();
                let mut data = Vec::with_capacity((self.n() + 1) * d);
                data.extend_from_slice(cls);
                data.extend_from_slice(self.tokens.as_slice());
                Tensor2D::from_fn(self.n() + 1, d, |r, c| data[r * d + c])
            }
        }
    }

    fn from_sequence(h: usize, w: usize, seq: &Tensor2D) -> TokenGrid {
        let d = seq.cols();
        let cls = seq.row(0).to_vec();
        let tokens = Tensor2D::from_fn(h * w, d, |r, c| seq.get(r + 1, c));
        TokenGrid { h, w, tokens, cls: Some(cls) }
    }
}

/// Every layer output captured during one encoder pass.
///
/// Layers use 1-based numbering: `layer(l)` is the output of transformer
/// layer `l`, `layer(depth)` is the last layer and `layer(depth - 1)` the
/// penultimate one.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    /// Patch embedding plus positions (after the pre-norm, when the model has one).
    pub embedding: TokenGrid,
    pub per_layer: Vec<TokenGrid>,
}

impl LayerStack {
    pub fn depth(&self) -> usize {
        self.per_layer.len()
    }

    pub fn penultimate_index(&self) -> usize {
        self.depth() - 1
    }

    pub fn last_index(&self) -> usize {
        self.depth()
    }

    pub fn layer(&self, l: usize) -> Result<&TokenGrid> {
        if l == 0 || l > self.depth() {
            return Err(Error::Config(format!(
                "layer {l} not captured (model has layers 1..={})",
                self.depth()
            )));
        }
        Ok(&self.per_layer[l - 1])
    }

    pub fn layer_mut(&mut self, l: usize) -> Result<&mut TokenGrid> {
        self.layer(l)?;
        Ok(&mut self.per_layer[l - 1])
    }

    pub fn penultimate(&self) -> &TokenGrid {
        &self.per_layer[self.depth() - 2]
    }

    pub fn last(&self) -> &TokenGrid {
        &self.per_layer[self.depth() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x · σ(1.702 x)`, the reference CLIP release.
    QuickGelu,
    /// tanh-approximated GELU.
    Gelu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::QuickGelu => x / (1.0 + (-1.702 * x).exp()),
            Activation::Gelu => {
                let k = (2.0 / std::f32::consts::PI).sqrt();
                0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub output_dim: usize,
    pub ln_eps: f32,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn vit_b16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            width: 768,
            depth: 12,
            heads: 12,
            mlp_dim: 3072,
            output_dim: 512,
            ln_eps: 1e-5,
            activation: Activation::QuickGelu,
        }
    }

    /// A small model for tests and demos: 32×32 input, 4×4 patches, an 8×8 grid.
    pub fn toy(depth: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            width: 32,
            depth,
            heads: 4,
            mlp_dim: 64,
            output_dim: 16,
            ln_eps: 1e-5,
            activation: Activation::QuickGelu,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} not divisible into {} heads", self.width, self.heads));
        }
        if self.depth < 2 {
            return fail(format!("depth {} leaves no penultimate layer", self.depth));
        }
        if self.mlp_dim == 0 || self.output_dim == 0 {
            return fail("mlp and output widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn apply(&self, x: &Tensor2D, eps: f32) -> Result<Tensor2D> {
        layer_norm(x, &self.gain, &self.bias, eps)
    }
}

/// `y = x · Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor2D,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let mut y = x.matmul_t(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Tensor2D::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln_1: LayerNormParams,
    /// Stacked query/key/value projection, `3·width × width`.
    pub attn_in: Linear,
    pub attn_out: Linear,
    pub ln_2: LayerNormParams,
    pub mlp_fc: Linear,
    pub mlp_proj: Linear,
}

/// Per-head query/key/value projections of a token set.
#[derive(Debug, Clone)]
pub struct HeadProjections {
    pub q: Vec<Tensor2D>,
    pub k: Vec<Tensor2D>,
    pub v: Vec<Tensor2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    /// Flattened patch kernel, `width × (3·patch·patch)` in channel, row, column order.
    pub patch_embed: Tensor2D,
    pub class_embedding: Vec<f32>,
    /// `(1 + grid²) × width`; row 0 belongs to the class token.
    pub positional: Tensor2D,
    pub ln_pre: Option<LayerNormParams>,
    pub layers: Vec<EncoderLayer>,
    pub ln_post: LayerNormParams,
    /// `width × output_dim`, applied as `x · proj`.
    pub visual_proj: Tensor2D,
}

const META: [&str; 7] = [
    "meta.image_size",
    "meta.patch_size",
    "meta.width",
    "meta.depth",
    "meta.heads",
    "meta.mlp_dim",
    "meta.output_dim",
];

impl EncoderWeights {
    /// Loads every encoder tensor from a container written by the exporter.
    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let mut dims = [0usize; 7];
        for (slot, name) in dims.iter_mut().zip(META) {
            let v = c.scalar(name)?;
            if !(v >= 1.0) || v.fract() != 0.0 {
                return Err(Error::Format(format!("`{name}` = {v} is not a positive integer")));
            }
            *slot = v as usize;
        }
        let [image_size, patch_size, width, depth, heads, mlp_dim, output_dim] = dims;
        let ln_eps = if c.contains("meta.ln_eps") { c.scalar("meta.ln_eps")? } else { 1e-5 };
        let activation = match c.contains("meta.activation").then(|| c.scalar("meta.activation")) {
            None => Activation::QuickGelu,
            Some(v) => match v? {
                0.0 => Activation::QuickGelu,
                1.0 => Activation::Gelu,
                other => return Err(Error::Format(format!("unknown activation code {other}"))),
            },
        };
        let config = EncoderConfig {
            image_size,
            patch_size,
            width,
            depth,
            heads,
            mlp_dim,
            output_dim,
            ln_eps,
            activation,
        };
        config.validate()?;
        let g = config.grid_side();
        let ln = |prefix: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gain: c.vector(&format!("{prefix}.weight"), width)?,
                bias: c.vector(&format!("{prefix}.bias"), width)?,
            })
        };
        let linear = |prefix: &str, out: usize, inp: usize| -> Result<Linear> {
            Ok(Linear {
                weight: c.matrix(&format!("{prefix}.weight"), out, inp)?,
                bias: c.vector(&format!("{prefix}.bias"), out)?,
            })
        };
        let layers = (0..depth)
            .map(|l| {
                let p = format!("visual.layers.{l}");
                Ok(EncoderLayer {
                    ln_1: ln(&format!("{p}.ln_1"))?,
                    attn_in: linear(&format!("{p}.attn.in_proj"), 3 * width, width)?,
                    attn_out: linear(&format!("{p}.attn.out_proj"), width, width)?,
                    ln_2: ln(&format!("{p}.ln_2"))?,
                    mlp_fc: linear(&format!("{p}.mlp.c_fc"), mlp_dim, width)?,
                    mlp_proj: linear(&format!("{p}.mlp.c_proj"), width, mlp_dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = Self {
            patch_embed: c.matrix("visual.patch_embed.weight", width, 3 * patch_size * patch_size)?,
            class_embedding: c.vector("visual.class_embedding", width)?,
            positional: c.matrix("visual.positional_embedding", 1 + g * g, width)?,
            ln_pre: if c.contains("visual.ln_pre.weight") {
                Some(ln("visual.ln_pre")?)
            } else {
                None
            },
            layers,
            ln_post: ln("visual.ln_post")?,
            visual_proj: c.matrix("visual.proj", width, output_dim)?,
            config,
        };
        Ok(weights)
    }

    /// Serializes under the canonical names read by [`EncoderWeights::from_container`].
    pub fn to_container(&self) -> Result<TensorContainer> {
        let cfg = &self.config;
        let mut c = TensorContainer::new();
        let values = [
            cfg.image_size,
            cfg.patch_size,
            cfg.width,
            cfg.depth,
            cfg.heads,
            cfg.mlp_dim,
            cfg.output_dim,
        ];
        for (name, v) in META.iter().zip(values) {
            c.insert_scalar(*name, v as f32)?;
        }
        c.insert_scalar("meta.ln_eps", cfg.ln_eps)?;
        c.insert_scalar(
            "meta.activation",
            match cfg.activation {
                Activation::QuickGelu => 0.0,
                Activation::Gelu => 1.0,
            },
        )?;
        let p = cfg.patch_size;
        c.insert_f32(
            "visual.patch_embed.weight",
            &[cfg.width, 3, p, p],
            self.patch_embed.as_slice().to_vec(),
        )?;
        c.insert_f32("visual.class_embedding", &[cfg.width], self.class_embedding.clone())?;
        c.insert_matrix("visual.positional_embedding", &self.positional)?;
        let put_ln = |c: &mut TensorContainer, prefix: &str, ln: &LayerNormParams| -> Result<()> {
            c.insert_f32(format!("{prefix}.weight"), &[ln.gain.len()], ln.gain.clone())?;
            c.insert_f32(format!("{prefix}.bias"), &[ln.bias.len()], ln.bias.clone())
        };
        let put_linear = |c: &mut TensorContainer, prefix: &str, lin: &Linear| -> Result<()> {
            c.insert_matrix(format!("{prefix}.weight"), &lin.weight)?;
            c.insert_f32(format!("{prefix}.bias"), &[lin.bias.len()], lin.bias.clone())
        };
        if let Some(ln) = &self.ln_pre {
            put_ln(&mut c, "visual.ln_pre", ln)?;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("visual.layers.{l}");
            put_ln(&mut c, &format!("{p}.ln_1"), &layer.ln_1)?;
            put_linear(&mut c, &format!("{p}.attn.in_proj"), &layer.attn_in)?;
            put_linear(&mut c, &format!("{p}.attn.out_proj"), &layer.attn_out)?;
            put_ln(&mut c, &format!("{p}.ln_2"), &layer.ln_2)?;
            put_linear(&mut c, &format!("{p}.mlp.c_fc"), &layer.mlp_fc)?;
            put_linear(&mut c, &format!("{p}.mlp.c_proj"), &layer.mlp_proj)?;
        }
        put_ln(&mut c, "visual.ln_post", &self.ln_post)?;
        c.insert_matrix("visual.proj", &self.visual_proj)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&TensorContainer::read(path)?)
    }

    /// Seeded random weights, scaled like a freshly initialised transformer.
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, std: f32| -> Tensor2D {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            Tensor2D::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let w = config.width;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let g = config.grid_side();
        let patch_embed = normal(w, patch_dim, 1.0 / (patch_dim as f32).sqrt());
        let class_embedding = normal(1, w, 0.5).into_data();
        let positional = normal(1 + g * g, w, 0.5);
        let ln_pre = Some(LayerNormParams::identity(w));
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let inv_w = 1.0 / (w as f32).sqrt();
            layers.push(EncoderLayer {
                ln_1: LayerNormParams::identity(w),
                attn_in: Linear {
                    weight: normal(3 * w, w, inv_w),
                    bias: normal(1, 3 * w, 0.02).into_data(),
                },
                attn_out: Linear {
                    weight: normal(w, w, inv_w),
                    bias: normal(1, w, 0.02).into_data(),
                },
                ln_2: LayerNormParams::identity(w),
                mlp_fc: Linear {
                    weight: normal(config.mlp_dim, w, inv_w),
                    bias: normal(1, config.mlp_dim, 0.02).into_data(),
                },
                mlp_proj: Linear {
                    weight: normal(w, config.mlp_dim, 1.0 / (config.mlp_dim as f32).sqrt()),
                    bias: normal(1, w, 0.02).into_data(),
                },
            });
        }
        let visual_proj = normal(w, config.output_dim, 1.0 / (w as f32).sqrt());
        Ok(Self {
            patch_embed,
            class_embedding,
            positional,
            ln_pre,
            layers,
            ln_post: LayerNormParams::identity(w),
            visual_proj,
            config,
        })
    }

    /// Zeroes the attention-output and FFN-output projections of every layer,
    /// turning each layer into the identity on its input.
    pub fn with_residual_only(mut self) -> Self {
        let w = self.config.width;
        for layer in &mut self.layers {
            layer.attn_out = Linear::zeros(w, w);
            layer.mlp_proj = Linear::zeros(w, self.config.mlp_dim);
        }
        self
    }

    pub fn last_layer(&self) -> &EncoderLayer {
        self.layers.last().expect("validated depth >= 2")
    }

    /// Positional embeddings for an `h × w` patch grid, resampled bilinearly
    /// when the grid differs from the native one.
    fn positional_for(&self, h: usize, w: usize) -> Tensor2D {
        let g = self.config.grid_side();
        if h == g && w == g {
            return self.positional.clone();
        }
        let d = self.config.width;
        // channel-major grid for the resampler
        let mut planes = vec![0f32; d * g * g];
        for i in 0..g * g {
            for c in 0..d {
                planes[c * g * g + i] = self.positional.get(i + 1, c);
            }
        }
        let resized = resize_bilinear(&planes, d, g, g, h, w);
        Tensor2D::from_fn(1 + h * w, d, |r, c| {
            if r == 0 {
                self.positional.get(0, c)
            } else {
                resized[c * h * w + (r - 1)]
            }
        })
    }

    /// Patch embedding, class token and positions, then the optional pre-norm.
    pub fn embed(&self, image: &ImageTensor) -> Result<TokenGrid> {
        let p = self.config.patch_size;
        if image.height % p != 0 || image.width % p != 0 || image.height == 0 || image.width == 0 {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {p}x{p} patches",
                image.height, image.width
            )));
        }
        let (gh, gw) = (image.height / p, image.width / p);
        let patch_dim = 3 * p * p;
        let mut patches = Vec::with_capacity(gh * gw * patch_dim);
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            patches.push(image.at(c, py * p + y, px * p + x));
                        }
                    }
                }
            }
        }
        let patches = Tensor2D::new(gh * gw, patch_dim, patches)?;
        let embedded = patches.matmul_t(&self.patch_embed)?;
        let pos = self.positional_for(gh, gw);
        let d = self.config.width;
        let mut seq = Tensor2D::from_fn(1 + gh * gw, d, |r, c| {
            let base = if r == 0 { self.class_embedding[c] } else { embedded.get(r - 1, c) };
            base + pos.get(r, c)
        });
        if let Some(ln) = &self.ln_pre {
            seq = ln.apply(&seq, self.config.ln_eps)?;
        }
        Ok(TokenGrid::from_sequence(gh, gw, &seq))
    }

    /// Query/key/value projections of `LN1(x)` split per head.
    pub fn head_projections(&self, layer: &EncoderLayer, x: &Tensor2D) -> Result<HeadProjections> {
        let normed = layer.ln_1.apply(x, self.config.ln_eps)?;
        let qkv = layer.attn_in.forward(&normed)?;
        let (w, heads, dh) = (self.config.width, self.config.heads, self.config.head_dim());
        let split = |offset: usize| -> Vec<Tensor2D> {
            (0..heads).map(|h| qkv.column_block(offset + h * dh, dh)).collect()
        };
        Ok(HeadProjections {
            q: split(0),
            k: split(w),
            v: split(2 * w),
        })
    }

    /// One standard encoder layer over a full token sequence.
    pub fn apply_layer(&self, layer: &EncoderLayer, x: &Tensor2D) -> Result<Tensor2D> {
        let proj = self.head_projections(layer, x)?;
        let scale = 1.0 / (self.config.head_dim() as f32).sqrt();
        let weights = proj
            .q
            .iter()
            .zip(&proj.k)
            .map(|(q, k)| row_softmax(&q.matmul_t(k)?.scale(scale), 1.0))
            .collect::<Result<Vec<_>>>()?;
        let attn = self.attend(layer, &weights, &proj.v)?;
        let z = x.add(&attn)?;
        z.add(&self.feed_forward(layer, &z)?)
    }

    /// `OutProj(concat_h(attn_h · V_h))`.
    fn attend(&self, layer: &EncoderLayer, weights: &[Tensor2D], v: &[Tensor2D]) -> Result<Tensor2D> {
        let n = v[0].rows();
        let dh = self.config.head_dim();
        let mut merged = Tensor2D::zeros(n, self.config.width);
        for (h, vh) in v.iter().enumerate() {
            let a = &weights[h.min(weights.len() - 1)];
            if a.shape() != (n, n) {
                return Err(Error::Shape(format!(
                    "attention weights {}x{} for {n} tokens",
                    a.rows(),
                    a.cols()
                )));
            }
            let out = a.matmul(vh)?;
            for r in 0..n {
                merged.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(out.row(r));
            }
        }
        layer.attn_out.forward(&merged)
    }

    fn feed_forward(&self, layer: &EncoderLayer, z: &Tensor2D) -> Result<Tensor2D> {
        let normed = layer.ln_2.apply(z, self.config.ln_eps)?;
        let hidden = layer.mlp_fc.forward(&normed)?;
        let act = self.config.activation;
        let hidden = Tensor2D::from_fn(hidden.rows(), hidden.cols(), |r, c| act.apply(hidden.get(r, c)));
        layer.mlp_proj.forward(&hidden)
    }

    /// `VisualProj(FinalLN(x))` on patch tokens and, when present, the class token.
    pub fn output_head(&self, x: &TokenGrid) -> Result<TokenGrid> {
        let head = |m: &Tensor2D| -> Result<Tensor2D> {
            self.ln_post.apply(m, self.config.ln_eps)?.matmul(&self.visual_proj)
        };
        let tokens = head(&x.tokens)?;
        let cls = match &x.cls {
            Some(c) => Some(head(&Tensor2D::new(1, c.len(), c.clone())?)?.into_data()),
            None => None,
        };
        TokenGrid::new(x.h, x.w, tokens, cls)
    }
}

/// Runs every standard layer and captures each layer's residual output.
pub fn encode_all_layers(image: &ImageTensor, weights: &EncoderWeights) -> Result<LayerStack> {
    let embedding = weights.embed(image)?;
    let (h, w) = (embedding.h, embedding.w);
    let mut seq = embedding.to_sequence();
    let mut per_layer = Vec::with_capacity(weights.layers.len());
    for layer in &weights.layers {
        seq = weights.apply_layer(layer, &seq)?;
        per_layer.push(TokenGrid::from_sequence(h, w, &seq));
    }
    Ok(LayerStack { embedding, per_layer })
}

/// The calibrated last layer: `VisualProj(FinalLN(OutProj(attn · V(LN1(x)))))`.
///
/// Attention runs over patch tokens only, with no residual branch and no FFN.
/// The class token skips the attention and goes straight through the output head.
pub fn modified_last_layer(
    x: &TokenGrid,
    weights: &EncoderWeights,
    attn: &AttentionWeights,
) -> Result<TokenGrid> {
    let mixed = last_layer_mix(x, weights, attn)?;
    weights.output_head(&TokenGrid::new(x.h, x.w, mixed, x.cls.clone())?)
}

/// `OutProj(attn · V(LN1(x)))` for the patch tokens of `x`.
pub fn last_layer_mix(x: &TokenGrid, weights: &EncoderWeights, attn: &AttentionWeights) -> Result<Tensor2D> {
    check_attention(x, weights, attn)?;
    let layer = weights.last_layer();
    let proj = weights.head_projections(layer, &x.tokens)?;
    weights.attend(layer, attn.heads(), &proj.v)
}

/// The last layer with externally supplied attention but the residual and
/// FFN branches kept, followed by the output head.
pub fn residual_last_layer(
    x: &TokenGrid,
    weights: &EncoderWeights,
    attn: &AttentionWeights,
) -> Result<TokenGrid> {
    check_attention(x, weights, attn)?;
    let layer = weights.last_layer();
    let proj = weights.head_projections(layer, &x.tokens)?;
    let z = x.tokens.add(&weights.attend(layer, attn.heads(), &proj.v)?)?;
    let out = z.add(&weights.feed_forward(layer, &z)?)?;
    weights.output_head(&TokenGrid::new(x.h, x.w, out, x.cls.clone())?)
}

fn check_attention(x: &TokenGrid, weights: &EncoderWeights, attn: &AttentionWeights) -> Result<()> {
    let n = x.n();
    let heads = attn.heads().len();
    if heads != 1 && heads != weights.config.heads {
        return Err(Error::Shape(format!(
            "{heads} attention matrices for a {}-head layer",
            weights.config.heads
        )));
    }
    if let Some(bad) = attn.heads().iter().find(|a| a.shape() != (n, n)) {
        return Err(Error::Shape(format!(
            "attention weights {}x{} for {n} patch tokens",
            bad.rows(),
            bad.cols()
        )));
    }
    if x.dim() != weights.config.width {
        return Err(Error::Shape(format!(
            "token width {} for a width-{} encoder",
            x.dim(),
            weights.config.width
        )));
    }
    Ok(())
}

/// How the last layer forms its attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttentionKind {
    /// `softmax(QKᵀ)`.
    QkBaseline,
    /// `softmax(QQᵀ) + softmax(KKᵀ)`.
    QqPlusKk,
    /// `softmax(KKᵀ)`.
    KkOnly,
    /// `softmax(Simi)`.
    SimiOnly,
    /// `softmax(KKᵀ) + softmax(Simi)`.
    KkPlusSimi,
}

impl AttentionKind {
    pub fn uses_similarity(self) -> bool {
        matches!(self, AttentionKind::SimiOnly | AttentionKind::KkPlusSimi)
    }

    pub fn row_mass(self) -> f32 {
        match self {
            AttentionKind::QqPlusKk | AttentionKind::KkPlusSimi => 2.0,
            _ => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::QkBaseline => "QK_BASELINE",
            AttentionKind::QqPlusKk => "QQ_PLUS_KK",
            AttentionKind::KkOnly => "KK_ONLY",
            AttentionKind::SimiOnly => "SIMI_ONLY",
            AttentionKind::KkPlusSimi => "KK_PLUS_SIMI",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "QK_BASELINE" => AttentionKind::QkBaseline,
            "QQ_PLUS_KK" => AttentionKind::QqPlusKk,
            "KK_ONLY" => AttentionKind::KkOnly,
            "SIMI_ONLY" => AttentionKind::SimiOnly,
            "KK_PLUS_SIMI" => AttentionKind::KkPlusSimi,
            _ => return Err(Error::Parameter(format!("unknown attention mode `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionMode {
    pub kind: AttentionKind,
    /// Scale Q/K logits by `1/√d_head` (self-self modes included).
    pub scale_qk: bool,
    pub simi_temperature: f32,
}

impl Default for AttentionMode {
    fn default() -> Self {
        Self {
            kind: AttentionKind::KkPlusSimi,
            scale_qk: true,
            simi_temperature: 1.0,
        }
    }
}

impl AttentionMode {
    pub fn new(kind: AttentionKind) -> Self {
        Self { kind, ..Self::default() }
    }
}
