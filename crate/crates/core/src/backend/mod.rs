//! Contracts a diffusion backend must satisfy, plus the bundled toy backend.
//!
//! A backend exposes a noise-predicting denoiser whose cross-attention keys
//! and values can be partially replaced ("overridden") per layer, the text
//! side that produces those keys and values, a latent image codec and the
//! gradient of the denoising loss with respect to the overrides. Embedding
//! and perceptual feature providers are separate traits because metrics and
//! the initializer only need those.

pub mod attention;
pub mod registry;
mod toy;
mod toy_embed;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use registry::{backend_from_id, DEFAULT_BACKEND_ID};
pub use toy::ToyBackend;
pub use toy_embed::{ToyEmbedder, ToyPerceptual};

/// Latent tensor laid out as `channels × height × width`.
pub type Latent = Array3<f64>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShapeSpec {
    pub layer_index: usize,
    pub feature_dim: usize,
    /// Dimension under the square root in the attention softmax scaling.
    pub attn_scale_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub latent_shape: (usize, usize, usize),
    /// Pixel resolution (width, height) accepted by the image codec.
    pub image_resolution: (usize, usize),
    pub train_timesteps: usize,
    pub attention_layers: Vec<LayerShapeSpec>,
    pub max_tokens: usize,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.latent_shape;
        if self.attention_layers.is_empty() {
            return Err(Error::InvalidArgument("descriptor has no attention layers".into()));
        }
        if c == 0 || h == 0 || w == 0 || self.image_resolution.0 == 0 || self.image_resolution.1 == 0 {
            return Err(Error::InvalidArgument("descriptor dimensions must be positive".into()));
        }
        if self.train_timesteps < 2 {
            return Err(Error::InvalidArgument("train_timesteps must be at least 2".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be at least 1".into()));
        }
        for (i, layer) in self.attention_layers.iter().enumerate() {
            if layer.layer_index != i {
                return Err(Error::InvalidArgument(format!(
                    "attention layer at position {i} has index {}",
                    layer.layer_index
                )));
            }
            if layer.feature_dim == 0 || layer.attn_scale_dim == 0 {
                return Err(Error::InvalidArgument(format!("attention layer {i} has a zero dimension")));
            }
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.attention_layers.iter().map(|l| l.feature_dim).collect()
    }

    pub fn check_latent(&self, latent: &Latent, what: &str) -> Result<()> {
        if latent.dim() != self.latent_shape {
            return Err(Error::Shape(format!(
                "{what}: expected latent shape {:?}, got {:?}",
                self.latent_shape,
                latent.dim()
            )));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{what}: latent has non-finite entries")));
        }
        Ok(())
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.train_timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                train_timesteps: self.train_timesteps,
            });
        }
        Ok(())
    }
}

/// A noisy latent at a discrete training timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub data: Latent,
    pub timestep: usize,
}

/// Token ids padded to the backend's full instruction length.
///
/// Only the first `content_len` ids carry instruction content; the rest are
/// the backend's padding id. Sentinel tokens are never part of the sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    content_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, content_len: usize) -> Result<Self> {
        if content_len > ids.len() {
            return Err(Error::InvalidArgument(format!(
                "content length {content_len} exceeds sequence length {}",
                ids.len()
            )));
        }
        Ok(Self { ids, content_len })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn content_len(&self) -> usize {
        self.content_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content_len == 0
    }
}

/// Keys and values for one attention layer, each `rows × feature_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

impl KvPair {
    pub fn rows(&self) -> usize {
        self.keys.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            keys: Array2::zeros(self.keys.raw_dim()),
            values: Array2::zeros(self.values.raw_dim()),
        }
    }

    /// The first `m` rows of keys and values.
    pub fn leading_rows(&self, m: usize) -> Self {
        Self {
            keys: self.keys.slice(ndarray::s![..m, ..]).to_owned(),
            values: self.values.slice(ndarray::s![..m, ..]).to_owned(),
        }
    }
}

/// Everything the denoiser conditions on besides the noisy latent.
#[derive(Debug, Clone, Copy)]
pub struct ConditioningBundle<'a> {
    pub image_latent: &'a Latent,
    pub instruction: &'a TokenSequence,
    /// One entry per attention layer; replaces the first `m` key/value rows.
    pub kv_overrides: Option<&'a [KvPair]>,
}

impl ConditioningBundle<'_> {
    pub fn validate(&self, descriptor: &BackendDescriptor) -> Result<()> {
        descriptor.check_latent(self.image_latent, "image conditioning")?;
        if self.instruction.len() != descriptor.max_tokens {
            return Err(Error::Shape(format!(
                "instruction has {} token slots, backend expects {}",
                self.instruction.len(),
                descriptor.max_tokens
            )));
        }
        let Some(overrides) = self.kv_overrides else {
            return Ok(());
        };
        if overrides.len() != descriptor.attention_layers.len() {
            return Err(Error::Shape(format!(
                "{} override blocks for {} attention layers",
                overrides.len(),
                descriptor.attention_layers.len()
            )));
        }
        let m = overrides[0].rows();
        if m == 0 || m > descriptor.max_tokens {
            return Err(Error::Shape(format!(
                "override row count {m} outside 1..={}",
                descriptor.max_tokens
            )));
        }
        for (layer, (block, spec)) in overrides.iter().zip(&descriptor.attention_layers).enumerate() {
            let expected = (m, spec.feature_dim);
            if block.keys.dim() != expected || block.values.dim() != expected {
                return Err(Error::Shape(format!(
                    "override for layer {layer}: keys {:?} / values {:?}, expected {expected:?}",
                    block.keys.dim(),
                    block.values.dim()
                )));
            }
            if block.keys.iter().chain(block.values.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "override for layer {layer} has non-finite entries"
                )));
            }
        }
        Ok(())
    }
}

/// Inputs of the scalar denoising loss `mean((target_noise - prediction)^2)`.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub state: &'a LatentState,
    pub cond: ConditioningBundle<'a>,
    pub target_noise: &'a Latent,
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub prediction: Latent,
    /// Gradient of the loss for each override block, same shapes as the overrides.
    pub overrides: Vec<KvPair>,
}

/// A diffusion denoiser with interceptable cross-attention.
///
/// Implementations are immutable after construction and must be safe for
/// concurrent read-only use.
pub trait DiffusionBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Tokenizes instruction text; errors when the text has no content tokens
    /// or more than `max_tokens`.
    fn tokenize(&self, text: &str) -> Result<TokenSequence>;

    /// The designated empty instruction: padding only.
    fn empty_instruction(&self) -> TokenSequence;

    /// The backend's own projected keys/values for an instruction, `max_tokens × d_layer`.
    fn text_kv(&self, tokens: &TokenSequence, layer: usize) -> Result<KvPair>;

    fn encode_image(&self, image: &Image) -> Result<Latent>;

    fn decode_latent(&self, latent: &Latent) -> Result<Image>;

    /// Cumulative signal fraction at discrete timestep `t`.
    fn alpha_bar(&self, t: usize) -> f64;

    fn predict_noise(&self, state: &LatentState, cond: &ConditioningBundle<'_>) -> Result<Latent>;

    /// Loss value and its gradient with respect to every override block in
    /// `ctx.cond.kv_overrides`, which must be present.
    fn grad_wrt_overrides(&self, ctx: &LossContext<'_>) -> Result<LossGradient>;

    /// Digest of every frozen parameter; changes iff the parameters change.
    fn parameter_digest(&self) -> u32;

    /// Noise level of timestep `t` in the variance-exploding parameterization.
    fn sigma(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ((1.0 - ab) / ab).sqrt()
    }

    fn sigma_min(&self) -> f64 {
        self.sigma(0)
    }

    fn sigma_max(&self) -> f64 {
        self.sigma(self.descriptor().train_timesteps - 1)
    }

    /// Forward noising `sqrt(ab) * clean + sqrt(1 - ab) * noise`.
    fn add_noise(&self, clean: &Latent, noise: &Latent, t: usize) -> Result<LatentState> {
        let desc = self.descriptor();
        desc.check_timestep(t)?;
        desc.check_latent(clean, "clean latent")?;
        desc.check_latent(noise, "noise")?;
        let ab = self.alpha_bar(t);
        let data = clean * ab.sqrt() + noise * (1.0 - ab).sqrt();
        Ok(LatentState { data, timestep: t })
    }

    /// All layers' keys/values for an instruction.
    fn instruction_kv(&self, tokens: &TokenSequence) -> Result<Vec<KvPair>> {
        (0..self.descriptor().attention_layers.len())
            .map(|layer| self.text_kv(tokens, layer))
            .collect()
    }
}

/// Joint text/image embedding space (CLIP-like).
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Unit-norm text embedding.
    fn embed_text(&self, phrase: &str) -> Result<Vec<f64>>;

    /// Unit-norm image embedding.
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Multi-stage feature extractor used by LPIPS.
pub trait PerceptualFeatures: Send + Sync {
    /// Per-stage `channels × height × width` feature maps.
    fn features(&self, image: &Image) -> Result<Vec<Array3<f64>>>;

    /// Optional calibrated per-stage channel weights; `None` means uniform.
    fn stage_weights(&self) -> Option<Vec<Vec<f64>>> {
        None
    }
}

impl<T: DiffusionBackend + ?Sized> DiffusionBackend for Box<T> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }
    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        (**self).tokenize(text)
    }
    fn empty_instruction(&self) -> TokenSequence {
        (**self).empty_instruction()
    }
    fn text_kv(&self, tokens: &TokenSequence, layer: usize) -> Result<KvPair> {
        (**self).text_kv(tokens, layer)
    }
    fn encode_image(&self, image: &Image) -> Result<Latent> {
        (**self).encode_image(image)
    }
    fn decode_latent(&self, latent: &Latent) -> Result<Image> {
        (**self).decode_latent(latent)
    }
    fn alpha_bar(&self, t: usize) -> f64 {
        (**self).alpha_bar(t)
    }
    fn predict_noise(&self, state: &LatentState, cond: &ConditioningBundle<'_>) -> Result<Latent> {
        (**self).predict_noise(state, cond)
    }
    fn grad_wrt_overrides(&self, ctx: &LossContext<'_>) -> Result<LossGradient> {
        (**self).grad_wrt_overrides(ctx)
    }
    fn parameter_digest(&self) -> u32 {
        (**self).parameter_digest()
    }
}
