//! Small deterministic backend for desk-scale runs and tests.
//!
//! The denoiser predicts the clean latent as the image conditioning plus an
//! offset read out of two cross-attention layers whose queries depend on the
//! image conditioning, the noisy latent and the timestep:
//!
//! ```text
//! u_p   = [c_p, z_p, temb(t)]
//! h0    = tanh(U W_in + b_in)                   P × 16
//! o0    = attn(h0 Wq0, K0, V0)                  P × 16
//! h1    = tanh((h0 + o0) W_mid + b_mid)         P × 32
//! o1    = attn(h1 Wq1, K1, V1)                  P × 32
//! x0    = C + o0 Wout0 + o1 Wout1               P × 4
//! eps   = (z - sqrt(ab) x0) / sqrt(1 - ab)
//! ```
//!
//! Text keys/values are linear projections of a word-hash token embedding;
//! the padding embedding is zero, so the empty instruction contributes zero
//! keys and values.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::attention::{cross_attention, cross_attention_backward};
use super::{
    BackendDescriptor, ConditioningBundle, DiffusionBackend, KvPair, LayerShapeSpec, Latent,
    LatentState, LossContext, LossGradient, TokenSequence,
};
use crate::error::{Error, Result};
use crate::image::Image;

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = 8;
pub const IMAGE_SIZE: usize = 16;
pub const TRAIN_TIMESTEPS: usize = 1000;
pub const MAX_TOKENS: usize = 16;
pub const LAYER_DIMS: [usize; 2] = [16, 32];

const VOCAB_SIZE: usize = 512;
const TOKEN_DIM: usize = 12;
const TIME_DIM: usize = 4;
const INPUT_DIM: usize = 2 * LATENT_CHANNELS + TIME_DIM;
const PAD_ID: u32 = 0;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;

#[derive(Debug, Clone)]
struct LayerWeights {
    key_proj: Array2<f64>,
    value_proj: Array2<f64>,
    query_proj: Array2<f64>,
    out_proj: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    descriptor: BackendDescriptor,
    token_embedding: Array2<f64>,
    w_in: Array2<f64>,
    b_in: Array1<f64>,
    w_mid: Array2<f64>,
    b_mid: Array1<f64>,
    layers: Vec<LayerWeights>,
    alpha_bars: Vec<f64>,
}

/// Saved activations of one forward pass.
struct Forward {
    x0: Array2<f64>,
    h1: Array2<f64>,
    q: [Array2<f64>; 2],
    kv: Vec<KvPair>,
    weights: [Array2<f64>; 2],
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn time_embedding(t: usize) -> [f64; TIME_DIM] {
    let tau = t as f64 / TRAIN_TIMESTEPS as f64 * std::f64::consts::PI;
    [tau.sin(), tau.cos(), (2.0 * tau).sin(), (2.0 * tau).cos()]
}

/// `C × H × W` latent to `(H·W) × C` position rows.
fn to_rows(latent: &Latent) -> Array2<f64> {
    let (c, h, w) = latent.dim();
    latent
        .view()
        .into_shape_with_order((c, h * w))
        .expect("contiguous latent")
        .t()
        .to_owned()
}

fn from_rows(rows: &Array2<f64>, shape: (usize, usize, usize)) -> Latent {
    let (c, h, w) = shape;
    let mut out = Array3::zeros(shape);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = rows[[y * w + x, ch]];
            }
        }
    }
    out
}

impl ToyBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut token_embedding = normal_matrix(&mut rng, VOCAB_SIZE, TOKEN_DIM, 1.0);
        token_embedding.row_mut(PAD_ID as usize).fill(0.0);

        let [d0, d1] = LAYER_DIMS;
        let w_in = normal_matrix(&mut rng, INPUT_DIM, d0, 1.0 / (INPUT_DIM as f64).sqrt());
        let b_in = normal_matrix(&mut rng, 1, d0, 0.1).remove_axis(Axis(0));
        let w_mid = normal_matrix(&mut rng, d0, d1, 1.0 / (d0 as f64).sqrt());
        let b_mid = normal_matrix(&mut rng, 1, d1, 0.1).remove_axis(Axis(0));
        let layers = LAYER_DIMS
            .iter()
            .map(|&d| LayerWeights {
                key_proj: normal_matrix(&mut rng, TOKEN_DIM, d, 1.0 / (TOKEN_DIM as f64).sqrt()),
                value_proj: normal_matrix(&mut rng, TOKEN_DIM, d, 1.0 / (TOKEN_DIM as f64).sqrt()),
                query_proj: normal_matrix(&mut rng, d, d, 2.0 / (d as f64).sqrt()),
                out_proj: normal_matrix(&mut rng, d, LATENT_CHANNELS, 3.0 / (d as f64).sqrt()),
            })
            .collect();

        let (lo, hi) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut alpha_bars = Vec::with_capacity(TRAIN_TIMESTEPS);
        let mut acc = 1.0;
        for i in 0..TRAIN_TIMESTEPS {
            let beta = (lo + (hi - lo) * i as f64 / (TRAIN_TIMESTEPS - 1) as f64).powi(2);
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }

        let descriptor = BackendDescriptor {
            backend_id: format!("toy:{seed}"),
            latent_shape: (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE),
            image_resolution: (IMAGE_SIZE, IMAGE_SIZE),
            train_timesteps: TRAIN_TIMESTEPS,
            attention_layers: LAYER_DIMS
                .iter()
                .enumerate()
                .map(|(i, &d)| LayerShapeSpec {
                    layer_index: i,
                    feature_dim: d,
                    attn_scale_dim: d,
                })
                .collect(),
            max_tokens: MAX_TOKENS,
        };
        Self {
            descriptor,
            token_embedding,
            w_in,
            b_in,
            w_mid,
            b_mid,
            layers,
            alpha_bars,
        }
    }

    fn check_inputs(&self, state: &LatentState, cond: &ConditioningBundle<'_>) -> Result<()> {
        self.descriptor.check_timestep(state.timestep)?;
        self.descriptor.check_latent(&state.data, "noisy latent")?;
        cond.validate(&self.descriptor)
    }

    /// Instruction keys/values with the leading rows replaced by the overrides.
    fn effective_kv(&self, cond: &ConditioningBundle<'_>) -> Result<Vec<KvPair>> {
        let mut kv = self.instruction_kv(cond.instruction)?;
        if let Some(overrides) = cond.kv_overrides {
            for (layer, block) in kv.iter_mut().zip(overrides) {
                let m = block.rows();
                layer.keys.slice_mut(s![..m, ..]).assign(&block.keys);
                layer.values.slice_mut(s![..m, ..]).assign(&block.values);
            }
        }
        Ok(kv)
    }

    fn forward(&self, state: &LatentState, cond: &ConditioningBundle<'_>) -> Result<Forward> {
        let cond_rows = to_rows(cond.image_latent);
        let z_rows = to_rows(&state.data);
        let positions = cond_rows.nrows();
        let temb = time_embedding(state.timestep);
        let mut inputs = Array2::zeros((positions, INPUT_DIM));
        inputs.slice_mut(s![.., ..LATENT_CHANNELS]).assign(&cond_rows);
        inputs.slice_mut(s![.., LATENT_CHANNELS..2 * LATENT_CHANNELS]).assign(&z_rows);
        for mut row in inputs.axis_iter_mut(Axis(0)) {
            for (k, &v) in temb.iter().enumerate() {
                row[2 * LATENT_CHANNELS + k] = v;
            }
        }

        let kv = self.effective_kv(cond)?;
        let specs = &self.descriptor.attention_layers;

        let h0 = (inputs.dot(&self.w_in) + &self.b_in).mapv(f64::tanh);
        let q0 = h0.dot(&self.layers[0].query_proj);
        let (o0, a0) = cross_attention(&q0, &kv[0].keys, &kv[0].values, specs[0].attn_scale_dim);
        let h1 = ((&h0 + &o0).dot(&self.w_mid) + &self.b_mid).mapv(f64::tanh);
        let q1 = h1.dot(&self.layers[1].query_proj);
        let (o1, a1) = cross_attention(&q1, &kv[1].keys, &kv[1].values, specs[1].attn_scale_dim);

        let x0 = cond_rows + o0.dot(&self.layers[0].out_proj) + o1.dot(&self.layers[1].out_proj);
        Ok(Forward {
            x0,
            h1,
            q: [q0, q1],
            kv,
            weights: [a0, a1],
        })
    }

    fn noise_from_x0(&self, z: &Latent, x0_rows: &Array2<f64>, t: usize) -> Latent {
        let ab = self.alpha_bars[t];
        let x0 = from_rows(x0_rows, self.descriptor.latent_shape);
        (z - &(x0 * ab.sqrt())) / (1.0 - ab).sqrt()
    }
}

impl DiffusionBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut ids: Vec<u32> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| {
                let word = w.to_lowercase();
                1 + (fnv1a(word.as_bytes()) % (VOCAB_SIZE as u64 - 1)) as u32
            })
            .collect();
        let count = ids.len();
        if count == 0 || count > MAX_TOKENS {
            return Err(Error::TokenCount { count, max: MAX_TOKENS });
        }
        ids.resize(MAX_TOKENS, PAD_ID);
        TokenSequence::new(ids, count)
    }

    fn empty_instruction(&self) -> TokenSequence {
        TokenSequence::new(vec![PAD_ID; MAX_TOKENS], 0).expect("padding sequence")
    }

    fn text_kv(&self, tokens: &TokenSequence, layer: usize) -> Result<KvPair> {
        let weights = self.layers.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("layer {layer} out of range (backend has {})", self.layers.len()))
        })?;
        if tokens.len() != MAX_TOKENS {
            return Err(Error::Shape(format!(
                "instruction has {} token slots, backend expects {MAX_TOKENS}",
                tokens.len()
            )));
        }
        let mut emb = Array2::zeros((MAX_TOKENS, TOKEN_DIM));
        for (row, &id) in tokens.ids().iter().enumerate() {
            let id = id as usize;
            if id >= VOCAB_SIZE {
                return Err(Error::InvalidArgument(format!("token id {id} outside vocabulary")));
            }
            emb.row_mut(row).assign(&self.token_embedding.row(id));
        }
        Ok(KvPair {
            keys: emb.dot(&weights.key_proj),
            values: emb.dot(&weights.value_proj),
        })
    }

    /// Averages 2×2 pixel blocks, maps RGB to `[-1, 1]` and appends a luma channel.
    fn encode_image(&self, image: &Image) -> Result<Latent> {
        if (image.width(), image.height()) != self.descriptor.image_resolution {
            return Err(Error::Shape(format!(
                "toy codec expects {IMAGE_SIZE}×{IMAGE_SIZE} images, got {}×{}",
                image.width(),
                image.height()
            )));
        }
        let mut latent = Array3::zeros(self.descriptor.latent_shape);
        for y in 0..LATENT_SIZE {
            for x in 0..LATENT_SIZE {
                let mut rgb = [0.0; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    let sum = image.get(2 * x, 2 * y, c)
                        + image.get(2 * x + 1, 2 * y, c)
                        + image.get(2 * x, 2 * y + 1, c)
                        + image.get(2 * x + 1, 2 * y + 1, c);
                    *v = 2.0 * (sum / 4.0) - 1.0;
                    latent[[c, y, x]] = *v;
                }
                latent[[3, y, x]] = crate::image::LUMA_WEIGHTS
                    .iter()
                    .zip(rgb)
                    .map(|(w, v)| w * v)
                    .sum::<f64>();
            }
        }
        Ok(latent)
    }

    /// Reads the RGB channels back, upsamples 2× (nearest) and clamps to `[0, 1]`.
    fn decode_latent(&self, latent: &Latent) -> Result<Image> {
        self.descriptor.check_latent(latent, "decode")?;
        Ok(Image::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y, c| {
            ((latent[[c, y / 2, x / 2]] + 1.0) / 2.0).clamp(0.0, 1.0)
        }))
    }

    fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t.min(TRAIN_TIMESTEPS - 1)]
    }

    fn predict_noise(&self, state: &LatentState, cond: &ConditioningBundle<'_>) -> Result<Latent> {
        self.check_inputs(state, cond)?;
        let fwd = self.forward(state, cond)?;
        Ok(self.noise_from_x0(&state.data, &fwd.x0, state.timestep))
    }

    fn grad_wrt_overrides(&self, ctx: &LossContext<'_>) -> Result<LossGradient> {
        let LossContext { state, cond, target_noise } = *ctx;
        self.check_inputs(state, &cond)?;
        self.descriptor.check_latent(target_noise, "target noise")?;
        let overrides = cond.kv_overrides.ok_or_else(|| {
            Error::InvalidArgument("loss gradient requested without key/value overrides".into())
        })?;
        let m = overrides[0].rows();

        let fwd = self.forward(state, &cond)?;
        let prediction = self.noise_from_x0(&state.data, &fwd.x0, state.timestep);
        let residual = &prediction - target_noise;
        let n = residual.len() as f64;
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / n;

        // d loss / d x0 = -sqrt(ab / (1 - ab)) * 2 (pred - target) / N
        let ab = self.alpha_bars[state.timestep];
        let d_x0 = to_rows(&residual) * (-2.0 / n * (ab / (1.0 - ab)).sqrt());

        let specs = &self.descriptor.attention_layers;
        let d_o1 = d_x0.dot(&self.layers[1].out_proj.t());
        let g1 = cross_attention_backward(
            &fwd.q[1],
            &fwd.kv[1].keys,
            &fwd.kv[1].values,
            &fwd.weights[1],
            &d_o1,
            specs[1].attn_scale_dim,
        );
        let d_h1 = g1.queries.dot(&self.layers[1].query_proj.t());
        let d_pre1 = d_h1 * &fwd.h1.mapv(|h| 1.0 - h * h);
        let d_o0 = d_x0.dot(&self.layers[0].out_proj.t()) + d_pre1.dot(&self.w_mid.t());
        let g0 = cross_attention_backward(
            &fwd.q[0],
            &fwd.kv[0].keys,
            &fwd.kv[0].values,
            &fwd.weights[0],
            &d_o0,
            specs[0].attn_scale_dim,
        );

        let grads = [g0, g1]
            .into_iter()
            .map(|g| KvPair {
                keys: g.keys.slice(s![..m, ..]).to_owned(),
                values: g.values.slice(s![..m, ..]).to_owned(),
            })
            .collect();
        Ok(LossGradient {
            loss,
            prediction,
            overrides: grads,
        })
    }

    fn parameter_digest(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        let mut feed = |values: &mut dyn Iterator<Item = &f64>| {
            for v in values {
                hasher.update(&v.to_le_bytes());
            }
        };
        feed(&mut self.token_embedding.iter());
        feed(&mut self.w_in.iter());
        feed(&mut self.b_in.iter());
        feed(&mut self.w_mid.iter());
        feed(&mut self.b_mid.iter());
        for layer in &self.layers {
            feed(&mut layer.key_proj.iter());
            feed(&mut layer.value_proj.iter());
            feed(&mut layer.query_proj.iter());
            feed(&mut layer.out_proj.iter());
        }
        feed(&mut self.alpha_bars.iter());
        hasher.finalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_latent(seed: u64) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE), || {
            StandardNormal.sample(&mut rng)
        })
    }

    #[test]
    fn descriptor_matches_toy_configuration() {
        let backend = ToyBackend::new(0);
        let desc = backend.descriptor();
        desc.validate().unwrap();
        assert_eq!(desc.train_timesteps, 1000);
        assert_eq!(desc.latent_shape, (4, 8, 8));
        assert_eq!(desc.layer_dims(), vec![16, 32]);
    }

    #[test]
    fn same_seed_is_bitwise_deterministic() {
        let (a, b) = (ToyBackend::new(0), ToyBackend::new(0));
        let tokens = a.tokenize("turn it into a watercolor painting").unwrap();
        let (z, c) = (random_latent(1), random_latent(2));
        let state = LatentState { data: z, timestep: 417 };
        let cond = ConditioningBundle {
            image_latent: &c,
            instruction: &tokens,
            kv_overrides: None,
        };
        assert_eq!(a.predict_noise(&state, &cond).unwrap(), b.predict_noise(&state, &cond).unwrap());
        assert_eq!(a.parameter_digest(), b.parameter_digest());
        assert_ne!(a.parameter_digest(), ToyBackend::new(1).parameter_digest());
    }

    #[test]
    fn text_kv_has_full_token_rows() {
        let backend = ToyBackend::new(0);
        let tokens = backend.tokenize("a photo of a cat").unwrap();
        assert_eq!(tokens.content_len(), 5);
        let kv = backend.text_kv(&tokens, 0).unwrap();
        assert_eq!(kv.keys.dim(), (MAX_TOKENS, 16));
        assert_eq!(backend.text_kv(&tokens, 1).unwrap().values.dim(), (MAX_TOKENS, 32));
        assert!(backend.text_kv(&tokens, 2).is_err());
    }

    #[test]
    fn empty_instruction_projects_to_zero() {
        let backend = ToyBackend::new(3);
        let kv = backend.text_kv(&backend.empty_instruction(), 1).unwrap();
        assert!(kv.keys.iter().chain(kv.values.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn tokenizer_rejects_empty_and_overlong_text() {
        let backend = ToyBackend::new(0);
        assert!(matches!(backend.tokenize("  ,. "), Err(Error::TokenCount { count: 0, .. })));
        let long = vec!["word"; MAX_TOKENS + 1].join(" ");
        assert!(backend.tokenize(&long).is_err());
    }

    #[test]
    fn codec_round_trips_block_images() {
        let backend = ToyBackend::new(0);
        let img = Image::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y, c| {
            ((x / 2 * 37 + y / 2 * 11 + c * 71) % 256) as f64 / 255.0
        });
        let back = backend.decode_latent(&backend.encode_image(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_override_shape_names_the_layer() {
        let backend = ToyBackend::new(0);
        let tokens = backend.empty_instruction();
        let c = random_latent(0);
        let bad = vec![
            KvPair { keys: Array2::zeros((3, 16)), values: Array2::zeros((3, 16)) },
            KvPair { keys: Array2::zeros((3, 31)), values: Array2::zeros((3, 32)) },
        ];
        let cond = ConditioningBundle {
            image_latent: &c,
            instruction: &tokens,
            kv_overrides: Some(&bad),
        };
        let state = LatentState { data: random_latent(1), timestep: 10 };
        let err = backend.predict_noise(&state, &cond).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn alpha_bar_is_decreasing() {
        let backend = ToyBackend::new(0);
        for t in 1..TRAIN_TIMESTEPS {
            assert!(backend.alpha_bar(t) < backend.alpha_bar(t - 1));
        }
        assert!(backend.sigma_min() < 0.1 && backend.sigma_max() > 10.0);
    }
}
