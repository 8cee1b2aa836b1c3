//! Inversion of exemplar pairs into an instruction bank.
//!
//! Each step samples a timestep inside one segment, noises the encoded
//! after-image, predicts the noise conditioned on the encoded before-image
//! and that segment's overrides, and descends the mean squared error with
//! respect to the segment's key/value blocks only. Backend weights are never
//! touched.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::{ConditioningBundle, DiffusionBackend, KvPair, Latent, LossContext};
use crate::bank::{bank_init_from_text, save_bank, InstructionBank, KvBlock, DEFAULT_SEGMENTS};
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_STEPS_PER_SEGMENT: usize = 1000;
pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_BATCH_SIZE: usize = 1;
pub const CHECKPOINT_EVERY: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    AdaptiveMoment,
    PlainSgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps_per_segment: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub j: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps_per_segment: DEFAULT_STEPS_PER_SEGMENT,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            j: DEFAULT_SEGMENTS,
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoment,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_segment == 0 || self.batch_size == 0 || self.j == 0 {
            return Err(Error::InvalidArgument(
                "steps_per_segment, batch_size and j must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_segment * self.j
    }
}

/// Before/after exemplar pairs with samples on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ExemplarSet {
    pairs: Vec<(Image, Image)>,
}

impl ExemplarSet {
    pub fn new(pairs: Vec<(Image, Image)>) -> Result<Self> {
        let Some((first, _)) = pairs.first() else {
            return Err(Error::InvalidArgument("exemplar set needs at least one pair".into()));
        };
        let (w, h) = (first.width(), first.height());
        for (i, (before, after)) in pairs.iter().enumerate() {
            for img in [before, after] {
                if (img.width(), img.height()) != (w, h) {
                    return Err(Error::Shape(format!(
                        "pair {i} is {}×{}, expected {w}×{h}",
                        img.width(),
                        img.height()
                    )));
                }
                if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidArgument(format!("pair {i} has samples outside [0, 1]")));
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(Image, Image)] {
        &self.pairs
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.pairs[0].0.width(), self.pairs[0].0.height())
    }

    pub fn before(&self) -> Vec<Image> {
        self.pairs.iter().map(|(b, _)| b.clone()).collect()
    }

    pub fn after(&self) -> Vec<Image> {
        self.pairs.iter().map(|(_, a)| a.clone()).collect()
    }

    /// Resizes every image to the backend's codec resolution and encodes it.
    pub fn encode(&self, backend: &dyn DiffusionBackend) -> Result<Vec<EncodedPair>> {
        let (w, h) = backend.descriptor().image_resolution;
        self.pairs
            .iter()
            .map(|(b, a)| {
                Ok(EncodedPair {
                    before: backend.encode_image(&b.resized(w, h))?,
                    after: backend.encode_image(&a.resized(w, h))?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub before: Latent,
    pub after: Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub segment: usize,
    pub step: usize,
    pub t: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<StepRecord>,
    pub wall_time_secs: f64,
}

impl TrainingTrace {
    pub fn segment_losses(&self, segment: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.segment == segment)
            .map(|r| r.loss)
            .collect()
    }

    /// One JSON object per line: `{"segment", "step", "t", "loss"}`.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_jsonl(&mut file)?;
        file.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean of the first and last `window` values.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if losses.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

/// Gradient of the loss for every segment and layer of a bank, `[segment][layer]`.
pub type BankGradient = Vec<Vec<KvPair>>;

/// Loss and full-bank gradient for one exemplar pair at timestep `t` with
/// fixed noise. Only the segment owning `t` can receive a nonzero gradient.
pub fn inversion_gradient(
    backend: &dyn DiffusionBackend,
    bank: &InstructionBank,
    t: usize,
    pair: &EncodedPair,
    noise: &Latent,
) -> Result<(f64, BankGradient)> {
    let owner = bank.segmentation().segment_index(t)?;
    let (loss, grads) = segment_loss_grad(backend, bank, owner, t, pair, noise)?;
    let mut full: BankGradient = (0..bank.segments())
        .map(|s| bank.segment_blocks(s).iter().map(|b| b.to_f64().zeros_like()).collect())
        .collect();
    full[owner] = grads;
    Ok((loss, full))
}

fn segment_loss_grad(
    backend: &dyn DiffusionBackend,
    bank: &InstructionBank,
    segment: usize,
    t: usize,
    pair: &EncodedPair,
    noise: &Latent,
) -> Result<(f64, Vec<KvPair>)> {
    let overrides: Vec<KvPair> = bank.segment_blocks(segment).iter().map(KvBlock::to_f64).collect();
    let state = backend.add_noise(&pair.after, noise, t)?;
    let instruction = backend.empty_instruction();
    let ctx = LossContext {
        state: &state,
        cond: ConditioningBundle {
            image_latent: &pair.before,
            instruction: &instruction,
            kv_overrides: Some(&overrides),
        },
        target_noise: noise,
    };
    let grad = backend.grad_wrt_overrides(&ctx)?;
    Ok((grad.loss, grad.overrides))
}

/// Optimizer state for one segment's blocks, flattened in layer order with
/// keys before values.
#[derive(Debug, Clone)]
pub struct SegmentOptimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl SegmentOptimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, blocks: &[KvBlock]) -> Self {
        let n = blocks.iter().map(|b| b.keys.len() + b.values.len()).sum();
        Self {
            kind,
            learning_rate,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn apply(&mut self, blocks: &mut [KvBlock], grads: &[KvPair]) {
        self.steps += 1;
        let bias1 = 1.0 - BETA1.powi(self.steps);
        let bias2 = 1.0 - BETA2.powi(self.steps);
        let mut idx = 0;
        for (block, grad) in blocks.iter_mut().zip(grads) {
            for (params, g) in [(&mut block.keys, &grad.keys), (&mut block.values, &grad.values)] {
                for (p, &g) in params.iter_mut().zip(g.iter()) {
                    let update = match self.kind {
                        OptimizerKind::PlainSgd => self.learning_rate * g,
                        OptimizerKind::AdaptiveMoment => {
                            let m = &mut self.first_moment[idx];
                            let v = &mut self.second_moment[idx];
                            *m = BETA1 * *m + (1.0 - BETA1) * g;
                            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                            self.learning_rate * (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPS)
                        }
                    };
                    *p = (f64::from(*p) - update) as f32;
                    idx += 1;
                }
            }
        }
    }
}

fn sample_noise(shape: (usize, usize, usize), rng: &mut impl Rng) -> Latent {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// One optimization step on `segment`: samples `batch_size` (pair, t, noise)
/// triples, averages their gradients and updates that segment's blocks.
#[allow(clippy::too_many_arguments)]
pub fn inversion_step(
    backend: &dyn DiffusionBackend,
    bank: &mut InstructionBank,
    segment: usize,
    step: usize,
    pairs: &[EncodedPair],
    batch_size: usize,
    optimizer: &mut SegmentOptimizer,
    rng: &mut impl Rng,
) -> Result<StepRecord> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no exemplar pairs".into()));
    }
    let range = bank.segmentation().range(segment);
    let shape = backend.descriptor().latent_shape;
    let mut total_loss = 0.0;
    let mut accumulated: Option<Vec<KvPair>> = None;
    let mut last_t = range.start;
    for _ in 0..batch_size {
        let t = rng.random_range(range.clone());
        let pair = &pairs[rng.random_range(0..pairs.len())];
        let noise = sample_noise(shape, rng);
        let (loss, grads) = segment_loss_grad(backend, bank, segment, t, pair, &noise)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { segment, step });
        }
        total_loss += loss;
        last_t = t;
        match accumulated.as_mut() {
            None => accumulated = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.keys += &g.keys;
                    a.values += &g.values;
                }
            }
        }
    }
    let mut grads = accumulated.expect("batch_size >= 1");
    if batch_size > 1 {
        let scale = 1.0 / batch_size as f64;
        for g in &mut grads {
            g.keys *= scale;
            g.values *= scale;
        }
    }
    if grads
        .iter()
        .any(|g| g.keys.iter().chain(g.values.iter()).any(|v| !v.is_finite()))
    {
        return Err(Error::NonFiniteLoss { segment, step });
    }
    optimizer.apply(bank.segment_blocks_mut(segment), &grads);
    Ok(StepRecord {
        segment,
        step,
        t: last_t,
        loss: total_loss / batch_size as f64,
    })
}

/// Sidecar checkpoint path: `<bank>.ckpt`.
pub fn checkpoint_path(bank_path: &Path) -> PathBuf {
    let mut name = bank_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".ckpt");
    bank_path.with_file_name(name)
}

/// Trains a bank from `init_text` (or the empty instruction), segment by
/// segment from the noisiest down. Deterministic for a fixed seed.
pub fn run_inversion(
    backend: &dyn DiffusionBackend,
    exemplars: &ExemplarSet,
    init_text: Option<&str>,
    config: &InversionConfig,
    checkpoint: Option<&Path>,
) -> Result<(InstructionBank, TrainingTrace)> {
    config.validate()?;
    let started = Instant::now();
    let pairs = exemplars.encode(backend)?;
    let mut bank = bank_init_from_text(backend, init_text, config.j)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = TrainingTrace::default();
    let mut done = 0usize;

    for segment in (0..config.j).rev() {
        let mut optimizer = SegmentOptimizer::new(config.optimizer, config.learning_rate, bank.segment_blocks(segment));
        for step in 0..config.steps_per_segment {
            let record = inversion_step(
                backend,
                &mut bank,
                segment,
                step,
                &pairs,
                config.batch_size,
                &mut optimizer,
                &mut rng,
            )?;
            trace.records.push(record);
            done += 1;
            if let Some(path) = checkpoint {
                if done % CHECKPOINT_EVERY == 0 {
                    save_bank(&bank, path)?;
                }
            }
        }
    }

    bank.mark_trained(Some(serde_json::to_value(config)?));
    trace.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((bank, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ToyBackend;

    fn pair_images(seed: u64) -> (Image, Image) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random_range(0.1..0.6)).collect();
        let before = Image::from_fn(16, 16, |x, y, c| vals[((y / 2) * 8 + x / 2) * 3 + c]);
        let after = Image::from_fn(16, 16, |x, y, c| before.get(x, y, c) + if c == 0 { 0.3 } else { 0.0 });
        (before, after)
    }

    #[test]
    fn defaults_total_five_thousand_steps() {
        let c = InversionConfig::default();
        assert_eq!((c.j, c.steps_per_segment, c.batch_size), (5, 1000, 1));
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.total_steps(), 5000);
    }

    #[test]
    fn exemplar_set_validation() {
        assert!(ExemplarSet::new(vec![]).is_err());
        let (b, a) = pair_images(0);
        assert!(ExemplarSet::new(vec![(b.clone(), Image::filled(8, 8, [0.0; 3]))]).is_err());
        assert!(ExemplarSet::new(vec![(b, Image::filled(16, 16, [1.5, 0.0, 0.0]))]).is_err());
        let (b, _) = pair_images(1);
        assert!(ExemplarSet::new(vec![(b, a)]).is_ok());
    }

    #[test]
    fn exact_prediction_gives_zero_loss_and_gradient() {
        // Identical before/after with the empty instruction: the toy predicts
        // x0 = before exactly, so its noise estimate equals the true noise.
        let backend = ToyBackend::new(0);
        let (before, _) = pair_images(2);
        let latent = backend.encode_image(&before).unwrap();
        let pair = EncodedPair { before: latent.clone(), after: latent };
        let bank = bank_init_from_text(&backend, None, 5).unwrap();
        let noise = sample_noise((4, 8, 8), &mut ChaCha8Rng::seed_from_u64(9));
        let (loss, grads) = inversion_gradient(&backend, &bank, 321, &pair, &noise).unwrap();
        assert!(loss < 1e-20, "{loss}");
        for g in grads.iter().flatten() {
            assert!(g.keys.iter().chain(g.values.iter()).all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn loss_is_nonnegative_and_trace_exports() {
        let backend = ToyBackend::new(0);
        let exemplars = ExemplarSet::new(vec![pair_images(3), pair_images(4)]).unwrap();
        let config = InversionConfig {
            steps_per_segment: 4,
            j: 2,
            ..Default::default()
        };
        let (bank, trace) = run_inversion(&backend, &exemplars, None, &config, None).unwrap();
        assert!(bank.is_trained());
        assert_eq!(trace.records.len(), 8);
        assert!(trace.records.iter().all(|r| r.loss >= 0.0 && r.loss.is_finite()));
        // descending segment order
        assert_eq!(trace.records[0].segment, 1);
        assert!(trace.records[..4].iter().all(|r| (500..1000).contains(&r.t)));
        let mut out = Vec::new();
        trace.write_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 8);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["segment", "step", "t", "loss"] {
            assert!(first.get(key).is_some());
        }
    }

    #[test]
    fn checkpoint_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = checkpoint_path(&dir.path().join("a.itb"));
        assert!(ckpt.ends_with("a.itb.ckpt"));
        let backend = ToyBackend::new(0);
        let exemplars = ExemplarSet::new(vec![pair_images(5)]).unwrap();
        let config = InversionConfig {
            steps_per_segment: 130,
            j: 2,
            ..Default::default()
        };
        run_inversion(&backend, &exemplars, Some("make it red"), &config, Some(&ckpt)).unwrap();
        let saved = crate::bank::load_bank(&ckpt).unwrap();
        assert!(!saved.is_trained());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = InversionConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
