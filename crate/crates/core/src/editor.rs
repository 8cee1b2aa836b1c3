//! Applying an instruction bank to new images.
//!
//! Sampling runs an Euler-ancestral sampler over a Karras sigma schedule.
//! Each step makes three noise predictions:
//!
//! * unconditional: zeroed image conditioning, empty instruction
//! * image-only: encoded input, empty instruction
//! * full: encoded input plus the bank's overrides for the current timestep
//!
//! These are combined with separate image and text guidance scales. With
//! `switch_t` set, the full branch only uses the bank while `t >= switch_t`
//! and falls back to the empty instruction afterwards.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::{ConditioningBundle, DiffusionBackend, KvPair, Latent, LatentState};
use crate::bank::InstructionBank;
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_TEXT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_IMAGE_GUIDANCE: f64 = 1.5;
pub const DEFAULT_SAMPLER_STEPS: usize = 20;
pub const DEFAULT_RHO: f64 = 7.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub s_t: f64,
    pub s_i: f64,
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub seed: u64,
    /// Apply the bank only while the mapped timestep is at least this value.
    pub switch_t: Option<usize>,
}

impl EditConfig {
    /// Defaults with the sigma range taken from the backend's noise schedule.
    pub fn for_backend(backend: &dyn DiffusionBackend) -> Self {
        Self {
            s_t: DEFAULT_TEXT_GUIDANCE,
            s_i: DEFAULT_IMAGE_GUIDANCE,
            steps: DEFAULT_SAMPLER_STEPS,
            sigma_min: backend.sigma_min(),
            sigma_max: backend.sigma_max(),
            rho: DEFAULT_RHO,
            seed: 0,
            switch_t: None,
        }
    }

    pub fn validate(&self, train_timesteps: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("sampler steps must be at least 1".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.s_t.is_finite() && self.s_i.is_finite()) {
            return Err(Error::InvalidArgument("guidance scales must be finite".into()));
        }
        if let Some(t) = self.switch_t {
            if t > train_timesteps {
                return Err(Error::InvalidArgument(format!(
                    "switch_t {t} outside [0, {train_timesteps}]"
                )));
            }
        }
        Ok(())
    }
}

/// Karras et al. sigmas, descending from `sigma_max` to `sigma_min`, with a
/// terminal zero appended.
pub fn karras_sigmas(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if steps == 1 {
        return Ok(vec![sigma_max, 0.0]);
    }
    let max_inv = sigma_max.powf(1.0 / rho);
    let min_inv = sigma_min.powf(1.0 / rho);
    let mut sigmas: Vec<f64> = (0..steps)
        .map(|i| {
            let frac = i as f64 / (steps - 1) as f64;
            (max_inv + frac * (min_inv - max_inv)).powf(rho)
        })
        .collect();
    // Pin the endpoints exactly; the power round trip can be off by an ulp.
    sigmas[0] = sigma_max;
    sigmas[steps - 1] = sigma_min;
    sigmas.push(0.0);
    Ok(sigmas)
}

/// Discrete training timestep whose sigma is nearest in log space.
pub fn timestep_for_sigma(backend: &dyn DiffusionBackend, sigma: f64) -> usize {
    let target = sigma.ln();
    (0..backend.descriptor().train_timesteps)
        .min_by(|&a, &b| {
            let da = (backend.sigma(a).ln() - target).abs();
            let db = (backend.sigma(b).ln() - target).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `steps + 1` values ending in 0.
    pub sigmas: Vec<f64>,
    /// Training timestep for each nonzero sigma.
    pub timesteps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn karras(backend: &dyn DiffusionBackend, config: &EditConfig) -> Result<Self> {
        let sigmas = karras_sigmas(config.steps, config.sigma_min, config.sigma_max, config.rho)?;
        let timesteps = sigmas[..sigmas.len() - 1]
            .iter()
            .map(|&s| timestep_for_sigma(backend, s))
            .collect();
        Ok(Self { sigmas, timesteps })
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }
}

/// `e_uncond + s_I (e_img - e_uncond) + s_T (e_full - e_img)`, evaluated as
/// `(1 - s_I) e_uncond + (s_I - s_T) e_img + s_T e_full` so that unit and
/// zero scales select a branch exactly.
pub fn cfg_combine(e_uncond: &Latent, e_img_only: &Latent, e_full: &Latent, s_t: f64, s_i: f64) -> Result<Latent> {
    if e_uncond.dim() != e_img_only.dim() || e_img_only.dim() != e_full.dim() {
        return Err(Error::Shape(format!(
            "guidance branches disagree: {:?}, {:?}, {:?}",
            e_uncond.dim(),
            e_img_only.dim(),
            e_full.dim()
        )));
    }
    let mut out = e_uncond.clone();
    ndarray::Zip::from(&mut out)
        .and(e_uncond)
        .and(e_img_only)
        .and(e_full)
        .for_each(|o, &u, &i, &f| *o = (1.0 - s_i) * u + (s_i - s_t) * i + s_t * f);
    Ok(out)
}

/// One Euler-ancestral update from `sigma_from` to `sigma_to` given a noise
/// prediction. No noise is drawn when `sigma_to` is zero.
pub fn euler_ancestral_step(
    x: &Latent,
    sigma_from: f64,
    sigma_to: f64,
    noise_prediction: &Latent,
    rng: &mut impl Rng,
) -> Latent {
    let sigma_up = sigma_to.min(
        (sigma_to * sigma_to * (sigma_from * sigma_from - sigma_to * sigma_to) / (sigma_from * sigma_from)).sqrt(),
    );
    let sigma_down = (sigma_to * sigma_to - sigma_up * sigma_up).sqrt();
    let mut next = x + &(noise_prediction * (sigma_down - sigma_from));
    if sigma_to > 0.0 {
        next.mapv_inplace(|v| {
            let n: f64 = rng.sample(StandardNormal);
            v + n * sigma_up
        });
    }
    next
}

fn predict(
    backend: &dyn DiffusionBackend,
    state: &LatentState,
    image_latent: &Latent,
    instruction: &crate::backend::TokenSequence,
    overrides: Option<&[KvPair]>,
) -> Result<Latent> {
    backend.predict_noise(
        state,
        &ConditioningBundle {
            image_latent,
            instruction,
            kv_overrides: overrides,
        },
    )
}

/// Runs the sampler and returns the final latent. `bank = None` edits with
/// the empty instruction throughout.
pub fn edit_latent(
    backend: &dyn DiffusionBackend,
    bank: Option<&InstructionBank>,
    image_latent: &Latent,
    config: &EditConfig,
) -> Result<Latent> {
    let desc = backend.descriptor();
    config.validate(desc.train_timesteps)?;
    desc.check_latent(image_latent, "input image latent")?;
    if let Some(bank) = bank {
        bank.check_backend(backend)?;
        if !bank.is_trained() {
            return Err(Error::UntrainedBank);
        }
    }

    let schedule = NoiseSchedule::karras(backend, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let empty = backend.empty_instruction();
    let zero_image = Array3::zeros(desc.latent_shape);
    let mut x: Latent = Array3::from_shape_simple_fn(desc.latent_shape, || rng.sample::<f64, _>(StandardNormal))
        * schedule.sigmas[0];

    for (i, &t) in schedule.timesteps.iter().enumerate() {
        let (sigma, sigma_next) = (schedule.sigmas[i], schedule.sigmas[i + 1]);
        let state = LatentState {
            data: &x / (1.0 + sigma * sigma).sqrt(),
            timestep: t,
        };
        let overrides = match bank {
            Some(bank) if config.switch_t.is_none_or(|s| t >= s) => Some(bank.overrides_for_f64(t)?),
            _ => None,
        };
        let e_uncond = predict(backend, &state, &zero_image, &empty, None)?;
        let e_img = predict(backend, &state, image_latent, &empty, None)?;
        let e_full = predict(backend, &state, image_latent, &empty, overrides.as_deref())?;
        let eps = cfg_combine(&e_uncond, &e_img, &e_full, config.s_t, config.s_i)?;
        x = euler_ancestral_step(&x, sigma, sigma_next, &eps, &mut rng);
    }
    Ok(x)
}

/// Edits an image with a trained bank.
pub fn edit_image(
    backend: &dyn DiffusionBackend,
    bank: &InstructionBank,
    image: &Image,
    config: &EditConfig,
) -> Result<Image> {
    edit_with(backend, Some(bank), image, config)
}

/// The same sampler with no learned instruction, for baselines.
pub fn edit_without_instruction(backend: &dyn DiffusionBackend, image: &Image, config: &EditConfig) -> Result<Image> {
    edit_with(backend, None, image, config)
}

fn edit_with(
    backend: &dyn DiffusionBackend,
    bank: Option<&InstructionBank>,
    image: &Image,
    config: &EditConfig,
) -> Result<Image> {
    let (w, h) = backend.descriptor().image_resolution;
    let latent = backend.encode_image(&image.resized(w, h))?;
    let out = edit_latent(backend, bank, &latent, config)?;
    backend.decode_latent(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ToyBackend;
    use ndarray::array;

    #[test]
    fn karras_endpoints_and_single_step() {
        let s = karras_sigmas(20, 0.0292, 14.6146, 7.0).unwrap();
        assert_eq!(s.len(), 21);
        assert_eq!(s[0], 14.6146);
        assert_eq!(s[19], 0.0292);
        assert_eq!(s[20], 0.0);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(karras_sigmas(1, 0.1, 10.0, 7.0).unwrap(), vec![10.0, 0.0]);
        assert!(karras_sigmas(0, 0.1, 10.0, 7.0).is_err());
    }

    #[test]
    fn cfg_examples() {
        let (u, i, f) = (array![[[0.0]]], array![[[1.0]]], array![[[2.0]]]);
        assert_eq!(cfg_combine(&u, &i, &f, 7.5, 1.5).unwrap()[[0, 0, 0]], 9.0);
        assert_eq!(cfg_combine(&u, &i, &f, 1.0, 1.0).unwrap(), f);
        assert_eq!(cfg_combine(&u, &i, &f, 0.0, 1.0).unwrap(), i);
        assert!(cfg_combine(&u, &i, &array![[[1.0, 2.0]]], 1.0, 1.0).is_err());
    }

    #[test]
    fn final_euler_step_is_deterministic() {
        let x = array![[[1.0, -2.0]]];
        let eps = array![[[0.5, 0.25]]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = rng.clone();
        let next = euler_ancestral_step(&x, 2.0, 0.0, &eps, &mut rng);
        assert_eq!(next, array![[[0.0, -2.5]]]);
        // no noise drawn
        assert_eq!(rng.random::<u64>(), before.clone().random::<u64>());
    }

    #[test]
    fn zero_prediction_only_adds_ancestral_noise() {
        let x = array![[[1.0, -2.0, 0.5]]];
        let eps = Array3::zeros((1, 1, 3));
        let (from, to) = (3.0_f64, 1.0_f64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut replay = rng.clone();
        let next = euler_ancestral_step(&x, from, to, &eps, &mut rng);
        let up = (to * to * (from * from - to * to) / (from * from)).sqrt();
        for (k, (&n, &x0)) in next.iter().zip(x.iter()).enumerate() {
            let z: f64 = replay.sample(StandardNormal);
            assert!((n - (x0 + z * up)).abs() < 1e-12, "{k}");
        }
    }

    #[test]
    fn defaults_come_from_backend() {
        let backend = ToyBackend::new(0);
        let c = EditConfig::for_backend(&backend);
        assert_eq!((c.s_t, c.s_i, c.steps, c.rho), (7.5, 1.5, 20, 7.0));
        assert_eq!(c.sigma_min, backend.sigma_min());
        assert!(c.validate(1000).is_ok());
        assert!(EditConfig { switch_t: Some(1001), ..c.clone() }.validate(1000).is_err());
        assert!(EditConfig { sigma_min: 20.0, ..c }.validate(1000).is_err());
    }

    #[test]
    fn schedule_maps_sigmas_to_timesteps() {
        let backend = ToyBackend::new(0);
        let schedule = NoiseSchedule::karras(&backend, &EditConfig::for_backend(&backend)).unwrap();
        assert_eq!(schedule.timesteps.first(), Some(&999));
        assert_eq!(schedule.timesteps.last(), Some(&0));
        assert!(schedule.timesteps.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn untrained_bank_is_rejected() {
        let backend = ToyBackend::new(0);
        let bank = crate::bank::bank_init_from_text(&backend, None, 5).unwrap();
        let img = Image::filled(16, 16, [0.5; 3]);
        assert!(matches!(
            edit_image(&backend, &bank, &img, &EditConfig::for_backend(&backend)),
            Err(Error::UntrainedBank)
        ));
    }
}
