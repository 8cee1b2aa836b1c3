mod common;

use std::sync::Mutex;

use common::*;
use instruction_inversion::backend::{
    BackendDescriptor, ConditioningBundle, DiffusionBackend, KvPair, Latent, LatentState, LossContext, LossGradient,
    TokenSequence, ToyBackend,
};
use instruction_inversion::editor::{edit_image, edit_latent, EditConfig};
use instruction_inversion::image::Image;
use instruction_inversion::optimizer::{run_inversion, ExemplarSet, InversionConfig};
use instruction_inversion::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Call {
    zero_image: bool,
    empty_instruction: bool,
    overridden: bool,
    timestep: usize,
}

/// Toy backend that records every prediction call.
struct Instrumented {
    inner: ToyBackend,
    calls: Mutex<Vec<Call>>,
}

impl DiffusionBackend for Instrumented {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }
    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.inner.tokenize(text)
    }
    fn empty_instruction(&self) -> TokenSequence {
        self.inner.empty_instruction()
    }
    fn text_kv(&self, tokens: &TokenSequence, layer: usize) -> Result<KvPair> {
        self.inner.text_kv(tokens, layer)
    }
    fn encode_image(&self, image: &Image) -> Result<Latent> {
        self.inner.encode_image(image)
    }
    fn decode_latent(&self, latent: &Latent) -> Result<Image> {
        self.inner.decode_latent(latent)
    }
    fn alpha_bar(&self, t: usize) -> f64 {
        self.inner.alpha_bar(t)
    }
    fn predict_noise(&self, state: &LatentState, cond: &ConditioningBundle<'_>) -> Result<Latent> {
        self.calls.lock().unwrap().push(Call {
            zero_image: cond.image_latent.iter().all(|&v| v == 0.0),
            empty_instruction: cond.instruction.content_len() == 0,
            overridden: cond.kv_overrides.is_some(),
            timestep: state.timestep,
        });
        self.inner.predict_noise(state, cond)
    }
    fn grad_wrt_overrides(&self, ctx: &LossContext<'_>) -> Result<LossGradient> {
        self.inner.grad_wrt_overrides(ctx)
    }
    fn parameter_digest(&self) -> u32 {
        self.inner.parameter_digest()
    }
}

fn trained_bank(backend: &ToyBackend) -> instruction_inversion::bank::InstructionBank {
    let mut bank = random_bank(backend, None, 5, 0.5, 77);
    bank.mark_trained(None);
    bank
}

#[test]
fn overrides_reach_only_the_full_branch() {
    let backend = Instrumented {
        inner: ToyBackend::new(0),
        calls: Mutex::new(Vec::new()),
    };
    let bank = trained_bank(&backend.inner);
    let (b, _) = red_shift_pair(1);
    let latent = backend.encode_image(&b).unwrap();
    for switch_t in [None, Some(500)] {
        backend.calls.lock().unwrap().clear();
        let config = EditConfig {
            switch_t,
            steps: 12,
            ..EditConfig::for_backend(&backend)
        };
        edit_latent(&backend, Some(&bank), &latent, &config).unwrap();
        let calls = backend.calls.lock().unwrap().clone();
        assert_eq!(calls.len(), 3 * 12);
        for step in calls.chunks(3) {
            let (uncond, image_only, full) = (step[0], step[1], step[2]);
            assert!(uncond.zero_image && uncond.empty_instruction && !uncond.overridden);
            assert!(!image_only.zero_image && image_only.empty_instruction && !image_only.overridden);
            assert!(!full.zero_image);
            let expected = switch_t.is_none_or(|s| full.timestep >= s);
            assert_eq!(full.overridden, expected);
        }
    }
}

#[test]
fn backend_is_frozen_during_inversion() {
    let backend = ToyBackend::new(3);
    let digest = backend.parameter_digest();
    let probe_state = LatentState {
        data: random_latent(&mut rng(1), (4, 8, 8)),
        timestep: 400,
    };
    let probe_image = random_latent(&mut rng(2), (4, 8, 8));
    let empty = backend.empty_instruction();
    let cond = ConditioningBundle {
        image_latent: &probe_image,
        instruction: &empty,
        kv_overrides: None,
    };
    let before = backend.predict_noise(&probe_state, &cond).unwrap();
    let exemplars = ExemplarSet::new((0..2).map(red_shift_pair).collect()).unwrap();
    let config = InversionConfig {
        steps_per_segment: 10,
        ..InversionConfig::default()
    };
    run_inversion(&backend, &exemplars, Some("make it red"), &config, None).unwrap();
    assert_eq!(backend.parameter_digest(), digest);
    assert_eq!(backend.predict_noise(&probe_state, &cond).unwrap(), before);
    assert_ne!(ToyBackend::new(4).parameter_digest(), digest);
}

#[test]
fn same_seed_gives_identical_images() {
    let backend = ToyBackend::new(0);
    let bank = trained_bank(&backend);
    let (b, _) = red_shift_pair(2);
    let config = EditConfig {
        seed: 8,
        ..EditConfig::for_backend(&backend)
    };
    let one = edit_image(&backend, &bank, &b, &config).unwrap();
    let two = edit_image(&backend, &bank, &b, &config).unwrap();
    assert_eq!(one.to_rgb8(), two.to_rgb8());
    assert_eq!(one, two);
    let other = edit_image(&backend, &bank, &b, &EditConfig { seed: 9, ..config }).unwrap();
    assert_ne!(one, other);
}

#[test]
fn inversion_is_deterministic_for_a_seed() {
    let backend = ToyBackend::new(0);
    let exemplars = ExemplarSet::new((0..2).map(red_shift_pair).collect()).unwrap();
    let config = InversionConfig {
        steps_per_segment: 8,
        seed: 4,
        ..InversionConfig::default()
    };
    let (a, ta) = run_inversion(&backend, &exemplars, None, &config, None).unwrap();
    let (b, tb) = run_inversion(&backend, &exemplars, None, &config, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.records, tb.records);
}
