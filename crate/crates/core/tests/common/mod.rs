#![allow(dead_code)]

use std::path::Path;

use instruction_inversion::backend::{Embedder, ToyBackend};
use instruction_inversion::bank::{bank_init_from_text, InstructionBank};
use instruction_inversion::image::Image;
use instruction_inversion::{Error, Result};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random 16×16 image built from 2×2 blocks, with a +0.3 red shift as its edit.
pub fn red_shift_pair(seed: u64) -> (Image, Image) {
    let mut r = rng(seed);
    let vals: Vec<f64> = (0..8 * 8 * 3).map(|_| r.random_range(0.05..0.65)).collect();
    let before = Image::from_fn(16, 16, |x, y, c| vals[((y / 2) * 8 + x / 2) * 3 + c]);
    let after = Image::from_fn(16, 16, |x, y, c| before.get(x, y, c) + if c == 0 { 0.3 } else { 0.0 });
    (before, after)
}

pub fn random_image(seed: u64, width: usize, height: usize) -> Image {
    let mut r = rng(seed);
    let vals: Vec<f64> = (0..width * height * 3).map(|_| r.random()).collect();
    Image::from_fn(width, height, |x, y, c| vals[(y * width + x) * 3 + c])
}

pub fn random_latent(r: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || r.sample::<f64, _>(StandardNormal))
}

/// A toy bank whose blocks are replaced with Gaussian entries of the given scale.
pub fn random_bank(backend: &ToyBackend, text: Option<&str>, j: usize, scale: f32, seed: u64) -> InstructionBank {
    let mut bank = bank_init_from_text(backend, text, j).unwrap();
    let mut r = rng(seed);
    for s in 0..j {
        for block in bank.segment_blocks_mut(s) {
            for v in block.keys.iter_mut().chain(block.values.iter_mut()) {
                *v = scale * r.sample::<f32, _>(StandardNormal);
            }
        }
    }
    bank
}

/// Two-loop PSNR with no cap, written independently of the library.
pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                let d = a.get(x, y, c) - b.get(x, y, c);
                sum += d * d;
                n += 1;
            }
        }
    }
    10.0 * (1.0 / (sum / n as f64)).log10()
}

#[derive(Debug, Clone, Deserialize)]
struct KeyedEmbedding {
    key: f64,
    embedding: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
struct PhraseEmbedding {
    phrase: String,
    embedding: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Planted {
    pub side: String,
    pub phrase: String,
    pub similarity_before: f64,
    pub similarity_after: f64,
}

/// Embedder backed by the committed lookup-table fixture.
#[derive(Debug, Clone, Deserialize)]
pub struct FixtureEmbedder {
    images: Vec<KeyedEmbedding>,
    phrases: Vec<PhraseEmbedding>,
    pub before_keys: Vec<f64>,
    pub after_keys: Vec<f64>,
    pub planted: Planted,
    #[serde(skip, default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl FixtureEmbedder {
    pub fn load() -> Self {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mock_embedder.json");
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self { scale, ..self.clone() }
    }

    pub fn phrases(&self) -> Vec<String> {
        self.phrases.iter().map(|p| p.phrase.clone()).collect()
    }

    pub fn image(key: f64) -> Image {
        Image::filled(2, 2, [key, 0.0, 0.0])
    }

    pub fn before_images(&self) -> Vec<Image> {
        self.before_keys.iter().map(|&k| Self::image(k)).collect()
    }

    pub fn after_images(&self) -> Vec<Image> {
        self.after_keys.iter().map(|&k| Self::image(k)).collect()
    }

    pub fn text_vector(&self, phrase: &str) -> Vec<f64> {
        self.phrases.iter().find(|p| p.phrase == phrase).unwrap().embedding.clone()
    }

    pub fn image_vector(&self, key: f64) -> Vec<f64> {
        self.images.iter().find(|i| (i.key - key).abs() < 1e-9).unwrap().embedding.clone()
    }
}

impl Embedder for FixtureEmbedder {
    fn dim(&self) -> usize {
        3
    }

    fn embed_text(&self, phrase: &str) -> Result<Vec<f64>> {
        self.phrases
            .iter()
            .find(|p| p.phrase == phrase)
            .map(|p| p.embedding.iter().map(|v| v * self.scale).collect())
            .ok_or_else(|| Error::InvalidArgument(format!("phrase `{phrase}` not in fixture")))
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let key = image.get(0, 0, 0);
        self.images
            .iter()
            .find(|i| (i.key - key).abs() < 1e-9)
            .map(|i| i.embedding.iter().map(|v| v * self.scale).collect())
            .ok_or_else(|| Error::InvalidArgument(format!("image key {key} not in fixture")))
    }
}

/// Plain cosine, for oracles.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Embeds an image as the unit vector at angle `2π · red(0, 0)`.
pub struct AngleEmbedder;

pub fn at_angle(turns: f64) -> Image {
    Image::filled(2, 2, [turns, 0.0, 0.0])
}

impl Embedder for AngleEmbedder {
    fn dim(&self) -> usize {
        2
    }

    fn embed_text(&self, _phrase: &str) -> Result<Vec<f64>> {
        Ok(vec![1.0, 0.0])
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let a = image.get(0, 0, 0) * std::f64::consts::TAU;
        Ok(vec![a.cos(), a.sin()])
    }
}
