//! Toy embedding and perceptual-feature providers.
//!
//! `ToyEmbedder` places text and images in a shared 16-dimensional space
//! whose first axes carry simple color/tone concepts (red, green, blue,
//! brightness, desaturation, contrast), so phrases such as "a black and white
//! photo" genuinely score higher against grayscale images. Unknown words map
//! to hashed directions in the remaining axes.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Embedder, PerceptualFeatures};
use crate::error::{Error, Result};
use crate::image::Image;

const EMBED_DIM: usize = 16;
const CONCEPT_AXES: usize = 6;
const COMMON_AXIS: usize = EMBED_DIM - 1;

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidArgument("embedding has zero norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

fn concept(word: &str) -> Option<(usize, f64)> {
    Some(match word {
        "red" | "reddish" | "crimson" | "scarlet" | "warm" | "pink" => (0, 1.5),
        "green" | "greenish" | "emerald" | "forest" => (1, 1.5),
        "blue" | "bluish" | "cool" | "cold" | "teal" => (2, 1.5),
        "bright" | "light" | "sunny" | "sunlit" | "day" | "overexposed" => (3, 1.5),
        "dark" | "night" | "dim" | "shadow" | "underexposed" => (3, -1.5),
        "gray" | "grey" | "grayscale" | "greyscale" | "monochrome" | "black" | "white" => (4, 1.2),
        "colorful" | "vivid" | "saturated" | "vibrant" => (4, -1.2),
        "contrast" | "sharp" | "crisp" => (5, 1.5),
        "faded" | "soft" | "hazy" | "foggy" | "washed" => (5, -1.5),
        _ => return None,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ToyEmbedder;

impl ToyEmbedder {
    pub fn new() -> Self {
        Self
    }
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed_text(&self, phrase: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; EMBED_DIM];
        v[COMMON_AXIS] = 1.0;
        for word in phrase
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
        {
            match concept(&word) {
                Some((axis, weight)) => v[axis] += weight,
                None => {
                    let mut h = word
                        .bytes()
                        .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
                    for slot in v.iter_mut().take(COMMON_AXIS).skip(CONCEPT_AXES) {
                        h = h.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        *slot += ((h >> 33) as f64 / (1u64 << 31) as f64 - 1.0) * 0.15;
                    }
                }
            }
        }
        normalize(v)
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let (w, h) = (image.width(), image.height());
        let n = (w * h) as f64;
        let luma = image.luma();
        let mut mean = [0.0; 3];
        let mut sat = 0.0;
        for y in 0..h {
            for x in 0..w {
                let px = [image.get(x, y, 0), image.get(x, y, 1), image.get(x, y, 2)];
                for c in 0..3 {
                    mean[c] += px[c] / n;
                }
                let max = px.iter().copied().fold(f64::MIN, f64::max);
                let min = px.iter().copied().fold(f64::MAX, f64::min);
                sat += (max - min) / n;
            }
        }
        let mean_l = luma.mean().unwrap_or(0.0);
        let std_l = luma.std(0.0);
        let (top, left) = (
            luma.slice(ndarray::s![..h / 2, ..]).mean().unwrap_or(mean_l),
            luma.slice(ndarray::s![.., ..w / 2]).mean().unwrap_or(mean_l),
        );

        let mut v = vec![0.0; EMBED_DIM];
        for c in 0..3 {
            v[c] = 4.0 * (mean[c] - mean_l);
        }
        v[3] = 3.0 * (mean_l - 0.5);
        v[4] = 3.0 * (0.2 - sat);
        v[5] = 4.0 * (std_l - 0.2);
        v[6] = 2.0 * (top - mean_l);
        v[7] = 2.0 * (left - mean_l);
        v[COMMON_AXIS] = 1.0;
        normalize(v)
    }
}

/// Three-stage random convolutional feature pyramid (8, 16, 16 channels).
#[derive(Debug, Clone)]
pub struct ToyPerceptual {
    filters: Vec<Array2<f64>>,
}

const STAGE_CHANNELS: [usize; 3] = [8, 16, 16];

impl ToyPerceptual {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut in_ch = 3;
        let filters = STAGE_CHANNELS
            .iter()
            .map(|&out_ch| {
                let fan_in = in_ch * 9;
                let std = (2.0 / fan_in as f64).sqrt();
                let f = Array2::from_shape_simple_fn((out_ch, fan_in), || {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v * std
                });
                in_ch = out_ch;
                f
            })
            .collect();
        Self { filters }
    }
}

/// 3×3 zero-padded convolution followed by leaky ReLU.
fn conv3x3(input: &Array3<f64>, filter: &Array2<f64>) -> Array3<f64> {
    let (cin, h, w) = input.dim();
    let cout = filter.nrows();
    let mut out = Array3::zeros((cout, h, w));
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for c in 0..cin {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (yy, xx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc += filter[[o, c * 9 + dy * 3 + dx]] * input[[c, yy as usize, xx as usize]];
                            }
                        }
                    }
                }
                out[[o, y, x]] = if acc > 0.0 { acc } else { 0.1 * acc };
            }
        }
    }
    out
}

fn avg_pool2(input: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let (oh, ow) = ((h / 2).max(1), (w / 2).max(1));
    Array3::from_shape_fn((c, oh, ow), |(ch, y, x)| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for yy in 2 * y..(2 * y + 2).min(h) {
            for xx in 2 * x..(2 * x + 2).min(w) {
                acc += input[[ch, yy, xx]];
                n += 1.0;
            }
        }
        acc / n
    })
}

impl PerceptualFeatures for ToyPerceptual {
    fn features(&self, image: &Image) -> Result<Vec<Array3<f64>>> {
        let (w, h) = (image.width(), image.height());
        let mut x = Array3::from_shape_fn((3, h, w), |(c, y, xx)| 2.0 * image.get(xx, y, c) - 1.0);
        let mut stages = Vec::with_capacity(self.filters.len());
        for (i, filter) in self.filters.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(&x);
            }
            x = conv3x3(&x, filter);
            stages.push(x.clone());
        }
        Ok(stages)
    }
}
