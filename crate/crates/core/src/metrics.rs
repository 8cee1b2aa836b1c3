//! Full-reference image metrics and CLIP directional similarity.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backend::{Embedder, PerceptualFeatures};
use crate::error::{Error, Result};
use crate::image::Image;

/// Reported PSNR for identical images (and the ceiling for everything else).
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const LPIPS_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub clip_direction: f64,
    pub count: usize,
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "images differ in size: {}×{} vs {}×{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all samples, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering with the normalized Gaussian window.
fn filter_valid(plane: &Array2<f64>, window: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let k = window.len();
    let rows: Array2<f64> =
        Array2::from_shape_fn((h, w - k + 1), |(y, x)| (0..k).map(|i| window[i] * plane[[y, x + i]]).sum());
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(y, x)| (0..k).map(|i| window[i] * rows[[y + i, x]]).sum())
}

struct LocalStats {
    luminance: Array2<f64>,
    contrast_structure: Array2<f64>,
}

fn ssim_terms(a: &Image, b: &Image) -> Result<LocalStats> {
    check_same_shape(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}",
            a.width(),
            a.height()
        )));
    }
    let (x, y) = (a.luma(), b.luma());
    let window = gaussian_window();
    let mu_x = filter_valid(&x, &window);
    let mu_y = filter_valid(&y, &window);
    let var_x = filter_valid(&(&x * &x), &window) - &mu_x * &mu_x;
    let var_y = filter_valid(&(&y * &y), &window) - &mu_y * &mu_y;
    let cov = filter_valid(&(&x * &y), &window) - &mu_x * &mu_y;

    let luminance = (&mu_x * &mu_y * 2.0 + SSIM_C1) / (&mu_x * &mu_x + &mu_y * &mu_y + SSIM_C1);
    let contrast_structure = (cov * 2.0 + SSIM_C2) / (var_x + var_y + SSIM_C2);
    Ok(LocalStats {
        luminance,
        contrast_structure,
    })
}

/// Mean SSIM on BT.601 luma with an 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03, L = 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let terms = ssim_terms(a, b)?;
    Ok((terms.luminance * terms.contrast_structure).mean().unwrap_or(0.0))
}

/// Sum over stages of the spatially averaged squared distance between
/// channel-normalized features.
pub fn lpips(a: &Image, b: &Image, provider: &dyn PerceptualFeatures) -> Result<f64> {
    check_same_shape(a, b)?;
    let fa = provider.features(a)?;
    let fb = provider.features(b)?;
    if fa.len() != fb.len() {
        return Err(Error::Shape("feature provider returned different stage counts".into()));
    }
    let weights = provider.stage_weights();
    let mut total = 0.0;
    for (stage, (sa, sb)) in fa.iter().zip(&fb).enumerate() {
        if sa.dim() != sb.dim() {
            return Err(Error::Shape(format!("stage {stage} feature shapes differ")));
        }
        let (c, h, w) = sa.dim();
        let stage_weights = weights.as_ref().and_then(|ws| ws.get(stage));
        if let Some(ws) = stage_weights {
            if ws.len() != c {
                return Err(Error::Shape(format!("stage {stage} has {c} channels but {} weights", ws.len())));
            }
        }
        let norm_a = sa.map_axis(Axis(0), |v| v.dot(&v).sqrt() + LPIPS_EPS);
        let norm_b = sb.map_axis(Axis(0), |v| v.dot(&v).sqrt() + LPIPS_EPS);
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let d = sa[[ch, y, x]] / norm_a[[y, x]] - sb[[ch, y, x]] / norm_b[[y, x]];
                    acc += stage_weights.map_or(1.0, |ws| ws[ch]) * d * d;
                }
            }
        }
        total += acc / (h * w) as f64;
    }
    Ok(total)
}

fn mean_direction(
    from: &[Image],
    to: &[Image],
    embedder: &dyn Embedder,
    side: &'static str,
) -> Result<Vec<f64>> {
    if from.is_empty() || from.len() != to.len() {
        return Err(Error::InvalidArgument(format!(
            "{side} pairs: {} sources vs {} targets (need equal, nonempty)",
            from.len(),
            to.len()
        )));
    }
    let mut mean = vec![0.0; embedder.dim()];
    for (src, dst) in from.iter().zip(to) {
        let (es, ed) = (embedder.embed_image(src)?, embedder.embed_image(dst)?);
        for (m, (s, d)) in mean.iter_mut().zip(es.iter().zip(&ed)) {
            *m += (d - s) / from.len() as f64;
        }
    }
    if mean.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateDirection(side));
    }
    Ok(mean)
}

/// `1 - cos(mean(E(output) - E(input)), mean(E(after) - E(before)))`; 0 is
/// a perfectly aligned edit direction, 2 an opposite one.
pub fn clip_directional(
    inputs: &[Image],
    outputs: &[Image],
    ref_before: &[Image],
    ref_after: &[Image],
    embedder: &dyn Embedder,
) -> Result<f64> {
    let generated = mean_direction(inputs, outputs, embedder, "generated")?;
    let reference = mean_direction(ref_before, ref_after, embedder, "reference")?;
    let dot: f64 = generated.iter().zip(&reference).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = (dot / (norm(&generated) * norm(&reference))).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ToyPerceptual;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..size * size * 3).map(|_| rng.random()).collect();
        Image::from_fn(size, size, |x, y, c| vals[(y * size + x) * 3 + c])
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(0, 8).clamped();
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let lo = Image::filled(4, 4, [0.2, 0.3, 0.4]);
        let hi = Image::filled(4, 4, [0.3, 0.4, 0.5]);
        assert!((psnr(&lo, &hi).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&lo, &Image::filled(5, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = Image::filled(16, 16, [0.5; 3]);
        let noise = random_image(3, 16);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = Image::from_fn(16, 16, |x, y, c| base.get(x, y, c) + amp * (noise.get(x, y, c) - 0.5));
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_constant_closed_form() {
        let (a, b) = (random_image(1, 16), random_image(2, 16));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let c02 = Image::filled(16, 16, [0.2; 3]);
        let c08 = Image::filled(16, 16, [0.8; 3]);
        // luma of a gray image equals its value; variances vanish
        let expected = (2.0 * 0.2 * 0.8 + SSIM_C1) / (0.2f64.powi(2) + 0.8f64.powi(2) + SSIM_C1);
        assert!((ssim(&c02, &c08).unwrap() - expected).abs() < 1e-9);
        assert!(ssim(&Image::filled(10, 10, [0.0; 3]), &Image::filled(10, 10, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_contrast_structure_ignores_common_offsets() {
        let a = Image::from_fn(16, 16, |x, y, c| 0.2 + 0.5 * random_image(4, 16).get(x, y, c));
        let b = Image::from_fn(16, 16, |x, y, c| 0.2 + 0.5 * random_image(5, 16).get(x, y, c));
        let shift = |img: &Image| Image::from_fn(16, 16, |x, y, c| img.get(x, y, c) + 0.1);
        let cs = |p: &Image, q: &Image| ssim_terms(p, q).unwrap().contrast_structure.mean().unwrap();
        assert!((cs(&a, &b) - cs(&shift(&a), &shift(&b))).abs() < 1e-6);
        assert!((ssim(&shift(&a), &shift(&a)).unwrap() - 1.0).abs() < 1e-12);
    }

    struct Orthogonal;
    impl PerceptualFeatures for Orthogonal {
        fn features(&self, image: &Image) -> Result<Vec<Array3<f64>>> {
            let channel = if image.get(0, 0, 0) > 0.5 { 0 } else { 1 };
            let mut f = Array3::zeros((2, 3, 3));
            f.index_axis_mut(Axis(0), channel).fill(4.0);
            Ok(vec![f.clone(), f])
        }
    }

    #[test]
    fn lpips_examples() {
        let (a, b) = (Image::filled(4, 4, [1.0; 3]), Image::filled(4, 4, [0.0; 3]));
        assert!((lpips(&a, &b, &Orthogonal).unwrap() - 4.0).abs() < 1e-9);
        let p = ToyPerceptual::new(0);
        let x = random_image(6, 16);
        assert_eq!(lpips(&x, &x, &p).unwrap(), 0.0);
        assert!(lpips(&x, &random_image(7, 16), &p).unwrap() > 0.0);
    }

    struct Axes;
    impl Embedder for Axes {
        fn dim(&self) -> usize {
            2
        }
        fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
            Ok(vec![1.0, 0.0])
        }
        fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
            let angle = image.get(0, 0, 0) * std::f64::consts::TAU;
            Ok(vec![angle.cos(), angle.sin()])
        }
    }

    #[test]
    fn clip_direction_examples() {
        let at = |turn: f64| Image::filled(2, 2, [turn, 0.0, 0.0]);
        // reference direction: from angle 0 to 1/4 turn
        let (rb, ra) = (vec![at(0.0)], vec![at(0.25)]);
        let aligned = clip_directional(&[at(0.0)], &[at(0.25)], &rb, &ra, &Axes).unwrap();
        let opposite = clip_directional(&[at(0.25)], &[at(0.0)], &rb, &ra, &Axes).unwrap();
        // 5/8 turn to 1/8 turn points along (1, 1), orthogonal to (-1, 1)
        let orth = clip_directional(&[at(0.625)], &[at(0.125)], &rb, &ra, &Axes).unwrap();
        assert!(aligned.abs() < 1e-12);
        assert!((opposite - 2.0).abs() < 1e-12);
        assert!((orth - 1.0).abs() < 1e-12);
        assert!(matches!(
            clip_directional(&[at(0.1)], &[at(0.1)], &rb, &ra, &Axes),
            Err(Error::DegenerateDirection("generated"))
        ));
    }
}
