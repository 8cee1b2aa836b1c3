//! RGB images with floating point samples on [0, 1].

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An RGB image stored as a `height × width × 3` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image array must be H×W×3 with H, W > 0, got {h}×{w}×{c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite samples".into()));
        }
        Ok(Self { data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]);
        Self { data }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let data = Array3::from_shape_fn((height, width, 3), |(y, x, c)| f(x, y, c));
        Self { data }
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[[y, x, c]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.data.dim() == other.data.dim()
    }

    /// BT.601 luma plane.
    pub fn luma(&self) -> Array2<f64> {
        let (h, w, _) = self.data.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            (0..3).map(|c| LUMA_WEIGHTS[c] * self.data[[y, x, c]]).sum()
        })
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Quantizes to 8 bits per channel, rounding to nearest.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.data.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.data[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        });
        Self { data }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Bilinear resize through the `image` crate, at 8-bit precision.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width() && height == self.height() {
            return self.clone();
        }
        let out = image::imageops::resize(
            &self.to_rgb8(),
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::from_rgb8(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact_for_quantized_values() {
        let img = Image::from_fn(5, 3, |x, y, c| ((x * 31 + y * 7 + c * 50) % 256) as f64 / 255.0);
        let back = Image::from_rgb8(&img.to_rgb8());
        assert_eq!(img, back);
    }

    #[test]
    fn luma_of_white_is_one() {
        let img = Image::filled(2, 2, [1.0, 1.0, 1.0]);
        for v in img.luma() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(Image::new(Array3::zeros((2, 2, 4))).is_err());
    }
}
