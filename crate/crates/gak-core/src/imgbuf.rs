//! Float image buffers exchanged between the renderer, the denoising loop,
//! and metrics. RGB plus a coverage alpha channel, row-major, f64.
//!
//! Rendered images stay in [0, 1]; buffers passing through the diffusion
//! algebra are unbounded by design. Quantization happens only at PNG export.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    /// RGB interleaved, `3 * (y * width + x) + channel`.
    pub rgb: Vec<f64>,
    /// One coverage value per pixel.
    pub alpha: Vec<f64>,
}

impl ImageBuffer {
    pub fn zeros(width: u32, height: u32) -> Self {
        ImageBuffer {
            width,
            height,
            rgb: vec![0.0; (width * height * 3) as usize],
            alpha: vec![0.0; (width * height) as usize],
        }
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    #[inline]
    pub fn rgb_at(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * (y * self.width + x) as usize;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    #[inline]
    pub fn alpha_at(&self, x: u32, y: u32) -> f64 {
        self.alpha[(y * self.width + x) as usize]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_finite(&self) -> bool {
        self.rgb.iter().chain(self.alpha.iter()).all(|v| v.is_finite())
    }

    /// Mean absolute RGB difference; shape mismatch is an error.
    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::invalid_input("image shapes differ"));
        }
        let sum: f64 = self
            .rgb
            .iter()
            .zip(&other.rgb)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.rgb.len() as f64)
    }

    /// Largest absolute difference over RGB and alpha.
    pub fn max_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::invalid_input("image shapes differ"));
        }
        let rgb = self
            .rgb
            .iter()
            .zip(&other.rgb)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let alpha = self
            .alpha
            .iter()
            .zip(&other.alpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok(rgb.max(alpha))
    }

    /// 8-bit RGBA PNG export. Values are clamped to [0, 1] and rounded.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut bytes = Vec::with_capacity(self.pixel_count() * 4);
        for p in 0..self.pixel_count() {
            bytes.push(quant(self.rgb[3 * p]));
            bytes.push(quant(self.rgb[3 * p + 1]));
            bytes.push(quant(self.rgb[3 * p + 2]));
            bytes.push(quant(self.alpha[p]));
        }
        let img = image::RgbaImage::from_raw(self.width, self.height, bytes)
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::validation(format!("png encode {}: {e}", path.display())))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::validation(format!("png decode {}: {e}", path.display())))?
            .to_rgba8();
        let (width, height) = img.dimensions();
        let mut out = ImageBuffer::zeros(width, height);
        for (p, px) in img.pixels().enumerate() {
            out.rgb[3 * p] = px.0[0] as f64 / 255.0;
            out.rgb[3 * p + 1] = px.0[1] as f64 / 255.0;
            out.rgb[3 * p + 2] = px.0[2] as f64 / 255.0;
            out.alpha[p] = px.0[3] as f64 / 255.0;
        }
        Ok(out)
    }
}

/// Peak signal-to-noise ratio over the RGB channels with peak 1.0, in dB.
/// Identical images return +infinity.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid_input(format!(
            "psnr shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse: f64 = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.rgb.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
