//! Ultrasound preprocessing (gamma, Gaussian denoise, resize, min-max
//! normalization) and 8-bit image I/O.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::bilinear_taps;

/// Planar image with intensities in `[0, 1]`; pixel `(c, y, x)` lives at
/// `(c * height + y) * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(shape_err(format!("image {height}x{width}x{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(shape_err(format!(
                "{} pixels for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::NonFiniteValue(format!("pixel {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn gray(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, pixels)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::gray(height, width, vec![value; height * width])
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.pixels[c * hw..(c + 1) * hw]
    }

    /// Channel mean, as used when a colour file is loaded as grayscale.
    pub fn to_gray(&self) -> RawImage {
        if self.channels == 1 {
            return self.clone();
        }
        let hw = self.height * self.width;
        let pixels = (0..hw)
            .map(|i| (0..self.channels).map(|c| self.pixels[c * hw + i]).sum::<f64>() / self.channels as f64)
            .collect();
        RawImage {
            pixels,
            channels: 1,
            ..*self
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> RawImage {
        RawImage {
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
            ..*self
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Binary mask, values 0 or 1, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err(format!("{} mask values for {height}x{width}", values.len())));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(shape_err("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let values = (0..height * width).map(|i| u8::from(f(i / width, i % width))).collect();
        Self {
            height,
            width,
            values,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| usize::from(v)).sum()
    }

    /// Pixelwise OR.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(shape_err("mask union of different sizes"));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a | b).collect();
        Ok(Mask { values, ..*self })
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> Mask {
        let pick = |dst: usize, src: usize, i: usize| ((i * src) as f64 / dst as f64 + 0.5 * src as f64 / dst as f64) as usize;
        Mask::from_fn(height, width, |y, x| {
            let sy = pick(height, self.height, y).min(self.height - 1);
            let sx = pick(width, self.width, x).min(self.width - 1);
            self.get(sy, sx)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub gamma: f64,
    pub sigma: f64,
    pub kernel_size: usize,
    pub target_height: usize,
    pub target_width: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            sigma: 1.0,
            kernel_size: 5,
            target_height: 64,
            target_width: 64,
        }
    }
}

impl PreprocessConfig {
    pub fn with_target(mut self, height: usize, width: usize) -> Self {
        self.target_height = height;
        self.target_width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidGamma(self.gamma));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidKernel(format!(
                "kernel size must be odd and at least 3, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidKernel(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.target_height == 0 || self.target_width == 0 {
            return Err(Error::InvalidConfig("target size must be positive".into()));
        }
        Ok(())
    }
}

/// `I_out = I_in^γ`.
pub fn gamma_correct(img: &RawImage, gamma: f64) -> Result<RawImage> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidGamma(gamma));
    }
    Ok(img.map(|p| p.powf(gamma)))
}

/// Square kernel, row-major, entries proportional to
/// `exp(-(i² + j²) / (2σ²))` and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn identity() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel> {
    if size % 2 == 0 {
        return Err(Error::InvalidKernel(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidKernel(format!("sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as f64;
    let mut weights: Vec<f64> = (0..size * size)
        .map(|k| {
            let (i, j) = ((k / size) as f64 - r, (k % size) as f64 - r);
            (-(i * i + j * j) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(Kernel { size, weights })
}

/// Reflect-101 border index (`-1 -> 1`, `n -> n - 2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Per-channel 2D correlation with reflect padding.
pub fn gaussian_filter(img: &RawImage, kernel: &Kernel) -> RawImage {
    let (c, h, w) = img.dims();
    let r = (kernel.size / 2) as isize;
    let mut out = vec![0.0; img.pixels.len()];
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..kernel.size {
                    let sy = reflect(y as isize + i as isize - r, h);
                    for j in 0..kernel.size {
                        let sx = reflect(x as isize + j as isize - r, w);
                        acc += kernel.at(i, j) * plane[sy * w + sx];
                    }
                }
                out[(ch * h + y) * w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
    RawImage {
        pixels: out,
        ..*img
    }
}

/// Corner-aligned bilinear resize.
pub fn resize(img: &RawImage, target_height: usize, target_width: usize) -> Result<RawImage> {
    if target_height == 0 || target_width == 0 {
        return Err(shape_err("resize target must be at least 1x1"));
    }
    let (c, h, w) = img.dims();
    if (h, w) == (target_height, target_width) {
        return Ok(img.clone());
    }
    let ty = bilinear_taps(h, target_height);
    let tx = bilinear_taps(w, target_width);
    let mut pixels = Vec::with_capacity(c * target_height * target_width);
    for ch in 0..c {
        let p = img.plane(ch);
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(RawImage {
        height: target_height,
        width: target_width,
        channels: c,
        pixels,
    })
}

/// Min-max normalization to `[0, 1]`; a constant image maps to zeros.
pub fn normalize(img: &RawImage) -> RawImage {
    let lo = img.pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return img.map(|_| 0.0);
    }
    img.map(|p| ((p - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Output of every preprocessing stage, in application order.
#[derive(Debug, Clone)]
pub struct PreprocessStages {
    pub gamma: RawImage,
    pub filtered: RawImage,
    pub resized: RawImage,
    pub normalized: RawImage,
}

impl PreprocessStages {
    /// `(file stem, image)` pairs for stage dumps.
    pub fn named(&self) -> [(&'static str, &RawImage); 4] {
        [
            ("01_gamma", &self.gamma),
            ("02_gaussian", &self.filtered),
            ("03_resized", &self.resized),
            ("04_normalized", &self.normalized),
        ]
    }
}

pub fn preprocess_stages(img: &RawImage, cfg: &PreprocessConfig) -> Result<PreprocessStages> {
    cfg.validate()?;
    let gamma = gamma_correct(img, cfg.gamma)?;
    let filtered = gaussian_filter(&gamma, &gaussian_kernel(cfg.kernel_size, cfg.sigma)?);
    let resized = resize(&filtered, cfg.target_height, cfg.target_width)?;
    let normalized = normalize(&resized);
    Ok(PreprocessStages {
        gamma,
        filtered,
        resized,
        normalized,
    })
}

/// Gamma correction, Gaussian filter, resize, normalize.
pub fn preprocess(img: &RawImage, cfg: &PreprocessConfig) -> Result<RawImage> {
    Ok(preprocess_stages(img, cfg)?.normalized)
}

fn unreadable(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn read_luma(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| unreadable(path, e))?
        .with_guessed_format()
        .map_err(|e| unreadable(path, e))?;
    Ok(reader.decode().map_err(|e| unreadable(path, e))?.to_luma8())
}

/// Loads a PNG or PGM as a single-channel image.
pub fn load_image(path: &Path) -> Result<RawImage> {
    let g = read_luma(path)?;
    let (w, h) = (g.width() as usize, g.height() as usize);
    RawImage::gray(h, w, g.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect())
}

/// Loads a mask; any pixel above mid-gray is foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let g = read_luma(path)?;
    let (w, h) = (g.width() as usize, g.height() as usize);
    Mask::new(h, w, g.pixels().map(|p| u8::from(p.0[0] > 127)).collect())
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_gray(path: &Path, width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Result<()> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| Luma([f(y as usize, x as usize)]));
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Saves a grayscale image (first plane; colour images are averaged) as PNG
/// or PGM depending on the extension.
pub fn save_image(img: &RawImage, path: &Path) -> Result<()> {
    let g = img.to_gray();
    write_gray(path, g.width, g.height, |y, x| to_u8(g.at(0, y, x)))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    write_gray(path, mask.width, mask.height, |y, x| if mask.get(y, x) { 255 } else { 0 })
}
