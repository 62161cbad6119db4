//! Dataset loading (BUSI directory layout), augmentation, class balancing,
//! synthetic data and stratified splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{self, gaussian_filter, gaussian_kernel, Mask, PreprocessConfig, RawImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Malignant,
    Normal,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Benign, Label::Malignant, Label::Normal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
            Label::Normal => "normal",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown class {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
    Augmented { parent: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: RawImage,
    pub mask: Mask,
    pub label: Label,
    pub id: String,
    pub provenance: Provenance,
}

impl ImageSample {
    pub fn new(image: RawImage, mask: Mask, label: Label, id: impl Into<String>, provenance: Provenance) -> Result<Self> {
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs mask {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        Ok(Self {
            image,
            mask,
            label,
            id: id.into(),
            provenance,
        })
    }

    pub fn is_augmented(&self) -> bool {
        matches!(self.provenance, Provenance::Augmented { .. })
    }

    pub fn parent(&self) -> Option<&str> {
        match &self.provenance {
            Provenance::Augmented { parent } => Some(parent),
            _ => None,
        }
    }
}

/// Preprocesses the image and resizes the mask (nearest-neighbour) to match.
pub fn preprocess_sample(sample: &ImageSample, cfg: &PreprocessConfig) -> Result<ImageSample> {
    let image = imgproc::preprocess(&sample.image, cfg)?;
    let mask = sample.mask.resize(cfg.target_height, cfg.target_width);
    ImageSample::new(image, mask, sample.label, sample.id.clone(), sample.provenance.clone())
}

/// Splits `"benign (12)_mask_1"` style stems into (base, is_mask).
fn mask_base(stem: &str) -> Option<&str> {
    let i = stem.find("_mask")?;
    let rest = &stem[i + "_mask".len()..];
    let valid = rest.is_empty() || rest.strip_prefix('_').is_some_and(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()));
    valid.then(|| &stem[..i])
}

/// Sort key putting `"x (2)"` before `"x (10)"`.
fn natural_key(stem: &str) -> (String, u64, String) {
    match stem.rsplit_once('(') {
        Some((prefix, rest)) => {
            let num = rest.strip_suffix(')').and_then(|d| d.trim().parse().ok());
            (prefix.to_string(), num.unwrap_or(u64::MAX), stem.to_string())
        }
        None => (stem.to_string(), u64::MAX, stem.to_string()),
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm")
    )
}

/// Loads a `benign/ malignant/ normal/` tree. Images are grayscale and not
/// preprocessed; multiple masks of one image are OR-ed together.
pub fn load_busi(dir: &Path) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    let mut found_any = false;
    for label in Label::ALL {
        let class_dir = dir.join(label.name());
        if !class_dir.is_dir() {
            continue;
        }
        found_any = true;
        let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut masks: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        for entry in fs::read_dir(&class_dir)? {
            let path = entry?.path();
            if !path.is_file() || !is_image_file(&path) {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            match mask_base(&stem) {
                Some(base) => masks.entry(base.to_string()).or_default().push(path),
                None => {
                    images.insert(stem, path);
                }
            }
        }
        let mut stems: Vec<&String> = images.keys().collect();
        stems.sort_by_key(|s| natural_key(s));
        for stem in stems {
            let path = &images[stem];
            let image = imgproc::load_image(path)?;
            let mut mask_paths = masks.get(stem.as_str()).cloned().unwrap_or_default();
            mask_paths.sort();
            let mask = if mask_paths.is_empty() {
                if label != Label::Normal {
                    return Err(Error::MissingMask(path.clone()));
                }
                Mask::empty(image.height, image.width)
            } else {
                let mut m = Mask::empty(image.height, image.width);
                for mp in &mask_paths {
                    let next = imgproc::load_mask(mp)?;
                    m = m.union(&next).map_err(|_| Error::UnreadableImage {
                        path: mp.clone(),
                        reason: format!("mask size differs from image {}x{}", image.height, image.width),
                    })?;
                }
                m
            };
            out.push(ImageSample::new(image, mask, label, stem.clone(), Provenance::Real)?);
        }
    }
    if !found_any {
        return Err(Error::UnreadableImage {
            path: dir.to_path_buf(),
            reason: "no benign/, malignant/ or normal/ subdirectory".into(),
        });
    }
    Ok(out)
}

/// Writes samples in the BUSI layout (`<class>/<id>.png`, `<class>/<id>_mask.png`).
pub fn export_busi(samples: &[ImageSample], dir: &Path) -> Result<()> {
    for label in Label::ALL {
        fs::create_dir_all(dir.join(label.name()))?;
    }
    for s in samples {
        let class_dir = dir.join(s.label.name());
        imgproc::save_image(&s.image, &class_dir.join(format!("{}.png", s.id)))?;
        imgproc::save_mask(&s.mask, &class_dir.join(format!("{}_mask.png", s.id)))?;
    }
    Ok(())
}

/// Ranges the random transforms are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub max_rotation_deg: f64,
    pub zoom_range: (f64, f64),
    pub max_shear_deg: f64,
    pub exposure_range: (f64, f64),
    /// Smallest fraction of the image area a crop keeps.
    pub min_crop_area: f64,
    /// Apply every transform at once instead of one chosen at random.
    pub compose: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            max_rotation_deg: 20.0,
            zoom_range: (0.9, 1.1),
            max_shear_deg: 10.0,
            exposure_range: (0.8, 1.2),
            min_crop_area: 0.9,
            compose: false,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("augmentation {what}")));
        if !(self.max_rotation_deg >= 0.0 && self.max_shear_deg >= 0.0 && self.max_shear_deg < 90.0) {
            return bad("angles");
        }
        if !(self.zoom_range.0 > 0.0 && self.zoom_range.0 <= self.zoom_range.1) {
            return bad("zoom range");
        }
        if !(self.exposure_range.0 > 0.0 && self.exposure_range.0 <= self.exposure_range.1) {
            return bad("exposure range");
        }
        if !(self.min_crop_area > 0.0 && self.min_crop_area <= 1.0) {
            return bad("crop area");
        }
        Ok(())
    }

    /// Draws one transform.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Transform {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let range = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mut full = Transform {
            rotation_deg: sym(rng, self.max_rotation_deg),
            zoom: range(rng, self.zoom_range),
            shear_deg: sym(rng, self.max_shear_deg),
            exposure_gamma: range(rng, self.exposure_range),
            crop: Crop {
                area: range(rng, (self.min_crop_area, 1.0)),
                offset_y: rng.random(),
                offset_x: rng.random(),
            },
        };
        if self.compose {
            return full;
        }
        let id = Transform::identity();
        match rng.random_range(0..5) {
            0 => full = Transform { rotation_deg: full.rotation_deg, ..id },
            1 => full = Transform { zoom: full.zoom, ..id },
            2 => full = Transform { shear_deg: full.shear_deg, ..id },
            3 => full = Transform { exposure_gamma: full.exposure_gamma, ..id },
            _ => full = Transform { crop: full.crop, ..id },
        }
        full
    }
}

/// Crop keeping `area` of the image; offsets in `[0, 1]` place the window
/// within the free margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub area: f64,
    pub offset_y: f64,
    pub offset_x: f64,
}

/// One concrete augmentation. Geometry is applied about the image centre,
/// image by bilinear sampling and mask by nearest neighbour; exposure is
/// a gamma on the image only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub rotation_deg: f64,
    pub zoom: f64,
    pub shear_deg: f64,
    pub exposure_gamma: f64,
    pub crop: Crop,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            zoom: 1.0,
            shear_deg: 0.0,
            exposure_gamma: 1.0,
            crop: Crop {
                area: 1.0,
                offset_y: 0.0,
                offset_x: 0.0,
            },
        }
    }

    fn is_affine_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.zoom == 1.0 && self.shear_deg == 0.0
    }

    /// Output-to-source map `(x, y) -> (x', y')` relative to the centre:
    /// inverse of rotation · shear · zoom.
    fn inverse_matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let t = self.shear_deg.to_radians().tan();
        let z = 1.0 / self.zoom;
        // R^-1 = [[c, s], [-s, c]], Sh^-1 = [[1, -t], [0, 1]], Z^-1 = z·I.
        let r = [[c, s], [-s, c]];
        let sh = [[r[0][0] - t * r[1][0], r[0][1] - t * r[1][1]], r[1]];
        [[z * sh[0][0], z * sh[0][1]], [z * sh[1][0], z * sh[1][1]]]
    }
}

fn bilinear_at(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return 0.0;
    }
    let (y, x) = (y.clamp(0.0, (h - 1) as f64), x.clamp(0.0, (w - 1) as f64));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn warp(sample: &ImageSample, t: &Transform) -> (RawImage, Mask) {
    let img = &sample.image;
    let (h, w) = (img.height, img.width);
    let m = t.inverse_matrix();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = |y: usize, x: usize| {
        let (px, py) = (x as f64 - cx, y as f64 - cy);
        (cy + m[1][0] * px + m[1][1] * py, cx + m[0][0] * px + m[0][1] * py)
    };
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                pixels.push(bilinear_at(plane, h, w, sy, sx).clamp(0.0, 1.0));
            }
        }
    }
    let mask = Mask::from_fn(h, w, |y, x| {
        let (sy, sx) = src(y, x);
        let (ry, rx) = (sy.round(), sx.round());
        ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w && sample.mask.get(ry as usize, rx as usize)
    });
    (RawImage { pixels, ..*img }, mask)
}

fn crop(image: &RawImage, mask: &Mask, c: &Crop) -> Result<(RawImage, Mask)> {
    if !(c.area > 0.0 && c.area <= 1.0) {
        return Err(Error::DegenerateCrop);
    }
    let (h, w) = (image.height, image.width);
    let side = c.area.sqrt();
    let ch = ((h as f64 * side).round() as usize).min(h);
    let cw = ((w as f64 * side).round() as usize).min(w);
    if ch == 0 || cw == 0 {
        return Err(Error::DegenerateCrop);
    }
    if (ch, cw) == (h, w) {
        return Ok((image.clone(), mask.clone()));
    }
    let oy = ((h - ch) as f64 * c.offset_y.clamp(0.0, 1.0)).round() as usize;
    let ox = ((w - cw) as f64 * c.offset_x.clamp(0.0, 1.0)).round() as usize;
    let mut pixels = Vec::with_capacity(image.channels * ch * cw);
    for p in 0..image.channels {
        let plane = image.plane(p);
        for y in 0..ch {
            pixels.extend_from_slice(&plane[(oy + y) * w + ox..(oy + y) * w + ox + cw]);
        }
    }
    let cropped = RawImage::new(ch, cw, image.channels, pixels)?;
    let cmask = Mask::from_fn(ch, cw, |y, x| mask.get(oy + y, ox + x));
    Ok((imgproc::resize(&cropped, h, w)?, cmask.resize(h, w)))
}

/// Applies `t` to image and mask alike (exposure to the image only).
pub fn augment_with(sample: &ImageSample, t: &Transform, id: impl Into<String>) -> Result<ImageSample> {
    let (mut image, mut mask) = if t.is_affine_identity() {
        (sample.image.clone(), sample.mask.clone())
    } else {
        warp(sample, t)
    };
    (image, mask) = crop(&image, &mask, &t.crop)?;
    if t.exposure_gamma != 1.0 {
        image = imgproc::gamma_correct(&image, t.exposure_gamma)?;
    }
    let parent = match &sample.provenance {
        Provenance::Augmented { parent } => parent.clone(),
        _ => sample.id.clone(),
    };
    ImageSample::new(image, mask, sample.label, id, Provenance::Augmented { parent })
}

/// Draws a transform from `params` and applies it.
pub fn augment<R: Rng + ?Sized>(sample: &ImageSample, rng: &mut R, params: &AugmentParams, id: impl Into<String>) -> Result<ImageSample> {
    params.validate()?;
    augment_with(sample, &params.sample(rng), id)
}

/// Tops every class up to the majority count with augmented copies of its
/// own samples, cycling through parents in order. Originals are kept.
pub fn balance_classes<R: Rng + ?Sized>(samples: &[ImageSample], rng: &mut R, params: &AugmentParams) -> Result<Vec<ImageSample>> {
    params.validate()?;
    let by_class: Vec<Vec<&ImageSample>> = Label::ALL
        .iter()
        .map(|&l| samples.iter().filter(|s| s.label == l && !s.is_augmented()).collect())
        .collect();
    for (l, members) in Label::ALL.iter().zip(&by_class) {
        if members.is_empty() {
            return Err(Error::EmptyClass(l.name().into()));
        }
    }
    let counts: Vec<usize> = Label::ALL
        .iter()
        .map(|&l| samples.iter().filter(|s| s.label == l).count())
        .collect();
    let target = *counts.iter().max().expect("three classes");
    let mut out = samples.to_vec();
    for (members, &have) in by_class.iter().zip(&counts) {
        for k in 0..target - have {
            let parent = members[k % members.len()];
            let id = format!("{}#aug{}", parent.id, k / members.len());
            out.push(augment_with(parent, &params.sample(rng), id)?);
        }
    }
    Ok(out)
}

/// Shape drawn by the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthShape {
    None,
    /// Centre, semi-axes and orientation (radians).
    Ellipse { cy: f64, cx: f64, a: f64, b: f64, theta: f64 },
    /// Star-convex blob: radius `r(φ) = r0 · (1 + Σ amp_k · max(0, cos(freq_k φ + phase_k))^4)`.
    Spiculated { cy: f64, cx: f64, r0: f64, spikes: Vec<(f64, f64, f64)> },
}

impl SynthShape {
    /// Normalized radius: membership iff `<= 1`.
    fn level(&self, y: f64, x: f64) -> f64 {
        match *self {
            SynthShape::None => f64::INFINITY,
            SynthShape::Ellipse { cy, cx, a, b, theta } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = theta.sin_cos();
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                (u * u + v * v).sqrt()
            }
            SynthShape::Spiculated { cy, cx, r0, ref spikes } => {
                let (dy, dx) = (y - cy, x - cx);
                let phi = dy.atan2(dx);
                let r = r0 * (1.0 + spikes.iter().map(|&(amp, f, ph)| amp * (f * phi + ph).cos().max(0.0).powi(4)).sum::<f64>());
                (dy * dy + dx * dx).sqrt() / r
            }
        }
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        self.level(y, x) <= 1.0
    }

    pub fn mask(&self, size: usize) -> Mask {
        Mask::from_fn(size, size, |y, x| self.contains(y as f64, x as f64))
    }
}

fn sample_rng(seed: u64, label: Label, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label.index() as u64) << 32) | index as u64);
    rng
}

fn draw_shape(rng: &mut ChaCha8Rng, label: Label, size: usize) -> SynthShape {
    let s = size as f64;
    let centre = |rng: &mut ChaCha8Rng| (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
    match label {
        Label::Normal => SynthShape::None,
        Label::Benign => {
            let (cy, cx) = centre(rng);
            SynthShape::Ellipse {
                cy,
                cx,
                a: rng.random_range(0.12..0.24) * s,
                b: rng.random_range(0.09..0.17) * s,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            }
        }
        Label::Malignant => {
            let (cy, cx) = centre(rng);
            let n = rng.random_range(5..9);
            let spikes = (0..n)
                .map(|_| {
                    (
                        rng.random_range(0.3..0.7),
                        f64::from(rng.random_range(3..8u32)),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            SynthShape::Spiculated {
                cy,
                cx,
                r0: rng.random_range(0.09..0.15) * s,
                spikes,
            }
        }
    }
}

/// Relative speckle strength outside lesions.
const BACKGROUND_GRAIN: f64 = 0.45;

/// Multiplicative Rayleigh speckle with unit mean.
fn speckle(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    (-2.0 * u.ln()).sqrt() / (std::f64::consts::PI / 2.0).sqrt()
}

/// One synthetic sample and the shape its mask was drawn from.
pub fn synth_sample(label: Label, index: usize, size: usize, seed: u64) -> Result<(ImageSample, SynthShape)> {
    if size < 32 {
        return Err(Error::InvalidConfig(format!("synthetic images need size >= 32, got {size}")));
    }
    let mut rng = sample_rng(seed, label, index);
    let shape = draw_shape(&mut rng, label, size);
    let s = size as f64;
    let base = rng.random_range(0.22..0.32);
    let tilt = rng.random_range(-0.08..0.08);
    // Benign interiors are smooth; malignant interiors are brighter at the
    // rim with coarser speckle.
    let (lift, grain) = match label {
        Label::Benign => (0.36, 0.35),
        Label::Malignant => (0.30, 0.6),
        Label::Normal => (0.0, 0.0),
    };
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let level = shape.level(y as f64, x as f64);
            let soft = 1.0 / (1.0 + ((level - 1.0) / 0.06).exp());
            let mut v = base + tilt * (y as f64 / s - 0.5);
            let noise = speckle(&mut rng);
            if label == Label::Malignant {
                v += soft * lift * (0.6 + 0.6 * level.min(1.0));
            } else {
                v += soft * lift;
            }
            let g = BACKGROUND_GRAIN * (1.0 - soft) + grain * soft;
            pixels.push((v * (1.0 + g * (noise - 1.0))).clamp(0.0, 1.0));
        }
    }
    let raw = RawImage::gray(size, size, pixels)?;
    let image = gaussian_filter(&raw, &gaussian_kernel(3, 0.7)?);
    let mask = shape.mask(size);
    let id = format!("{} ({})", label.name(), index + 1);
    Ok((ImageSample::new(image, mask, label, id, Provenance::Synthetic)?, shape))
}

/// `n_per_class` samples of each class, deterministic in `seed`.
pub fn synth_generate(n_per_class: usize, size: usize, seed: u64) -> Result<Vec<ImageSample>> {
    let mut out = Vec::with_capacity(3 * n_per_class);
    for label in Label::ALL {
        for i in 0..n_per_class {
            out.push(synth_sample(label, i, size, seed)?.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub validation: Vec<ImageSample>,
    pub seed: u64,
    pub fractions: (f64, f64),
}

/// Stratified split of the non-augmented samples; augmented samples follow
/// their parent into train and are dropped when the parent is validated.
pub fn split(samples: &[ImageSample], fractions: (f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (tr, va) = fractions;
    if !(tr >= 0.0 && va >= 0.0 && (tr + va - 1.0).abs() <= 1e-9) {
        return Err(Error::InvalidFractions(tr, va));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for label in Label::ALL {
        let mut members: Vec<&ImageSample> = samples.iter().filter(|s| s.label == label && !s.is_augmented()).collect();
        members.shuffle(&mut rng);
        let n_train = (members.len() as f64 * tr).round() as usize;
        for (i, s) in members.into_iter().enumerate() {
            if i < n_train {
                train.push(s.clone());
            } else {
                validation.push(s.clone());
            }
        }
    }
    let train_ids: HashSet<String> = train.iter().map(|s| s.id.clone()).collect();
    train.extend(
        samples
            .iter()
            .filter(|s| s.parent().is_some_and(|p| train_ids.contains(p)))
            .cloned(),
    );
    Ok(DatasetSplit {
        train,
        validation,
        seed,
        fractions,
    })
}
