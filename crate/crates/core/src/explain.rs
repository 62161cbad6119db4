//! Grad-CAM heatmaps, mask overlays and training-curve plots.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::cls::ClsModel;
use crate::error::{shape_err, Error, Result};
use crate::imgproc::{to_u8, Mask, RawImage};
use crate::metrics::MetricsReport;
use crate::nn::{Mode, ParamStore, Session};
use crate::ops::bilinear_taps;
use crate::seg::SegModel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Attention output of the topmost decoder block.
pub const DEFAULT_SEG_LAYER: &str = "dec4.attention";
/// Spatial attention output of the classifier trunk.
pub const DEFAULT_CLS_LAYER: &str = "spatial_attention";

#[derive(Debug, Clone)]
pub struct GradCam {
    /// Per-channel weights: spatial mean of the score gradient.
    pub weights: Vec<f64>,
    /// `ReLU(Σ_c w_c A_c)` at the layer's resolution, before normalization.
    pub raw: Vec<f64>,
    pub layer_size: (usize, usize),
    /// Raw map upsampled to the input size and min-max normalized.
    pub heatmap: Vec<f64>,
    pub size: (usize, usize),
}

impl GradCam {
    pub fn to_image(&self) -> RawImage {
        RawImage::gray(self.size.0, self.size.1, self.heatmap.clone()).expect("heatmap lies in [0, 1]")
    }
}

fn upsample(map: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Grad-CAM of the scalar built by `score` with respect to the activation
/// tagged `layer`. `input` is a single `[1, C, H, W]` sample; the forward
/// pass runs in eval mode.
pub fn grad_cam<F>(store: &ParamStore, input: &Tensor, layer: &str, score: F) -> Result<GradCam>
where
    F: FnOnce(&mut Session<'_>, &mut Tape, Var) -> Result<Var>,
{
    let &[1, _, h, w] = input.shape() else {
        return Err(shape_err(format!("grad-cam expects one [1, C, H, W] sample, got {:?}", input.shape())));
    };
    let mut tape = Tape::new();
    let mut s = Session::new(store, Mode::Eval);
    let x = tape.variable(input.clone());
    let out = score(&mut s, &mut tape, x)?;
    let act = tape.tagged(layer).ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let &[1, c, lh, lw] = tape.shape(act) else {
        return Err(shape_err(format!("layer {layer} has shape {:?}", tape.shape(act))));
    };
    let grads = tape.backward(out)?;
    let hw = lh * lw;
    let da = grads.get_or_zeros(act, c * hw);
    let a = tape.value(act).values();
    let weights: Vec<f64> = (0..c).map(|k| da[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let raw: Vec<f64> = (0..hw)
        .map(|i| (0..c).map(|k| weights[k] * a[k * hw + i]).sum::<f64>().max(0.0))
        .collect();
    let up = upsample(&raw, (lh, lw), (h, w));
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let heatmap = if hi > lo {
        up.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; up.len()]
    };
    Ok(GradCam {
        weights,
        raw,
        layer_size: (lh, lw),
        heatmap,
        size: (h, w),
    })
}

/// Mean foreground logit over `region` (whole image when `None`).
pub fn seg_grad_cam(model: &SegModel, image: &Tensor, region: Option<&Mask>, layer: &str) -> Result<GradCam> {
    let &[1, _, h, w] = image.shape() else {
        return Err(shape_err(format!("expected [1, C, H, W], got {:?}", image.shape())));
    };
    let region = match region {
        Some(m) if (m.height, m.width) != (h, w) => return Err(shape_err("grad-cam region size")),
        Some(m) if m.count() > 0 => m.clone(),
        _ => Mask::from_fn(h, w, |_, _| true),
    };
    let k = model.config.num_classes;
    let n = region.count() as f64;
    let mut weights = vec![0.0; k * h * w];
    for (i, &m) in region.values.iter().enumerate() {
        weights[h * w + i] = f64::from(m) / n;
    }
    let weights = Tensor::from_vec(&[1, k, h, w], weights)?;
    grad_cam(&model.params, image, layer, |s, tape, x| {
        let logits = model.logits(s, tape, x)?;
        tape.weighted_sum(logits, &weights)
    })
}

/// Logit of `class` for a single masked input.
pub fn cls_grad_cam(model: &ClsModel, input: &Tensor, class: usize, layer: &str) -> Result<GradCam> {
    let k = model.config.num_classes;
    if class >= k {
        return Err(shape_err(format!("class {class} of {k}")));
    }
    let mut w = vec![0.0; k];
    w[class] = 1.0;
    let w = Tensor::from_vec(&[1, k], w)?;
    grad_cam(&model.params, input, layer, |s, tape, x| {
        let logits = model.logits(s, tape, x)?;
        tape.weighted_sum(logits, &w)
    })
}

/// 4-connected components of the foreground, as pixel lists in scan order.
pub fn components(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.values[start] == 0 {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            comp.push((y, x));
            let mut visit = |j: usize| {
                if !seen[j] && mask.values[j] != 0 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Foreground pixel with a 4-neighbour (inside the image) in the background.
fn on_contour(mask: &Mask, y: usize, x: usize) -> bool {
    let (h, w) = (mask.height, mask.width);
    (y > 0 && !mask.get(y - 1, x))
        || (y + 1 < h && !mask.get(y + 1, x))
        || (x > 0 && !mask.get(y, x - 1))
        || (x + 1 < w && !mask.get(y, x + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlayStats {
    /// One closed contour per 4-connected component.
    pub contours: usize,
    pub contour_pixels: usize,
    pub filled_pixels: usize,
}

const FILL: [f64; 3] = [0.1, 0.85, 0.2];
const FILL_ALPHA: f64 = 0.35;
const EDGE: [u8; 3] = [255, 40, 40];

/// RGB rendering of `image` with a translucent fill over the mask and its
/// contour drawn on top.
pub fn render_overlay(image: &RawImage, mask: &Mask) -> Result<(RgbImage, OverlayStats)> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(shape_err("overlay image and mask sizes differ"));
    }
    let g = image.to_gray();
    let comps = components(mask);
    let mut stats = OverlayStats {
        contours: 0,
        contour_pixels: 0,
        filled_pixels: 0,
    };
    let mut out = RgbImage::from_fn(g.width as u32, g.height as u32, |x, y| {
        let v = to_u8(g.at(0, y as usize, x as usize));
        Rgb([v, v, v])
    });
    for comp in &comps {
        let mut has_edge = false;
        for &(y, x) in comp {
            let px = out.get_pixel_mut(x as u32, y as u32);
            if on_contour(mask, y, x) {
                *px = Rgb(EDGE);
                stats.contour_pixels += 1;
                has_edge = true;
            } else {
                let v = g.at(0, y, x);
                *px = Rgb(FILL.map(|c| to_u8(v * (1.0 - FILL_ALPHA) + c * FILL_ALPHA)));
                stats.filled_pixels += 1;
            }
        }
        stats.contours += usize::from(has_edge);
    }
    Ok((out, stats))
}

pub fn emit_overlay(image: &RawImage, mask: &Mask, out_path: &Path) -> Result<OverlayStats> {
    let (img, stats) = render_overlay(image, mask)?;
    img.save(out_path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(stats)
}

/// `jet`-like colour map for heatmaps.
fn heat_colour(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [(1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0), (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0), (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0)]
}

/// The image blended with a coloured heatmap.
pub fn render_cam(image: &RawImage, cam: &GradCam) -> Result<RgbImage> {
    if (image.height, image.width) != cam.size {
        return Err(shape_err("heatmap and image sizes differ"));
    }
    let g = image.to_gray();
    Ok(RgbImage::from_fn(g.width as u32, g.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let v = g.at(0, y, x);
        let c = heat_colour(cam.heatmap[y * g.width + x]);
        Rgb(c.map(|c| to_u8(0.5 * v + 0.5 * c)))
    }))
}

/// Places equally sized panels side by side with a 2-pixel white gutter.
pub fn panels(images: &[RgbImage]) -> Result<RgbImage> {
    let first = images.first().ok_or_else(|| shape_err("no panels"))?;
    let (w, h) = first.dimensions();
    if images.iter().any(|i| i.dimensions() != (w, h)) {
        return Err(shape_err("panels of different sizes"));
    }
    let gutter = 2;
    let n = images.len() as u32;
    let mut out = RgbImage::from_pixel(n * w + (n - 1) * gutter, h, Rgb([255, 255, 255]));
    for (k, img) in images.iter().enumerate() {
        let x0 = k as u32 * (w + gutter);
        for (x, y, p) in img.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *p);
        }
    }
    Ok(out)
}

type Column = (&'static str, fn(&MetricsReport) -> Option<f64>);

const COLUMNS: [Column; 12] = [
    ("train_loss", |r| r.train_loss),
    ("loss_total", |r| r.loss_total),
    ("loss_focal", |r| r.loss_focal),
    ("loss_jaccard", |r| r.loss_jaccard),
    ("loss_dice", |r| r.loss_dice),
    ("dice", |r| r.dice),
    ("iou", |r| r.iou),
    ("pixel_accuracy", |r| r.pixel_accuracy),
    ("cls_accuracy", |r| r.cls_accuracy),
    ("precision", |r| r.precision),
    ("recall", |r| r.recall),
    ("f1", |r| r.f1),
];

/// Per-epoch CSV: `epoch,learning_rate,` then every column with any value.
pub fn curves_csv(reports: &[MetricsReport]) -> String {
    let cols: Vec<&Column> = COLUMNS.iter().filter(|(_, f)| reports.iter().any(|r| f(r).is_some())).collect();
    let mut s = String::from("epoch,learning_rate");
    for (name, _) in &cols {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    let cell = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
    for (i, r) in reports.iter().enumerate() {
        let _ = write!(s, "{},{}", r.epoch.unwrap_or(i + 1), cell(r.learning_rate));
        for (_, f) in &cols {
            let _ = write!(s, ",{}", cell(f(r)));
        }
        s.push('\n');
    }
    s
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot of one series, y axis from 0 to max(1, max value), with
/// gridlines at quarters.
pub fn plot_series(values: &[f64]) -> RgbImage {
    let (w, h, m) = (480u32, 240u32, 16i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let top = values.iter().copied().filter(|v| v.is_finite()).fold(1.0f64, f64::max);
    let (pw, ph) = (w as i64 - 2 * m, h as i64 - 2 * m);
    for q in 0..=4 {
        let y = m + ph - ph * q / 4;
        draw_line(&mut img, (m, y), (m + pw, y), Rgb([225, 225, 225]));
    }
    draw_line(&mut img, (m, m), (m, m + ph), Rgb([0, 0, 0]));
    draw_line(&mut img, (m, m + ph), (m + pw, m + ph), Rgb([0, 0, 0]));
    let n = values.len().max(2) as i64 - 1;
    let pt = |i: usize, v: f64| (m + pw * i as i64 / n, m + ph - (ph as f64 * (v / top).clamp(0.0, 1.0)).round() as i64);
    for (i, pair) in values.windows(2).enumerate() {
        draw_line(&mut img, pt(i, pair[0]), pt(i + 1, pair[1]), Rgb([30, 90, 200]));
    }
    if let [v] = values {
        let (x, y) = pt(0, *v);
        draw_line(&mut img, (x - 2, y), (x + 2, y), Rgb([30, 90, 200]));
    }
    img
}

/// Writes `curves.csv` plus one `curve_<metric>.png` per populated column.
pub fn emit_curves(reports: &[MetricsReport], dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("curves.csv"), curves_csv(reports))?;
    let mut written = vec!["curves.csv".to_string()];
    for (name, f) in COLUMNS {
        let values: Vec<f64> = reports.iter().filter_map(f).collect();
        if values.is_empty() {
            continue;
        }
        let file = format!("curve_{name}.png");
        plot_series(&values)
            .save(dir.join(&file))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        written.push(file);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cls::ClsNetConfig;
    use crate::seg::SegNetConfig;

    #[test]
    fn single_channel_score_recovers_that_channel() {
        // Activation = x itself (3 channels); score = mean of channel 1.
        let (h, w) = (4, 5);
        let vals: Vec<f64> = (0..3 * h * w).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let input = Tensor::from_vec(&[1, 3, h, w], vals.clone()).unwrap();
        let store = ParamStore::new();
        let cam = grad_cam(&store, &input, "feat", |_, tape, x| {
            let a = tape.scale(x, 1.0)?;
            tape.tag("feat", a);
            let c = tape.select_channel(a, 1)?;
            tape.mean(c)
        })
        .unwrap();
        let hw = (h * w) as f64;
        assert!(cam.weights[0].abs() < 1e-15 && cam.weights[2].abs() < 1e-15);
        assert!((cam.weights[1] - 1.0 / hw).abs() < 1e-15);
        let ch = &vals[h * w..2 * h * w];
        let (lo, hi) = ch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for (got, a) in cam.heatmap.iter().zip(ch) {
            assert!((got - (a - lo) / (hi - lo)).abs() < 1e-9);
        }
        for (r, a) in cam.raw.iter().zip(ch) {
            assert!((r - a / hw).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_layer_is_reported() {
        let store = ParamStore::new();
        let input = Tensor::zeros(&[1, 1, 2, 2]);
        let err = grad_cam(&store, &input, "nope", |_, tape, x| tape.sum(x)).unwrap_err();
        assert!(matches!(err, Error::UnknownLayer(l) if l == "nope"));
    }

    #[test]
    fn network_heatmaps_are_normalized() {
        let seg = SegModel::new(SegNetConfig::tiny().with_input(32, 32), 3).unwrap();
        let x = Tensor::from_vec(&[1, 1, 32, 32], (0..1024).map(|i| ((i * 13) % 29) as f64 / 29.0).collect()).unwrap();
        let cam = seg_grad_cam(&seg, &x, None, DEFAULT_SEG_LAYER).unwrap();
        assert_eq!(cam.size, (32, 32));
        assert_eq!(cam.heatmap.len(), 1024);
        assert!(cam.heatmap.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(cam.raw.iter().all(|&v| v >= 0.0));

        let cls = ClsModel::new(ClsNetConfig::tiny().with_input(16, 16), 3).unwrap();
        let x = Tensor::full(&[1, 3, 16, 16], 0.3);
        let cam = cls_grad_cam(&cls, &x, 2, DEFAULT_CLS_LAYER).unwrap();
        assert_eq!(cam.size, (16, 16));
        assert!(cam.heatmap.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn flood_count(mask: &Mask) -> usize {
        // Recursive flood fill, deliberately independent of `components`.
        fn fill(m: &Mask, seen: &mut [bool], y: isize, x: isize) {
            if y < 0 || x < 0 || y >= m.height as isize || x >= m.width as isize {
                return;
            }
            let i = y as usize * m.width + x as usize;
            if seen[i] || m.values[i] == 0 {
                return;
            }
            seen[i] = true;
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                fill(m, seen, y + dy, x + dx);
            }
        }
        let mut seen = vec![false; mask.values.len()];
        let mut n = 0;
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x) && !seen[y * mask.width + x] {
                    n += 1;
                    fill(mask, &mut seen, y as isize, x as isize);
                }
            }
        }
        n
    }

    #[test]
    fn overlay_contours_match_components() {
        let img = RawImage::constant(12, 12, 0.5).unwrap();
        let (plain, s) = render_overlay(&img, &Mask::empty(12, 12)).unwrap();
        assert_eq!(s.contours, 0);
        assert!(plain.pixels().all(|p| p.0 == [128, 128, 128]));

        let (full, s) = render_overlay(&img, &Mask::from_fn(12, 12, |_, _| true)).unwrap();
        assert_eq!((s.filled_pixels, s.contour_pixels), (144, 0));
        assert!(full.pixels().all(|p| p.0 != [128, 128, 128]));

        // Checkerboard of 3x3 blocks: blocks meet only at corners.
        let checker = Mask::from_fn(12, 12, |y, x| (y / 3 + x / 3) % 2 == 0);
        let (_, s) = render_overlay(&img, &checker).unwrap();
        assert_eq!(s.contours, flood_count(&checker));
        assert_eq!(s.contours, 8);
        let blobs = Mask::from_fn(12, 12, |y, x| (y < 4 && x < 4) || (y > 6 && x > 5) || (y == 10 && x == 1));
        assert_eq!(render_overlay(&img, &blobs).unwrap().1.contours, flood_count(&blobs));
    }

    #[test]
    fn curves_files() {
        let reports: Vec<MetricsReport> = (0..3)
            .map(|i| MetricsReport {
                epoch: Some(i + 1),
                learning_rate: Some(0.1),
                train_loss: Some(1.0 / (i + 1) as f64),
                dice: Some(0.3 * i as f64),
                ..MetricsReport::default()
            })
            .collect();
        let csv = curves_csv(&reports);
        assert_eq!(csv.lines().next().unwrap(), "epoch,learning_rate,train_loss,dice");
        assert_eq!(csv.lines().count(), 4);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_curves(&reports, dir.path()).unwrap();
        assert_eq!(files, vec!["curves.csv", "curve_train_loss.png", "curve_dice.png"]);
        assert!(dir.path().join("curve_dice.png").is_file());
    }

    #[test]
    fn panel_layout() {
        let a = RgbImage::from_pixel(4, 3, Rgb([0, 0, 0]));
        let p = panels(&[a.clone(), a.clone(), a.clone(), a]).unwrap();
        assert_eq!(p.dimensions(), (4 * 4 + 3 * 2, 3));
    }
}
