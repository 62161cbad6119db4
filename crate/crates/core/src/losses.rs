//! Training losses as fused tape operations.
//!
//! Probability tensors are `[N, K, ...]` with the class axis at position 1;
//! targets are one-hot tensors of the same shape.

use crate::error::{shape_err, Error, Result};
use crate::imgproc::Mask;
use crate::ops::compensated_sum;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ops::rule;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Smoothing term of the soft overlap losses.
pub const OVERLAP_EPS: f64 = 1e-6;
/// Channel treated as foreground by the overlap losses.
pub const FOREGROUND: usize = 1;

/// `-(1 - p)^γ · ln p` with `p` clamped to `[PROB_CLAMP, 1]`.
pub fn focal_term(p: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0);
    -(1.0 - p).powf(gamma) * p.ln()
}

/// `-ln p` with the same clamp as [`focal_term`].
pub fn cross_entropy_term(p: f64) -> f64 {
    -p.clamp(PROB_CLAMP, 1.0).ln()
}

fn focal_derivative(p: f64, gamma: f64) -> f64 {
    if !(PROB_CLAMP..=1.0).contains(&p) {
        return 0.0;
    }
    let q = 1.0 - p;
    let lead = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p.ln()
    };
    lead - q.powf(gamma) / p
}

/// Layout of a `[N, K, ...]` tensor as (batch, classes, positions per item).
fn class_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(format!("expected [N, K, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_target(tape: &Tape, probs: Var, target: &Tensor) -> Result<(usize, usize, usize)> {
    let shape = tape.shape(probs);
    if shape != target.shape() {
        return Err(shape_err(format!(
            "target {:?} vs prediction {:?}",
            target.shape(),
            shape
        )));
    }
    class_layout(shape)
}

/// One-hot `[N, K]` targets from class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(shape_err(format!("label {l} with {classes} classes")));
        }
        v[i * classes + l] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), classes], v)
}

/// `[N, 2, H, W]` background/foreground targets from binary masks.
pub fn one_hot_masks(masks: &[&Mask]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| shape_err("no masks"))?;
    let (h, w) = (first.height, first.width);
    let hw = h * w;
    let mut v = vec![0.0; masks.len() * 2 * hw];
    for (b, m) in masks.iter().enumerate() {
        if (m.height, m.width) != (h, w) {
            return Err(shape_err("masks of different sizes in one batch"));
        }
        let base = b * 2 * hw;
        for (i, &px) in m.values.iter().enumerate() {
            let fg = usize::from(px != 0);
            v[base + fg * hw + i] = 1.0;
        }
    }
    Tensor::from_vec(&[masks.len(), 2, h, w], v)
}

/// Mean focal loss over every position of the batch.
pub fn focal_loss(tape: &mut Tape, probs: Var, target: &Tensor, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidGamma(gamma));
    }
    let (n, k, inner) = check_target(tape, probs, target)?;
    let count = n * inner;
    if count == 0 {
        return Err(shape_err("focal loss over an empty batch"));
    }
    let ps = tape.value(probs).values();
    let gs = target.values();
    let mut pt = vec![0.0; count];
    for b in 0..n {
        for c in 0..k {
            let at = (b * k + c) * inner;
            for i in 0..inner {
                pt[b * inner + i] += gs[at + i] * ps[at + i];
            }
        }
    }
    let clamped: Vec<u64> = pt
        .chunks(64)
        .map(|c| c.iter().enumerate().fold(0u64, |m, (i, &p)| m | (u64::from(p < PROB_CLAMP) << i)))
        .collect();
    tape.record_branches(clamped);
    let loss = compensated_sum(pt.iter().map(|&p| focal_term(p, gamma))) / count as f64;
    let g = gs.to_vec();
    tape.push(
        Tensor::scalar(loss),
        &[probs],
        rule("focal_loss", move |ctx| {
            let scale = ctx.grad_output[0] / count as f64;
            let mut dx = vec![0.0; g.len()];
            for b in 0..n {
                for i in 0..inner {
                    let d = focal_derivative(pt[b * inner + i], gamma) * scale;
                    for c in 0..k {
                        let at = (b * k + c) * inner + i;
                        dx[at] = g[at] * d;
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Foreground sums `(Σ p·g, Σ p, Σ g)` pooled over the batch.
fn overlap_sums(ps: &[f64], gs: &[f64], n: usize, k: usize, inner: usize) -> (f64, f64, f64) {
    let fg = |b: usize| (b * k + FOREGROUND) * inner;
    let idx = || (0..n).flat_map(move |b| fg(b)..fg(b) + inner);
    (
        compensated_sum(idx().map(|i| ps[i] * gs[i])),
        compensated_sum(idx().map(|i| ps[i])),
        compensated_sum(idx().map(|i| gs[i])),
    )
}

#[derive(Clone, Copy)]
enum Overlap {
    Jaccard,
    Dice,
}

fn overlap_loss(tape: &mut Tape, probs: Var, target: &Tensor, kind: Overlap) -> Result<Var> {
    let (n, k, inner) = check_target(tape, probs, target)?;
    if k <= FOREGROUND {
        return Err(shape_err(format!("overlap loss needs a foreground channel, got K={k}")));
    }
    let g = target.values().to_vec();
    let (i, p, t) = overlap_sums(tape.value(probs).values(), &g, n, k, inner);
    let (num, den) = match kind {
        Overlap::Jaccard => (i + OVERLAP_EPS, p + t - i + OVERLAP_EPS),
        Overlap::Dice => (2.0 * i + OVERLAP_EPS, p + t + OVERLAP_EPS),
    };
    let name = match kind {
        Overlap::Jaccard => "jaccard_loss",
        Overlap::Dice => "dice_loss",
    };
    tape.push(
        Tensor::scalar(1.0 - num / den),
        &[probs],
        rule(name, move |ctx| {
            let up = ctx.grad_output[0];
            let mut dx = vec![0.0; g.len()];
            for b in 0..n {
                let at = (b * k + FOREGROUND) * inner;
                for j in at..at + inner {
                    // d(num)/dp and d(den)/dp for this pixel.
                    let (dn, dd) = match kind {
                        Overlap::Jaccard => (g[j], 1.0 - g[j]),
                        Overlap::Dice => (2.0 * g[j], 1.0),
                    };
                    dx[j] = -up * (dn * den - num * dd) / (den * den);
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Soft Jaccard loss on the foreground channel, pooled over the batch.
pub fn jaccard_loss(tape: &mut Tape, probs: Var, target: &Tensor) -> Result<Var> {
    overlap_loss(tape, probs, target, Overlap::Jaccard)
}

/// Soft Dice loss on the foreground channel, pooled over the batch.
pub fn dice_loss(tape: &mut Tape, probs: Var, target: &Tensor) -> Result<Var> {
    overlap_loss(tape, probs, target, Overlap::Dice)
}

/// Handles to the individual terms of the segmentation objective.
#[derive(Debug, Clone, Copy)]
pub struct SegLoss {
    pub total: Var,
    pub focal: Var,
    pub jaccard: Var,
    pub dice: Option<Var>,
}

impl SegLoss {
    /// `(total, focal, jaccard, dice)` values.
    pub fn values(&self, tape: &Tape) -> (f64, f64, f64, Option<f64>) {
        let v = |x: Var| tape.value(x).values()[0];
        (v(self.total), v(self.focal), v(self.jaccard), self.dice.map(v))
    }
}

/// Focal + Jaccard, plus Dice when `include_dice` is set.
pub fn total_seg_loss(
    tape: &mut Tape,
    probs: Var,
    target: &Tensor,
    gamma: f64,
    include_dice: bool,
) -> Result<SegLoss> {
    let focal = focal_loss(tape, probs, target, gamma)?;
    let jaccard = jaccard_loss(tape, probs, target)?;
    let mut total = tape.add(focal, jaccard)?;
    let dice = if include_dice {
        let d = dice_loss(tape, probs, target)?;
        total = tape.add(total, d)?;
        Some(d)
    } else {
        None
    };
    Ok(SegLoss {
        total,
        focal,
        jaccard,
        dice,
    })
}

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    let &[n, k] = shape else {
        return Err(shape_err(format!("expected [N, K], got {shape:?}")));
    };
    if k < 2 || labels.len() != n || labels.iter().any(|&l| l >= k) || n == 0 {
        return Err(shape_err(format!(
            "{} labels for scores of shape {shape:?}",
            labels.len()
        )));
    }
    Ok((n, k))
}

/// Categorical cross-entropy from raw class scores, in log-sum-exp form.
pub fn cce_from_logits(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = check_labels(tape.shape(logits), labels)?;
    let xs = tape.value(logits).values();
    let mut soft = vec![0.0; n * k];
    let mut terms = Vec::with_capacity(n);
    for b in 0..n {
        let row = &xs[b * k..(b + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for c in 0..k {
            soft[b * k + c] = (row[c] - m).exp() / z;
        }
        terms.push(m + z.ln() - row[labels[b]]);
    }
    let loss = compensated_sum(terms.into_iter()) / n as f64;
    let labels = labels.to_vec();
    tape.push(
        Tensor::scalar(loss),
        &[logits],
        rule("cce_logits", move |ctx| {
            let scale = ctx.grad_output[0] / n as f64;
            let mut dx = soft.clone();
            for (b, &l) in labels.iter().enumerate() {
                dx[b * k + l] -= 1.0;
            }
            dx.iter_mut().for_each(|d| *d *= scale);
            vec![Some(dx)]
        }),
    )
}

/// Categorical cross-entropy from probabilities, clamped at [`PROB_CLAMP`].
pub fn cce_from_probs(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = check_labels(tape.shape(probs), labels)?;
    let ps = tape.value(probs).values();
    let pt: Vec<f64> = labels.iter().enumerate().map(|(b, &l)| ps[b * k + l]).collect();
    tape.record_branches(pt.iter().map(|&p| u64::from(p < PROB_CLAMP)));
    let loss = compensated_sum(pt.iter().map(|&p| cross_entropy_term(p))) / n as f64;
    let labels = labels.to_vec();
    tape.push(
        Tensor::scalar(loss),
        &[probs],
        rule("cce_probs", move |ctx| {
            let scale = ctx.grad_output[0] / n as f64;
            let mut dx = vec![0.0; n * k];
            for (b, &l) in labels.iter().enumerate() {
                if pt[b] >= PROB_CLAMP {
                    dx[b * k + l] = -scale / pt[b];
                }
            }
            vec![Some(dx)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_multi, GradCheckConfig};

    fn probs_tensor(p_fg: &[f64], shape: &[usize]) -> Tensor {
        // [N, 2, ...] with channel 1 = p_fg and channel 0 = 1 - p_fg.
        let (n, _, inner) = class_layout(shape).unwrap();
        let mut v = vec![0.0; n * 2 * inner];
        for b in 0..n {
            for i in 0..inner {
                let p = p_fg[b * inner + i];
                v[b * 2 * inner + i] = 1.0 - p;
                v[b * 2 * inner + inner + i] = p;
            }
        }
        Tensor::from_vec(shape, v).unwrap()
    }

    fn binary_target(fg: &[u8], shape: &[usize]) -> Tensor {
        let p: Vec<f64> = fg.iter().map(|&b| f64::from(b)).collect();
        probs_tensor(&p, shape)
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).values()[0]
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal_term(1.0, 2.0), 0.0);
        assert!((focal_term(0.5, 2.0) - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((focal_term(0.5, 2.0) - 0.173287).abs() < 1e-6);
        for p in [1e-9, 0.1, 0.7, 0.99] {
            assert_eq!(focal_term(p, 0.0), cross_entropy_term(p));
        }
    }

    #[test]
    fn focal_rejects_negative_gamma() {
        let mut tape = Tape::new();
        let shape = [1, 2, 2];
        let p = tape.variable(probs_tensor(&[0.3, 0.6], &shape));
        let g = binary_target(&[0, 1], &shape);
        assert!(matches!(focal_loss(&mut tape, p, &g, -1.0), Err(Error::InvalidGamma(_))));
        assert!(matches!(focal_loss(&mut tape, p, &g, f64::NAN), Err(Error::InvalidGamma(_))));
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let shape = [1, 2, 4];
        let fg = [1, 0, 1, 1];
        let mut tape = Tape::new();
        let p = tape.variable(binary_target(&fg, &shape));
        let loss = total_seg_loss(&mut tape, p, &binary_target(&fg, &shape), 2.0, true).unwrap();
        let (t, f, j, d) = loss.values(&tape);
        assert_eq!(f, 0.0);
        assert!(j.abs() <= 2.0 * OVERLAP_EPS && d.unwrap().abs() <= 2.0 * OVERLAP_EPS);
        assert_eq!(t, f + j + d.unwrap());
    }

    #[test]
    fn overlap_pixel_count_example() {
        // Prediction and target of 2 px each sharing 1 px.
        let shape = [1, 2, 16];
        let mut pred = [0u8; 16];
        let mut gt = [0u8; 16];
        pred[0] = 1;
        pred[1] = 1;
        gt[1] = 1;
        gt[2] = 1;
        let mut tape = Tape::new();
        let p = tape.variable(binary_target(&pred, &shape));
        let g = binary_target(&gt, &shape);
        let j = jaccard_loss(&mut tape, p, &g).unwrap();
        let d = dice_loss(&mut tape, p, &g).unwrap();
        assert!((scalar(&tape, j) - 2.0 / 3.0).abs() < 1e-6);
        assert!((scalar(&tape, d) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn disjoint_masks_give_unit_loss() {
        let shape = [1, 2, 4];
        let mut tape = Tape::new();
        let p = tape.variable(binary_target(&[1, 1, 0, 0], &shape));
        let g = binary_target(&[0, 0, 1, 1], &shape);
        let j = jaccard_loss(&mut tape, p, &g).unwrap();
        let d = dice_loss(&mut tape, p, &g).unwrap();
        assert!((scalar(&tape, j) - 1.0).abs() < 1e-6);
        assert!((scalar(&tape, d) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cce_examples() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[1, 3], vec![0.4, 0.4, 0.4]).unwrap());
        let l = cce_from_logits(&mut tape, x, &[2]).unwrap();
        assert!((scalar(&tape, l) - 3f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.1]).unwrap());
        let y = tape.variable(Tensor::from_vec(&[2, 3], vec![101.0, 98.0, 100.5, 103.0, 100.0, 100.1]).unwrap());
        let a = cce_from_logits(&mut tape, x, &[0, 2]).unwrap();
        let b = cce_from_logits(&mut tape, y, &[0, 2]).unwrap();
        assert!((scalar(&tape, a) - scalar(&tape, b)).abs() < 1e-12);

        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[1, 2], vec![800.0, 0.0]).unwrap());
        let l = cce_from_logits(&mut tape, x, &[0]).unwrap();
        assert!(scalar(&tape, l) < 1e-12);
    }

    #[test]
    fn cce_logits_matches_probs() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let mut tape = Tape::new();
        let x = tape.variable(logits);
        let a = cce_from_logits(&mut tape, x, &[1, 0]).unwrap();
        let p = tape.softmax(x, 1).unwrap();
        let b = cce_from_probs(&mut tape, p, &[1, 0]).unwrap();
        assert!((scalar(&tape, a) - scalar(&tape, b)).abs() < 1e-12);
    }

    #[test]
    fn label_errors() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2, 3]));
        assert!(cce_from_logits(&mut tape, x, &[0]).is_err());
        assert!(cce_from_logits(&mut tape, x, &[0, 3]).is_err());
        let p = tape.variable(Tensor::zeros(&[1, 2, 4]));
        assert!(jaccard_loss(&mut tape, p, &Tensor::zeros(&[1, 2, 5])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shape = [2, 2, 3];
        let fg = [0.2, 0.7, 0.9, 0.4, 0.05, 0.6];
        let target = binary_target(&[0, 1, 1, 0, 0, 1], &shape);
        let cfg = GradCheckConfig::default();
        for gamma in [0.0, 0.5, 2.0] {
            let t = target.clone();
            let report = grad_check_multi(
                move |tape, v| {
                    let p = tape.softmax(v[0], 1)?;
                    Ok(total_seg_loss(tape, p, &t, gamma, true)?.total)
                },
                &[probs_tensor(&fg, &shape)],
                &cfg,
            )
            .unwrap();
            assert!(report.passed(), "gamma {gamma}: {report:?}");
        }
        let report = grad_check_multi(
            |tape, v| cce_from_logits(tape, v[0], &[2, 0]),
            &[Tensor::from_vec(&[2, 3], vec![0.1, -0.3, 0.8, 1.5, 0.2, -0.7]).unwrap()],
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let report = grad_check_multi(
            |tape, v| {
                let p = tape.softmax(v[0], 1)?;
                cce_from_probs(tape, p, &[2, 0])
            },
            &[Tensor::from_vec(&[2, 3], vec![0.1, -0.3, 0.8, 1.5, 0.2, -0.7]).unwrap()],
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn one_hot_masks_layout() {
        let m = Mask::new(1, 3, vec![0, 1, 1]).unwrap();
        let t = one_hot_masks(&[&m]).unwrap();
        assert_eq!(t.shape(), &[1, 2, 1, 3]);
        assert_eq!(t.values(), &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(one_hot(&[2, 0], 3).unwrap().values(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
