//! Hard-mask segmentation metrics, micro-averaged classification metrics and
//! the per-epoch report.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imgproc::Mask;
use crate::tensor::Tensor;

/// Pixel counts of a prediction against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl SegCounts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(shape_err(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let mut c = SegCounts::default();
        for (&p, &g) in pred.values.iter().zip(&gt.values) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, o: SegCounts) -> SegCounts {
        SegCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn pixel_accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total(), 1.0)
    }

    /// IoU as an exact fraction `(numerator, denominator)`; `(1, 1)` when
    /// both masks are empty.
    pub fn iou_fraction(&self) -> (u64, u64) {
        match self.tp + self.fp + self.fn_ {
            0 => (1, 1),
            d => (self.tp, d),
        }
    }

    /// Dice as an exact fraction; `(1, 1)` when both masks are empty.
    pub fn dice_fraction(&self) -> (u64, u64) {
        match 2 * self.tp + self.fp + self.fn_ {
            0 => (1, 1),
            d => (2 * self.tp, d),
        }
    }

    /// `|P ∩ G| / |P ∪ G|`; 1 when both are empty.
    pub fn iou(&self) -> f64 {
        let (n, d) = self.iou_fraction();
        n as f64 / d as f64
    }

    /// `2|P ∩ G| / (|P| + |G|)`; 1 when both are empty.
    pub fn dice(&self) -> f64 {
        let (n, d) = self.dice_fraction();
        n as f64 / d as f64
    }
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub pixel_accuracy: f64,
    pub iou: f64,
    pub dice: f64,
}

impl From<SegCounts> for SegMetrics {
    fn from(c: SegCounts) -> Self {
        Self {
            pixel_accuracy: c.pixel_accuracy(),
            iou: c.iou(),
            dice: c.dice(),
        }
    }
}

pub fn seg_metrics(pred: &Mask, gt: &Mask) -> Result<SegMetrics> {
    Ok(SegCounts::from_masks(pred, gt)?.into())
}

/// Per-pixel argmax of `[N, K, H, W]` probabilities; class 0 is
/// background, anything else is foreground.
pub fn argmax_masks(probs: &Tensor) -> Result<Vec<Mask>> {
    let &[n, k, h, w] = probs.shape() else {
        return Err(shape_err(format!("expected [N, K, H, W], got {:?}", probs.shape())));
    };
    let hw = h * w;
    let v = probs.values();
    Ok((0..n)
        .map(|b| {
            let values = (0..hw)
                .map(|i| {
                    let best = (1..k).fold(0, |best, c| {
                        if v[(b * k + c) * hw + i] > v[(b * k + best) * hw + i] {
                            c
                        } else {
                            best
                        }
                    });
                    u8::from(best != 0)
                })
                .collect();
            Mask {
                height: h,
                width: w,
                values,
            }
        })
        .collect())
}

/// Row-wise argmax of `[N, K]` scores (first maximum wins).
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let &[_, k] = scores.shape() else {
        return Err(shape_err(format!("expected [N, K], got {:?}", scores.shape())));
    };
    Ok(scores
        .values()
        .chunks(k)
        .map(|row| (1..k).fold(0, |best, c| if row[c] > row[best] { c } else { best }))
        .collect())
}

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(class_names: &[&str]) -> Self {
        let k = class_names.len();
        Self {
            counts: vec![vec![0; k]; k],
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>, class_names: &[&str]) -> Result<Self> {
        let k = class_names.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(shape_err(format!("confusion counts are not {k}x{k}")));
        }
        Ok(Self {
            counts,
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, actual: usize, predicted: usize) -> Result<()> {
        let k = self.classes();
        if actual >= k || predicted >= k {
            return Err(shape_err(format!("class pair ({actual}, {predicted}) with {k} classes")));
        }
        self.counts[actual][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Row-normalized rates; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter().map(|&c| ratio(c, n, 0.0)).collect()
            })
            .collect()
    }

    /// One-vs-rest `(tp, fp, fn, tn)` of class `k`.
    pub fn one_vs_rest(&self, k: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[k][k];
        let row: u64 = self.counts[k].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[k]).sum();
        let (fp, fn_) = (col - tp, row - tp);
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged metrics: one-vs-rest counts summed over classes.
pub fn cls_metrics(confusion: &ConfusionMatrix) -> Result<ClsMetrics> {
    if confusion.classes() < 2 {
        return Err(shape_err("classification metrics need at least two classes"));
    }
    if confusion.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for k in 0..confusion.classes() {
        let c = confusion.one_vs_rest(k);
        tp += c.0;
        fp += c.1;
        fn_ += c.2;
        tn += c.3;
    }
    let precision = ratio(tp, tp + fp, 0.0);
    let recall = ratio(tp, tp + fn_, 0.0);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClsMetrics {
        accuracy: ratio(tp + tn, tp + tn + fp + fn_, 0.0),
        precision,
        recall,
        f1,
    })
}

/// Scores of one evaluation pass, serialized as a flat JSON object. Fields
/// that do not apply to the evaluated network are `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epoch: Option<usize>,
    pub learning_rate: Option<f64>,
    pub train_loss: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub loss_focal: Option<f64>,
    pub loss_jaccard: Option<f64>,
    pub loss_dice: Option<f64>,
    pub loss_total: Option<f64>,
    pub cls_accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub confusion: Option<Vec<Vec<u64>>>,
    pub class_names: Option<Vec<String>>,
}

impl MetricsReport {
    pub fn with_seg(mut self, m: SegMetrics) -> Self {
        self.dice = Some(m.dice);
        self.iou = Some(m.iou);
        self.pixel_accuracy = Some(m.pixel_accuracy);
        self
    }

    pub fn with_cls(mut self, m: ClsMetrics, confusion: &ConfusionMatrix) -> Self {
        self.cls_accuracy = Some(m.accuracy);
        self.precision = Some(m.precision);
        self.recall = Some(m.recall);
        self.f1 = Some(m.f1);
        self.confusion = Some(confusion.counts.clone());
        self.class_names = Some(confusion.class_names.clone());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
