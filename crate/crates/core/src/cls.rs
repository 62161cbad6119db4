//! CSFEC-Net: convolutional trunk around the component-specific feature
//! enhancement module, ending in a three-way softmax classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{Network, Profile};
use crate::nn::{BatchNorm, Conv, ConvUnit, Csfem, Dense, Mode, ParamStore, Path, Session, SpatialGate};
use crate::ops::Activation;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["benign", "malignant", "normal"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsNetConfig {
    pub profile: Profile,
    pub input_size: (usize, usize),
    pub num_classes: usize,
    /// Filters of the eight trunk convolutions, in order.
    pub widths: [usize; 8],
    pub dense_width: usize,
    pub dropout_rate: f64,
}

const PAPER_WIDTHS: [usize; 8] = [512, 256, 256, 128, 128, 128, 64, 64];

impl ClsNetConfig {
    pub fn tiny() -> Self {
        Self {
            profile: Profile::Tiny,
            input_size: (64, 64),
            num_classes: 3,
            widths: PAPER_WIDTHS.map(|w| w / 8),
            dense_width: 16,
            dropout_rate: 0.3,
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            input_size: (256, 256),
            num_classes: 3,
            widths: PAPER_WIDTHS,
            dense_width: 128,
            dropout_rate: 0.3,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Tiny => Self::tiny(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "classifier input {h}x{w} must be multiples of 4, at least 8"
            )));
        }
        if self.num_classes != 3 {
            return Err(Error::InvalidConfig(format!("num_classes must be 3, got {}", self.num_classes)));
        }
        if self.widths.iter().any(|&c| c == 0) || self.dense_width == 0 {
            return Err(Error::InvalidConfig("widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidRate(self.dropout_rate));
        }
        Ok(())
    }

    /// Side length of the map entering the flatten layer.
    pub fn final_size(&self) -> (usize, usize) {
        let f = |s: usize| (s + 4) / 2;
        (f(self.input_size.0), f(self.input_size.1))
    }
}

fn tagged(tape: &mut Tape, name: &str, v: Var) -> Var {
    tape.tag(name, v);
    v
}

fn block(name: &str, in_ch: usize, out: usize, k: usize, stride: usize, pad: usize, act: Activation) -> ConvUnit {
    ConvUnit::new(name, Conv::new("", in_ch, out, k, stride, pad), Some(act))
}

/// Classification network plus its parameters.
#[derive(Debug, Clone)]
pub struct ClsModel {
    pub config: ClsNetConfig,
    pub cb1: ConvUnit,
    pub cb2: ConvUnit,
    pub double: Path,
    pub csfem: Csfem,
    pub cb3: ConvUnit,
    pub cb4: ConvUnit,
    pub cb5: ConvUnit,
    pub cb6: ConvUnit,
    pub spatial: SpatialGate,
    pub branch: Conv,
    pub branch_bn: BatchNorm,
    pub fuse: ConvUnit,
    pub merge: ConvUnit,
    pub fc: Dense,
    pub out: Dense,
    pub params: ParamStore,
}

impl ClsModel {
    pub fn new(config: ClsNetConfig, seed: u64) -> Result<Self> {
        let mut model = Self::uninit(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for u in [&model.cb1, &model.cb2] {
            u.init(&mut store, &mut rng)?;
        }
        model.double.init(&mut store, &mut rng)?;
        model.csfem.init(&mut store, &mut rng)?;
        for u in [&model.cb3, &model.cb4, &model.cb5, &model.cb6] {
            u.init(&mut store, &mut rng)?;
        }
        model.spatial.init(&mut store, &mut rng)?;
        model.branch.init(&mut store, &mut rng)?;
        model.branch_bn.init(&mut store)?;
        model.fuse.init(&mut store, &mut rng)?;
        model.merge.init(&mut store, &mut rng)?;
        model.fc.init(&mut store, &mut rng)?;
        model.out.init(&mut store, &mut rng)?;
        model.params = store;
        Ok(model)
    }

    pub fn uninit(config: ClsNetConfig) -> Result<Self> {
        config.validate()?;
        let [w0, w1, w2, w3, w4, w5, w6, w7] = config.widths;
        let (fh, fw) = config.final_size();
        use Activation::*;
        Ok(Self {
            cb1: block("cb1", 3, w0, 3, 1, 2, Relu),
            cb2: block("cb2", w0, w1, 3, 1, 2, Silu),
            double: Path {
                units: vec![
                    block("double.0", w1, w2, 3, 1, 1, Relu),
                    block("double.1", w2, w2, 3, 1, 1, Relu),
                ],
            },
            csfem: Csfem::new("csfem", w2),
            cb3: block("cb3", w2, w3, 4, 2, 2, LeakyRelu(0.01)),
            cb4: block("cb4", w3, w4, 3, 1, 1, Silu),
            cb5: block("cb5", w4, w5, 4, 2, 1, Relu),
            cb6: block("cb6", w5, w6, 3, 1, 1, Relu),
            spatial: SpatialGate::new("spatial_attention"),
            branch: Conv::same("branch.conv", w6, w7, 3).without_bias(),
            branch_bn: BatchNorm::new("branch.bn", w7),
            fuse: block("fuse", w6 + w7, w7, 3, 1, 1, Relu),
            merge: block("merge", w7 + w2, w7, 3, 1, 1, Relu),
            fc: Dense::new("fc", w7 * fh * fw, config.dense_width, Some(Relu)),
            out: Dense::new("out", config.dense_width, config.num_classes, None),
            params: ParamStore::new(),
            config,
        })
    }

    /// Unnormalized class scores `[N, 3]`.
    pub fn logits(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (h, w) = self.config.input_size;
        if shape.len() != 4 || shape[1..] != [3, h, w] {
            return Err(Error::ShapeMismatch(format!("classifier input {shape:?}, expected [N, 3, {h}, {w}]")));
        }
        let y = self.cb1.forward(s, tape, x)?;
        let y = tagged(tape, "cb1", y);
        let y = self.cb2.forward(s, tape, y)?;
        let y = tagged(tape, "cb2", y);
        let y = self.double.forward(s, tape, y)?;
        let y = tagged(tape, "double", y);
        let enhanced = self.csfem.forward(s, tape, y)?;
        let mut y = enhanced;
        for (name, u) in [("cb3", &self.cb3), ("cb4", &self.cb4), ("cb5", &self.cb5), ("cb6", &self.cb6)] {
            y = u.forward(s, tape, y)?;
            y = tagged(tape, name, y);
        }
        let attended = self.spatial.forward(s, tape, y)?;
        let attended = tagged(tape, "spatial_attention", attended);
        let b = self.branch.forward(s, tape, attended)?;
        let b = self.branch_bn.forward(s, tape, b)?;
        let cat = tape.concat_channels(&[attended, b])?;
        let fused = self.fuse.forward(s, tape, cat)?;
        let fused = tagged(tape, "fuse", fused);
        let fs = tape.shape(fused).to_vec();
        let up = tape.upsample_bilinear(fused, 2 * fs[2], 2 * fs[3])?;
        let pooled = tape.avgpool2d(enhanced, 2, 2)?;
        if tape.shape(pooled)[2..] != tape.shape(up)[2..] {
            return Err(shape_err(format!(
                "upsampled {:?} does not pair with pooled enhancement {:?}",
                tape.shape(up),
                tape.shape(pooled)
            )));
        }
        let cat = tape.concat_channels(&[up, pooled])?;
        let merged = self.merge.forward(s, tape, cat)?;
        let merged = tagged(tape, "merge", merged);
        let flat = tape.flatten(merged)?;
        let train = s.train();
        let dropped = tape.dropout(flat, self.config.dropout_rate, train, &mut s.rng)?;
        let hidden = self.fc.forward(s, tape, dropped)?;
        let logits = self.out.forward(s, tape, hidden)?;
        Ok(tagged(tape, "logits", logits))
    }

    /// Convenience eval-mode forward.
    pub fn classify(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut s = Session::new(&self.params, Mode::Eval);
        let x = tape.constant(batch.clone());
        let y = self.forward(&mut s, &mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

impl Network for ClsModel {
    fn kind(&self) -> &'static str {
        "csfec-net"
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    fn input_shape(&self) -> [usize; 3] {
        let (h, w) = self.config.input_size;
        [3, h, w]
    }

    fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let logits = self.logits(s, tape, x)?;
        let probs = tape.softmax(logits, 1)?;
        tape.tag("probs", probs);
        Ok(probs)
    }

    fn describe(&self) -> String {
        let c = &self.config;
        let (h, w) = c.input_size;
        let (fh, fw) = c.final_size();
        let mut lines = vec![format!(
            "CSFEC-Net ({} profile) input 3x{h}x{w} -> {} classes, {} trainable parameters",
            c.profile,
            c.num_classes,
            self.params.trainable_count()
        )];
        let mut side = (h, w);
        let mut unit = |lines: &mut Vec<String>, name: &str, u: &ConvUnit| {
            side = (u.conv.out_size(side.0), u.conv.out_size(side.1));
            lines.push(format!("  {name}: {} -> {}x{}x{}", u.describe(), u.out_ch(), side.0, side.1));
        };
        unit(&mut lines, "cb1", &self.cb1);
        unit(&mut lines, "cb2", &self.cb2);
        unit(&mut lines, "double.0", &self.double.units[0]);
        unit(&mut lines, "double.1", &self.double.units[1]);
        lines.push(format!(
            "  csfem: F' = F*SA(F)*CA(F); out = F' + sigmoid(mix(conv1|conv3|conv5))*F' ({} ch)",
            self.csfem.aggregate.out_ch
        ));
        unit(&mut lines, "cb3", &self.cb3);
        unit(&mut lines, "cb4", &self.cb4);
        unit(&mut lines, "cb5", &self.cb5);
        unit(&mut lines, "cb6", &self.cb6);
        lines.push("  spatial_attention: x * sigmoid(1x1 on mean|max)".into());
        lines.push(format!("  branch: {} +bn, concat with attention", self.branch.describe()));
        unit(&mut lines, "fuse", &self.fuse);
        lines.push("  upsample x2 (bilinear) | avgpool2(csfem)".into());
        lines.push(format!("  merge: {} -> {}x{fh}x{fw}", self.merge.describe(), self.merge.out_ch()));
        lines.push(format!("  flatten -> dropout({}) -> dense {} relu -> dense {} -> softmax",
            c.dropout_rate, c.dense_width, c.num_classes));
        lines.join("\n")
    }
}

/// Masked classifier input: the grayscale image times the binary mask,
/// replicated to three channels. Accepts `[H, W]` or `[1, H, W]` tensors.
pub fn make_classifier_input(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let plane = |t: &Tensor| -> Result<(usize, usize)> {
        match t.shape() {
            [h, w] | [1, h, w] => Ok((*h, *w)),
            other => Err(shape_err(format!("expected a single-channel plane, got {other:?}"))),
        }
    };
    let (h, w) = plane(image)?;
    if plane(mask)? != (h, w) {
        return Err(shape_err(format!("image {:?} and mask {:?} differ", image.shape(), mask.shape())));
    }
    let masked: Vec<f64> = image.values().iter().zip(mask.values().iter()).map(|(a, m)| a * m).collect();
    let mut out = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        out.extend_from_slice(&masked);
    }
    Tensor::from_vec(&[3, h, w], out)
}
