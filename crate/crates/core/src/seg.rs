//! PMAD-LinkNet: Inception-ResNet style encoder, additive LinkNet skips and
//! attention-gated decoder blocks ending in a per-pixel softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Network, Profile};
use crate::nn::{Conv, ConvUnit, Mode, ParamStore, Path, Pmm, Session, SpatialChannelAttention};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub profile: Profile,
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    /// Widths at H/4 (stem, blocks A), H/8 (blocks B), H/16 (blocks C) and
    /// of the first decoder's inner convolution.
    pub stage_channels: [usize; 4],
    /// Number of A, B and C blocks.
    pub blocks: [usize; 3],
    pub dropout_rate: f64,
}

impl SegNetConfig {
    pub fn tiny() -> Self {
        Self::from_base(Profile::Tiny, 8, [2, 2, 2], (64, 64))
    }

    pub fn paper() -> Self {
        Self::from_base(Profile::Paper, 64, [5, 10, 5], (256, 256))
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Tiny => Self::tiny(),
            Profile::Paper => Self::paper(),
        }
    }

    fn from_base(profile: Profile, b: usize, blocks: [usize; 3], input_size: (usize, usize)) -> Self {
        Self {
            profile,
            input_size,
            in_channels: 1,
            base_channels: b,
            num_classes: 2,
            stage_channels: [3 * b, 6 * b, 8 * b, 8 * b],
            blocks,
            dropout_rate: 0.1,
        }
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return bad(format!("input size {h}x{w} must be positive multiples of 16"));
        }
        if self.stage_channels.windows(2).any(|p| p[1] < p[0]) {
            return bad(format!("stage_channels {:?} must be nondecreasing", self.stage_channels));
        }
        let b = self.base_channels;
        let [s0, s1, s2, _] = self.stage_channels;
        if b < 2 || s0 <= 2 * b {
            return bad(format!("stage_channels[0]={s0} must exceed 2*base_channels={}", 2 * b));
        }
        if s1 < s0 + 2 || s2 < s1 + 3 {
            return bad("reduction blocks need room for their conv branches".into());
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return bad("num_classes must be >= 2 and in_channels >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidRate(self.dropout_rate));
        }
        Ok(())
    }
}

fn unit(name: &str, i: usize, conv: Conv) -> ConvUnit {
    ConvUnit::new(&format!("{name}.{i}"), conv, Some(crate::ops::Activation::Relu))
}

/// Chain of conv-BN-ReLU units; `spec` lists `(out_ch, kernel, stride)`.
fn chain(name: &str, in_ch: usize, spec: &[(usize, usize, usize)]) -> Path {
    let mut c = in_ch;
    let units = spec
        .iter()
        .enumerate()
        .map(|(i, &(out, k, s))| {
            let u = unit(name, i, Conv::new("", c, out, k, s, k / 2));
            c = out;
            u
        })
        .collect();
    Path { units }
}

fn concat_paths(s: &mut Session<'_>, tape: &mut Tape, x: Var, paths: &[Path], pool: bool) -> Result<Var> {
    let mut parts = Vec::with_capacity(paths.len() + 1);
    if pool {
        parts.push(tape.maxpool2d(x, 2, 2)?);
    }
    for p in paths {
        parts.push(p.forward(s, tape, x)?);
    }
    tape.concat_channels(&parts)
}

/// Three full-resolution convolutions followed by three filter-concat mixes
/// that reduce the spatial size 4x.
#[derive(Debug, Clone)]
pub struct Stem {
    pub convs: Path,
    pub mix1: Path,
    pub mix2: [Path; 2],
    pub mix3: Path,
}

impl Stem {
    fn new(cfg: &SegNetConfig) -> Self {
        let b = cfg.base_channels;
        let h = (b / 2).max(1);
        let s0 = cfg.stage_channels[0];
        Self {
            convs: chain("stem.conv", cfg.in_channels, &[(h, 3, 1), (h, 3, 1), (b, 3, 1)]),
            mix1: chain("stem.mix1", b, &[(b, 3, 2)]),
            mix2: [
                chain("stem.mix2.a", 2 * b, &[(h, 1, 1), (b, 3, 1)]),
                chain("stem.mix2.b", 2 * b, &[(h, 1, 1), (h, 3, 1), (h, 3, 1), (b, 3, 1)]),
            ],
            mix3: chain("stem.mix3", 2 * b, &[(s0 - 2 * b, 3, 2)]),
        }
    }

    fn paths(&self) -> Vec<&Path> {
        let mut v = vec![&self.convs, &self.mix1];
        v.extend(self.mix2.iter());
        v.push(&self.mix3);
        v
    }

    /// Returns `(full-resolution map, half-resolution map, output)`.
    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<(Var, Var, Var)> {
        let full = self.convs.forward(s, tape, x)?;
        tape.tag("stem.full", full);
        let m1 = concat_paths(s, tape, full, std::slice::from_ref(&self.mix1), true)?;
        let half = concat_paths(s, tape, m1, &self.mix2, false)?;
        tape.tag("stem.half", half);
        let out = concat_paths(s, tape, half, std::slice::from_ref(&self.mix3), true)?;
        tape.tag("stem", out);
        Ok((full, half, out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    A,
    B,
    C,
}

/// Residual inception block: parallel conv paths, linear 1x1 merge, residual
/// add, ReLU.
#[derive(Debug, Clone)]
pub struct InceptionResNetBlock {
    pub name: String,
    pub kind: BlockKind,
    pub channels: usize,
    pub paths: Vec<Path>,
    pub merge: Conv,
}

impl InceptionResNetBlock {
    pub fn new(name: &str, kind: BlockKind, channels: usize) -> Self {
        let c = channels;
        let w = (c / 4).max(4);
        let p = |i: usize, spec: &[(usize, usize, usize)]| chain(&format!("{name}.path{i}"), c, spec);
        let paths = match kind {
            BlockKind::A => vec![
                p(0, &[(w, 1, 1)]),
                p(1, &[(w, 1, 1), (w, 3, 1), (w, 3, 1)]),
                p(2, &[(w, 1, 1), (w, 3, 1)]),
            ],
            BlockKind::B | BlockKind::C => vec![p(0, &[(w, 1, 1), (w, 3, 1), (w, 3, 1)]), p(1, &[(w, 1, 1)])],
        };
        let merged: usize = paths.iter().map(Path::out_ch).sum();
        Self {
            name: name.to_string(),
            kind,
            channels,
            paths,
            merge: Conv::same(format!("{name}.merge"), merged, c, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.paths.iter().try_for_each(|p| p.init(store, rng))?;
        self.merge.init(store, rng)
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let cat = concat_paths(s, tape, x, &self.paths, false)?;
        let merged = self.merge.forward(s, tape, cat)?;
        let sum = tape.add(x, merged)?;
        let y = tape.relu(sum)?;
        tape.tag(self.name.clone(), y);
        Ok(y)
    }
}

/// Spatial halving by a filter concat of max pooling and strided conv paths.
#[derive(Debug, Clone)]
pub struct ReductionBlock {
    pub name: String,
    pub paths: Vec<Path>,
}

impl ReductionBlock {
    /// Kind A: pool, 3-conv and 1-conv paths. Kind B (`four_way`): pool,
    /// 3-conv and two 2-conv paths.
    pub fn new(name: &str, in_ch: usize, out_ch: usize, four_way: bool) -> Self {
        let extra = out_ch - in_ch;
        let n = if four_way { 3 } else { 2 };
        let widths: Vec<usize> = (0..n).map(|i| extra / n + usize::from(i < extra % n)).collect();
        let p = |i: usize, spec: &[(usize, usize, usize)]| chain(&format!("{name}.path{i}"), in_ch, spec);
        let r = widths[0];
        let mut paths = vec![p(0, &[(r, 1, 1), (r, 3, 1), (r, 3, 2)])];
        if four_way {
            for (i, &w) in widths.iter().enumerate().skip(1) {
                paths.push(p(i, &[(w, 1, 1), (w, 3, 2)]));
            }
        } else {
            paths.push(p(1, &[(widths[1], 3, 2)]));
        }
        Self {
            name: name.to_string(),
            paths,
        }
    }

    /// Parallel branches including the pooling path.
    pub fn branch_count(&self) -> usize {
        self.paths.len() + 1
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.paths.iter().try_for_each(|p| p.init(store, rng))
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = concat_paths(s, tape, x, &self.paths, true)?;
        tape.tag(self.name.clone(), y);
        Ok(y)
    }
}

/// conv-BN-ReLU, 2x transpose conv-BN-ReLU, PMM, spatial-channel attention,
/// then the additive link from a 1x1-projected encoder map.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub name: String,
    pub conv: ConvUnit,
    pub up: ConvUnit,
    pub pmm: Pmm,
    pub attention: SpatialChannelAttention,
    pub skip: Conv,
}

impl DecoderBlock {
    pub fn new(name: &str, in_ch: usize, mid_ch: usize, out_ch: usize, skip_ch: usize, dropout: f64) -> Self {
        let relu = Some(crate::ops::Activation::Relu);
        Self {
            name: name.to_string(),
            conv: ConvUnit::new(&format!("{name}.conv"), Conv::same("", in_ch, mid_ch, 3), relu),
            up: ConvUnit::new(&format!("{name}.up"), Conv::new("", mid_ch, out_ch, 2, 2, 0).transposed(), relu),
            pmm: Pmm::new(&format!("{name}.pmm"), out_ch, dropout),
            attention: SpatialChannelAttention::new(&format!("{name}.attention"), out_ch),
            skip: Conv::same(format!("{name}.skip"), skip_ch, out_ch, 1).without_bias(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv.init(store, rng)?;
        self.up.init(store, rng)?;
        self.pmm.init(store, rng)?;
        self.attention.init(store, rng)?;
        self.skip.init(store, rng)
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var, skip: Var) -> Result<Var> {
        let y = self.conv.forward(s, tape, x)?;
        let y = self.up.forward(s, tape, y)?;
        let (ys, ss) = (tape.shape(y), tape.shape(skip));
        if ys[0] != ss[0] || ys[2..] != ss[2..] {
            return Err(Error::ShapeMismatch(format!(
                "{}: upsampled {:?} does not pair with skip {:?}",
                self.name, ys, ss
            )));
        }
        let y = self.pmm.forward(s, tape, y)?;
        let y = self.attention.forward(s, tape, y)?;
        let link = self.skip.forward(s, tape, skip)?;
        let out = tape.add(y, link)?;
        tape.tag(self.name.clone(), out);
        Ok(out)
    }
}

/// Transpose conv, two convolutions and the class softmax.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub up: ConvUnit,
    pub conv: ConvUnit,
    pub classifier: Conv,
}

impl SegHead {
    fn new(ch: usize, classes: usize) -> Self {
        let relu = Some(crate::ops::Activation::Relu);
        Self {
            up: ConvUnit::new("head.up", Conv::new("", ch, ch, 3, 1, 1).transposed(), relu),
            conv: ConvUnit::new("head.conv", Conv::same("", ch, ch, 3), relu),
            classifier: Conv::same("head.classifier", ch, classes, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.up.init(store, rng)?;
        self.conv.init(store, rng)?;
        self.classifier.init(store, rng)
    }

    pub fn logits(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.up.forward(s, tape, x)?;
        let y = self.conv.forward(s, tape, y)?;
        let logits = self.classifier.forward(s, tape, y)?;
        tape.tag("head.logits", logits);
        Ok(logits)
    }
}

/// Segmentation network plus its parameters.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: SegNetConfig,
    pub stem: Stem,
    pub blocks_a: Vec<InceptionResNetBlock>,
    pub reduction_a: ReductionBlock,
    pub blocks_b: Vec<InceptionResNetBlock>,
    pub reduction_b: ReductionBlock,
    pub blocks_c: Vec<InceptionResNetBlock>,
    pub decoders: [DecoderBlock; 4],
    pub head: SegHead,
    pub params: ParamStore,
}

impl SegModel {
    /// Builds the wiring and draws He-normal weights from `seed`.
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        let mut model = Self::uninit(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        model.init(&mut store, &mut rng)?;
        model.params = store;
        Ok(model)
    }

    /// Wiring only, with an empty parameter store.
    pub fn uninit(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let [s0, s1, s2, s3] = config.stage_channels;
        let [na, nb, nc] = config.blocks;
        let blocks = |kind, prefix: &str, n: usize, c| {
            (0..n)
                .map(|i| InceptionResNetBlock::new(&format!("{prefix}{i}"), kind, c))
                .collect()
        };
        let d = config.dropout_rate;
        Ok(Self {
            stem: Stem::new(&config),
            blocks_a: blocks(BlockKind::A, "block_a", na, s0),
            reduction_a: ReductionBlock::new("reduction_a", s0, s1, false),
            blocks_b: blocks(BlockKind::B, "block_b", nb, s1),
            reduction_b: ReductionBlock::new("reduction_b", s1, s2, true),
            blocks_c: blocks(BlockKind::C, "block_c", nc, s2),
            decoders: [
                DecoderBlock::new("dec1", s2, s3, s1, s1, d),
                DecoderBlock::new("dec2", s1, s1, s0, s0, d),
                DecoderBlock::new("dec3", s0, s0, 2 * b, 2 * b, d),
                DecoderBlock::new("dec4", 2 * b, 2 * b, b, b, d),
            ],
            head: SegHead::new(b, config.num_classes),
            params: ParamStore::new(),
            config,
        })
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for p in self.stem.paths() {
            p.init(store, rng)?;
        }
        for blk in &self.blocks_a {
            blk.init(store, rng)?;
        }
        self.reduction_a.init(store, rng)?;
        for blk in &self.blocks_b {
            blk.init(store, rng)?;
        }
        self.reduction_b.init(store, rng)?;
        for blk in &self.blocks_c {
            blk.init(store, rng)?;
        }
        for dec in &self.decoders {
            dec.init(store, rng)?;
        }
        self.head.init(store, rng)
    }

    /// Unnormalized class scores `[N, K, H, W]`.
    pub fn logits(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (h, w) = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] % 16 != 0 || shape[3] % 16 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "segmentation input {shape:?}, expected [N, {}, {h}, {w}] (sides divisible by 16)",
                self.config.in_channels
            )));
        }
        let (full, half, mut y) = self.stem.forward(s, tape, x)?;
        for blk in &self.blocks_a {
            y = blk.forward(s, tape, y)?;
        }
        let quarter = y;
        y = self.reduction_a.forward(s, tape, y)?;
        for blk in &self.blocks_b {
            y = blk.forward(s, tape, y)?;
        }
        let eighth = y;
        y = self.reduction_b.forward(s, tape, y)?;
        for blk in &self.blocks_c {
            y = blk.forward(s, tape, y)?;
        }
        tape.tag("bottleneck", y);
        for (dec, skip) in self.decoders.iter().zip([eighth, quarter, half, full]) {
            y = dec.forward(s, tape, y, skip)?;
        }
        self.head.logits(s, tape, y)
    }

    /// Convenience eval-mode forward of a preprocessed batch.
    pub fn segment(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut s = Session::new(&self.params, Mode::Eval);
        let x = tape.constant(batch.clone());
        let y = self.forward(&mut s, &mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

fn describe_path(lines: &mut Vec<String>, name: &str, p: &Path) {
    lines.push(format!("    {name}: {}", p.describe()));
}

impl Network for SegModel {
    fn kind(&self) -> &'static str {
        "pmad-linknet"
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
        [self.config.in_channels, h, w]
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
        let [s0, s1, s2, _] = c.stage_channels;
        let mut lines = vec![format!(
            "PMAD-LinkNet ({} profile) input {}x{}x{} -> {} classes, {} trainable parameters",
            c.profile,
            c.in_channels,
            h,
            w,
            c.num_classes,
            self.params.trainable_count()
        )];
        lines.push(format!("  stem -> {s0}x{}x{}", h / 4, w / 4));
        describe_path(&mut lines, "convs", &self.stem.convs);
        lines.push("    mix1: maxpool2 | ".to_string() + &self.stem.mix1.describe());
        for (i, p) in self.stem.mix2.iter().enumerate() {
            describe_path(&mut lines, &format!("mix2 branch {i}"), p);
        }
        lines.push("    mix3: maxpool2 | ".to_string() + &self.stem.mix3.describe());
        let push_blocks = |lines: &mut Vec<String>, blocks: &[InceptionResNetBlock], ch, div| {
            for blk in blocks {
                lines.push(format!(
                    "  {} ({:?}, {} paths + residual) {}x{}x{}",
                    blk.name,
                    blk.kind,
                    blk.paths.len(),
                    ch,
                    h / div,
                    w / div
                ));
                for (i, p) in blk.paths.iter().enumerate() {
                    describe_path(lines, &format!("path{i}"), p);
                }
                lines.push(format!("    merge: {}", blk.merge.describe()));
            }
        };
        push_blocks(&mut lines, &self.blocks_a, s0, 4);
        for (red, blocks, ch, div) in [
            (&self.reduction_a, &self.blocks_b, s1, 8),
            (&self.reduction_b, &self.blocks_c, s2, 16),
        ] {
            lines.push(format!(
                "  {} ({} branches: maxpool2 + {} conv paths) -> {}x{}x{}",
                red.name,
                red.branch_count(),
                red.paths.len(),
                ch,
                h / div,
                w / div
            ));
            for (i, p) in red.paths.iter().enumerate() {
                describe_path(&mut lines, &format!("path{i}"), p);
            }
            push_blocks(&mut lines, blocks, ch, div);
        }
        let skips = ["blocks B out", "blocks A out", "stem.half", "stem.full"];
        for (i, (dec, skip)) in self.decoders.iter().zip(skips).enumerate() {
            let div = 8 >> i;
            lines.push(format!(
                "  {} -> {}x{}x{} (skip: {})",
                dec.name,
                dec.up.out_ch(),
                h / div,
                w / div,
                skip
            ));
            lines.push(format!("    conv: {}", dec.conv.describe()));
            lines.push(format!("    up: {}", dec.up.describe()));
            lines.push("    pmm: 2x double conv -> relu(sum) -> sigmoid map; gap -> gelu mlp -> sigmoid".into());
            lines.push("    attention: spatial sigmoid(1x1 on mean|max) x channel sigmoid(mlp(gap))".into());
            lines.push(format!("    link: + {}", dec.skip.describe()));
        }
        lines.push(format!("  head.up: {}", self.head.up.describe()));
        lines.push(format!("  head.conv: {}", self.head.conv.describe()));
        lines.push(format!("  head.classifier: {} -> softmax(axis 1)", self.head.classifier.describe()));
        lines.join("\n")
    }
}
