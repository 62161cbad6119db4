//! Gating blocks: spatial-channel attention, the precision mapping
//! mechanism (PMM) and the component-specific feature enhancement module.

use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, ConvUnit, Dense, Path};
use super::params::ParamStore;
use super::session::Session;
use crate::error::Result;
use crate::ops::Activation;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Initial bias of every gate logit: gates start mostly open
/// (`sigmoid(2) ≈ 0.88`), so a stack of gated decoders does not shrink the
/// signal by half at every gate before training has shaped them.
pub const GATE_BIAS_INIT: f64 = 2.0;

fn open_gate(store: &mut ParamStore, bias: &str) -> Result<()> {
    let t = store.get_mut(bias)?;
    let n = t.len();
    *t = Tensor::full(&[n], GATE_BIAS_INIT);
    Ok(())
}

/// Bottleneck width of the gate MLPs.
pub fn gate_hidden(channels: usize) -> usize {
    (channels / 2).max(4)
}

/// Spatial gate from channel-pooled maps: `sigmoid(conv([mean | max]))`.
#[derive(Debug, Clone)]
pub struct SpatialGate {
    pub name: String,
    pub conv: Conv,
}

impl SpatialGate {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            conv: Conv::same(format!("{name}.conv"), 2, 1, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv.init(store, rng)?;
        open_gate(store, &format!("{}.bias", self.conv.name))
    }

    /// `[N, C, H, W] -> [N, 1, H, W]` gate in (0, 1).
    pub fn gate(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let pooled = tape.channel_mean_max(x)?;
        let logits = self.conv.forward(s, tape, pooled)?;
        let g = tape.sigmoid(logits)?;
        tape.tag(format!("{}.gate", self.name), g);
        Ok(g)
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = self.gate(s, tape, x)?;
        let y = tape.mul_gate(x, g)?;
        tape.tag(self.name.clone(), y);
        Ok(y)
    }
}

/// Channel gate from a global-average-pooled MLP: `[N, C, H, W] -> [N, C, 1, 1]`.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    pub name: String,
    pub channels: usize,
    pub fc1: Dense,
    pub fc2: Dense,
    pub dropout: f64,
}

impl ChannelGate {
    pub fn new(name: &str, channels: usize, hidden_act: Activation, dropout: f64) -> Self {
        let h = gate_hidden(channels);
        Self {
            name: name.to_string(),
            channels,
            fc1: Dense::new(format!("{name}.fc1"), channels, h, Some(hidden_act)),
            fc2: Dense::new(format!("{name}.fc2"), h, channels, None),
            dropout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)?;
        open_gate(store, &format!("{}.bias", self.fc2.name))
    }

    pub fn gate(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let pooled = tape.global_avgpool(x)?;
        let flat = tape.flatten(pooled)?;
        let mut h = self.fc1.forward(s, tape, flat)?;
        if self.dropout > 0.0 {
            let train = s.train();
            h = tape.dropout(h, self.dropout, train, &mut s.rng)?;
        }
        let logits = self.fc2.forward(s, tape, h)?;
        let g = tape.sigmoid(logits)?;
        let g = tape.reshape(g, &[n, self.channels, 1, 1])?;
        tape.tag(format!("{}.gate", self.name), g);
        Ok(g)
    }
}

/// `x ⊗ S(x) ⊗ G(x)` with a spatial gate S and a channel gate G.
#[derive(Debug, Clone)]
pub struct SpatialChannelAttention {
    pub name: String,
    pub spatial: SpatialGate,
    pub channel: ChannelGate,
}

impl SpatialChannelAttention {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            spatial: SpatialGate::new(&format!("{name}.spatial")),
            channel: ChannelGate::new(&format!("{name}.channel"), channels, Activation::Relu, 0.0),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.spatial.init(store, rng)?;
        self.channel.init(store, rng)
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let sg = self.spatial.gate(s, tape, x)?;
        let cg = self.channel.gate(s, tape, x)?;
        let y = tape.mul_gate(x, sg)?;
        let y = tape.mul_gate(y, cg)?;
        tape.tag(self.name.clone(), y);
        Ok(y)
    }
}

/// Precision mapping mechanism.
///
/// Two parallel double convolutions are summed and rectified, a convolution
/// maps the result to a one-channel sigmoid spatial map, and a pooled
/// GELU/dropout MLP produces per-channel weights; the input is reweighted by
/// both.
#[derive(Debug, Clone)]
pub struct Pmm {
    pub name: String,
    pub branch_a: Path,
    pub branch_b: Path,
    pub map: Conv,
    pub channel: ChannelGate,
}

impl Pmm {
    pub fn new(name: &str, channels: usize, dropout: f64) -> Self {
        let double = |tag: &str| Path {
            units: vec![
                ConvUnit::relu(&format!("{name}.{tag}.0"), channels, channels, 3),
                ConvUnit::new(&format!("{name}.{tag}.1"), Conv::same("", channels, channels, 3), None),
            ],
        };
        Self {
            name: name.to_string(),
            branch_a: double("double_a"),
            branch_b: double("double_b"),
            map: Conv::same(format!("{name}.map"), channels, 1, 3),
            channel: ChannelGate::new(&format!("{name}.channel"), channels, Activation::Gelu, dropout),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.branch_a.init(store, rng)?;
        self.branch_b.init(store, rng)?;
        self.map.init(store, rng)?;
        open_gate(store, &format!("{}.bias", self.map.name))?;
        self.channel.init(store, rng)
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = self.branch_a.forward(s, tape, x)?;
        let b = self.branch_b.forward(s, tape, x)?;
        let sum = tape.add(a, b)?;
        let r = tape.relu(sum)?;
        let logits = self.map.forward(s, tape, r)?;
        let spatial = tape.sigmoid(logits)?;
        tape.tag(format!("{}.spatial_gate", self.name), spatial);
        let channel = self.channel.gate(s, tape, x)?;
        let y = tape.mul_gate(x, spatial)?;
        let y = tape.mul_gate(y, channel)?;
        tape.tag(self.name.clone(), y);
        Ok(y)
    }
}

/// Component-specific feature enhancement:
/// `F' = F ⊗ SA(F) ⊗ CA(F)`, then `F' + MSA(F') ⊗ F'` where MSA is a sigmoid
/// gate aggregating 1x1, 3x3 and 5x5 convolutions with a learned 1x1 mix.
#[derive(Debug, Clone)]
pub struct Csfem {
    pub name: String,
    pub attention: SpatialChannelAttention,
    pub scales: [Conv; 3],
    pub aggregate: Conv,
}

impl Csfem {
    pub fn new(name: &str, channels: usize) -> Self {
        let m = (channels / 2).max(2);
        Self {
            name: name.to_string(),
            attention: SpatialChannelAttention::new(&format!("{name}.attention"), channels),
            scales: [1, 3, 5].map(|k| Conv::same(format!("{name}.msa_k{k}"), channels, m, k)),
            aggregate: Conv::same(format!("{name}.msa_aggregate"), 3 * m, channels, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.attention.init(store, rng)?;
        for c in &self.scales {
            c.init(store, rng)?;
        }
        self.aggregate.init(store, rng)
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let attended = self.attention.forward(s, tape, x)?;
        let branches = self
            .scales
            .iter()
            .map(|c| c.forward(s, tape, attended))
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat_channels(&branches)?;
        let logits = self.aggregate.forward(s, tape, cat)?;
        let mut gate = tape.sigmoid(logits)?;
        if s.msa_gain != 1.0 {
            gate = tape.scale(gate, s.msa_gain)?;
        }
        tape.tag(format!("{}.msa_gate", self.name), gate);
        let enhanced = tape.mul(gate, attended)?;
        let y = tape.add(attended, enhanced)?;
        tape.tag(self.name.clone(), y);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store_for(init: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<()>, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // Nonzero biases so the oracle exercises them.
        for i in 0..store.len() {
            if store.name(i).ends_with(".bias") {
                let n = store.tensor(i).len();
                store.set_values(i, (0..n).map(|k| 0.1 * k as f64 - 0.05).collect()).unwrap();
            }
        }
        store
    }

    /// Loop oracle for a same-padded correlation with bias.
    fn conv_oracle(x: &[f64], c: usize, h: usize, w: usize, k: &[f64], b: &[f64], oc: usize, ks: usize) -> Vec<f64> {
        let p = (ks / 2) as isize;
        let mut out = vec![0.0; oc * h * w];
        for o in 0..oc {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for m in 0..ks {
                            for n in 0..ks {
                                let (y, xx) = (i as isize + m as isize - p, j as isize + n as isize - p);
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    acc += x[(ci * h + y as usize) * w + xx as usize] * k[((o * c + ci) * ks + m) * ks + n];
                                }
                            }
                        }
                    }
                    out[(o * h + i) * w + j] = acc;
                }
            }
        }
        out
    }

    /// Loop oracle for `x * S(x) * G(x)` on one image.
    fn sca_oracle(store: &ParamStore, name: &str, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let p = |n: &str| store.get(&format!("{name}.{n}")).unwrap().values().to_vec();
        let (sk, sb) = (p("spatial.conv.weight"), p("spatial.conv.bias"));
        let hw = h * w;
        let spatial: Vec<f64> = (0..hw)
            .map(|i| {
                let vals: Vec<f64> = (0..c).map(|ch| x[ch * hw + i]).collect();
                let mean = vals.iter().sum::<f64>() / c as f64;
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                sigmoid(sk[0] * mean + sk[1] * max + sb[0])
            })
            .collect();
        let gap: Vec<f64> = (0..c).map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let (w1, b1, w2, b2) = (p("channel.fc1.weight"), p("channel.fc1.bias"), p("channel.fc2.weight"), p("channel.fc2.bias"));
        let hid = b1.len();
        let hidden: Vec<f64> = (0..hid)
            .map(|j| (b1[j] + (0..c).map(|i| gap[i] * w1[i * hid + j]).sum::<f64>()).max(0.0))
            .collect();
        let gate: Vec<f64> = (0..c)
            .map(|j| sigmoid(b2[j] + (0..hid).map(|i| hidden[i] * w2[i * c + j]).sum::<f64>()))
            .collect();
        (0..c * hw).map(|i| x[i] * spatial[i % hw] * gate[i / hw]).collect()
    }

    #[test]
    fn spatial_channel_attention_matches_oracle() {
        let sca = SpatialChannelAttention::new("att", 5);
        let store = store_for(|s, r| sca.init(s, r), 3);
        let x = random(&[2, 5, 4, 6], 1);
        let mut tape = Tape::new();
        let mut s = Session::new(&store, Mode::Eval);
        let xv = tape.constant(x.clone());
        let y = sca.forward(&mut s, &mut tape, xv).unwrap();
        let got = tape.value(y).values();
        for b in 0..2 {
            let img = &x.values()[b * 120..(b + 1) * 120];
            let want = sca_oracle(&store, "att", img, 5, 4, 6);
            for (g, w) in got[b * 120..(b + 1) * 120].iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
                assert!(g.abs() <= img.iter().map(|v| v.abs()).fold(0.0, f64::max));
            }
        }
    }

    #[test]
    fn attention_gate_extremes() {
        let sca = SpatialChannelAttention::new("att", 3);
        let mut store = store_for(|s, r| sca.init(s, r), 1);
        let x = random(&[1, 3, 4, 4], 2);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let mut s = Session::new(store, Mode::Eval);
            let xv = tape.constant(x.clone());
            let y = sca.forward(&mut s, &mut tape, xv).unwrap();
            tape.value(y).clone()
        };
        for name in ["att.spatial.conv.bias", "att.channel.fc2.bias"] {
            let n = store.get(name).unwrap().len();
            let i = store.position(name).unwrap();
            store.set_values(i, vec![60.0; n]).unwrap();
        }
        assert!(run(&store).max_abs_diff(&x) < 1e-12);
        let i = store.position("att.channel.fc2.bias").unwrap();
        store.set_values(i, vec![-800.0; 3]).unwrap();
        assert!(run(&store).values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn csfem_matches_oracle_and_residual_hook() {
        let m = Csfem::new("cs", 4);
        let store = store_for(|s, r| m.init(s, r), 7);
        let x = random(&[1, 4, 6, 6], 8);
        let (c, h, w) = (4, 6, 6);
        let attended = sca_oracle(&store, "cs.attention", x.values(), c, h, w);
        let p = |n: &str| store.get(n).unwrap().values().to_vec();
        let mut cat = Vec::new();
        for k in [1, 3, 5] {
            let kw = p(&format!("cs.msa_k{k}.weight"));
            let kb = p(&format!("cs.msa_k{k}.bias"));
            cat.extend(conv_oracle(&attended, c, h, w, &kw, &kb, 2, k));
        }
        let mix = conv_oracle(&cat, 6, h, w, &p("cs.msa_aggregate.weight"), &p("cs.msa_aggregate.bias"), c, 1);
        let want: Vec<f64> = attended.iter().zip(&mix).map(|(f, m)| f + sigmoid(*m) * f).collect();

        let run = |gain: f64| {
            let mut tape = Tape::new();
            let mut s = Session::new(&store, Mode::Eval);
            s.msa_gain = gain;
            let xv = tape.constant(x.clone());
            let y = m.forward(&mut s, &mut tape, xv).unwrap();
            let gate = tape.value(tape.tagged("cs.msa_gate").unwrap()).clone();
            let attended = tape.value(tape.tagged("cs.attention").unwrap()).clone();
            (tape.value(y).clone(), gate, attended)
        };
        let (y, gate, _) = run(1.0);
        assert_eq!(y.shape(), x.shape());
        for (g, w) in y.values().iter().zip(&want) {
            assert!((g - w).abs() < 1e-10);
        }
        assert!(gate.values().iter().all(|g| *g > 0.0 && *g < 1.0));
        let (y0, _, gated) = run(0.0);
        assert_eq!(y0.values(), gated.values());
        for (g, w) in gated.values().iter().zip(&attended) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn pmm_preserves_shape_and_bounds_gates() {
        let m = Pmm::new("pmm", 6, 0.2);
        let store = store_for(|s, r| m.init(s, r), 2);
        for shape in [[1, 6, 4, 4], [3, 6, 5, 7]] {
            let mut tape = Tape::new();
            let mut s = Session::new(&store, Mode::Train);
            let xv = tape.constant(random(&shape, 4));
            let y = m.forward(&mut s, &mut tape, xv).unwrap();
            assert_eq!(tape.shape(y), &shape);
            for gate in ["pmm.spatial_gate", "pmm.channel.gate"] {
                let g = tape.value(tape.tagged(gate).unwrap());
                assert!(g.values().iter().all(|v| *v > 0.0 && *v < 1.0));
            }
        }
    }
}
