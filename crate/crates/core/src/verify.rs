//! Finite-difference verification suites shared by the CLI and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cls::{ClsModel, ClsNetConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check_multi, GradCheckConfig, GradCheckReport};
use crate::model::Network;
use crate::nn::{apply_bn_updates, Csfem, Mode, ParamKind, ParamStore, Pmm, Session, SpatialChannelAttention};
use crate::ops::{Activation, BatchNormMode, ConvParams};
use crate::seg::{SegModel, SegNetConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One line of a verification table: the worst case over all seeds.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub checked: usize,
    pub excluded: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol && self.checked > 0
    }

    fn new(name: &str, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: 0.0,
            tol,
            checked: 0,
            excluded: 0,
        }
    }

    fn absorb(&mut self, r: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(r.max_rel_error);
        self.checked += r.checked;
        self.excluded += r.excluded.len();
    }
}

/// Renders rows as a fixed-width pass/fail table.
pub fn render_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<28} {:>12} {:>8} {:>8} {:>8}  result\n", "check", "max_rel_err", "tol", "coords", "kinks");
    for r in rows {
        out.push_str(&format!(
            "{:<28} {:>12.3e} {:>8.0e} {:>8} {:>8}  {}\n",
            r.name,
            r.max_rel_error,
            r.tol,
            r.checked,
            r.excluded,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Random `[N, C, H, W]` with N in {1,2}, C in {1,3}, H, W in 4..=8.
fn random_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.random_range(1..=2),
        if rng.random_bool(0.5) { 1 } else { 3 },
        rng.random_range(4..=8),
        rng.random_range(4..=8),
    ]
}

fn random_input(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let s = random_shape(rng);
    uniform(rng, &s, lo, hi)
}

/// Scalarizes `y` with fixed random weights so every output element matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, tape.shape(y), -1.0, 1.0);
    tape.weighted_sum(y, &w)
}

type Case = Box<dyn Fn(&mut ChaCha8Rng, u64, &GradCheckConfig) -> Result<GradCheckReport>>;

fn check<F>(inputs: Vec<Tensor>, seed: u64, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_multi(
        |tape, v| {
            let y = f(tape, v)?;
            project(tape, y, seed)
        },
        &inputs,
        cfg,
    )
}

fn activation_case(kind: Activation) -> Case {
    Box::new(move |rng, seed, cfg| {
        let x = random_input(rng, -3.0, 3.0);
        check(vec![x], seed, cfg, |t, v| t.activation(kind, v[0]))
    })
}

fn primitive_cases() -> Vec<(&'static str, Case)> {
    let mut cases: Vec<(&'static str, Case)> = vec![
        (
            "conv2d",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                let oc = rng.random_range(1..=3);
                let k = rng.random_range(1..=3);
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=k / 2 + 1);
                let x = uniform(rng, &s, -1.0, 1.0);
                let w = uniform(rng, &[oc, s[1], k, k], -1.0, 1.0);
                let b = uniform(rng, &[oc], -1.0, 1.0);
                check(vec![x, w, b], seed, cfg, |t, v| {
                    t.conv2d(v[0], &ConvParams::new(v[1], Some(v[2]), stride, pad))
                })
            }),
        ),
        (
            "transpose_conv2d",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                let oc = rng.random_range(1..=3);
                let k = rng.random_range(2..=3);
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=1);
                let x = uniform(rng, &s, -1.0, 1.0);
                let w = uniform(rng, &[s[1], oc, k, k], -1.0, 1.0);
                let b = uniform(rng, &[oc], -1.0, 1.0);
                check(vec![x, w, b], seed, cfg, |t, v| {
                    t.transpose_conv2d(v[0], &ConvParams::new(v[1], Some(v[2]), stride, pad))
                })
            }),
        ),
        (
            "maxpool2d",
            Box::new(|rng, seed, cfg| {
                let x = random_input(rng, -1.0, 1.0);
                let (k, s) = [(2, 2), (3, 1), (2, 1)][rng.random_range(0..3)];
                check(vec![x], seed, cfg, |t, v| t.maxpool2d(v[0], k, s))
            }),
        ),
        (
            "avgpool2d",
            Box::new(|rng, seed, cfg| {
                let x = random_input(rng, -1.0, 1.0);
                let (k, s) = [(2, 2), (3, 1), (2, 1)][rng.random_range(0..3)];
                check(vec![x], seed, cfg, |t, v| t.avgpool2d(v[0], k, s))
            }),
        ),
        (
            "global_avgpool",
            Box::new(|rng, seed, cfg| {
                let x = random_input(rng, -1.0, 1.0);
                check(vec![x], seed, cfg, |t, v| t.global_avgpool(v[0]))
            }),
        ),
        (
            "batch_norm (train)",
            Box::new(|rng, seed, cfg| {
                let mut s = random_shape(rng);
                s[0] = 2;
                let x = uniform(rng, &s, -1.0, 1.0);
                let g = uniform(rng, &[s[1]], 0.5, 1.5);
                let b = uniform(rng, &[s[1]], -0.5, 0.5);
                check(vec![x, g, b], seed, cfg, |t, v| {
                    Ok(t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?.0)
                })
            }),
        ),
        (
            "batch_norm (eval)",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                let x = uniform(rng, &s, -1.0, 1.0);
                let g = uniform(rng, &[s[1]], 0.5, 1.5);
                let b = uniform(rng, &[s[1]], -0.5, 0.5);
                let mean = uniform(rng, &[s[1]], -0.2, 0.2).into_values();
                let var = uniform(rng, &[s[1]], 0.5, 2.0).into_values();
                check(vec![x, g, b], seed, cfg, move |t, v| {
                    let mode = BatchNormMode::Eval { mean: &mean, var: &var, eps: 1e-5 };
                    Ok(t.batch_norm(v[0], v[1], v[2], mode)?.0)
                })
            }),
        ),
        ("relu", activation_case(Activation::Relu)),
        ("sigmoid", activation_case(Activation::Sigmoid)),
        ("silu", activation_case(Activation::Silu)),
        ("gelu", activation_case(Activation::Gelu)),
        ("leaky_relu", activation_case(Activation::LeakyRelu(0.01))),
        (
            "softmax",
            Box::new(|rng, seed, cfg| {
                let x = random_input(rng, -3.0, 3.0);
                let axis = rng.random_range(0..4);
                check(vec![x], seed, cfg, move |t, v| t.softmax(v[0], axis))
            }),
        ),
        (
            "dropout",
            Box::new(|rng, seed, cfg| {
                let x = random_input(rng, -1.0, 1.0);
                check(vec![x], seed, cfg, move |t, v| {
                    t.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(seed))
                })
            }),
        ),
        (
            "concat_channels",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                let a = uniform(rng, &s, -1.0, 1.0);
                let b = uniform(rng, &[s[0], 2, s[2], s[3]], -1.0, 1.0);
                check(vec![a, b], seed, cfg, |t, v| t.concat_channels(v))
            }),
        ),
        (
            "add",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                let a = uniform(rng, &s, -1.0, 1.0);
                let b = uniform(rng, &s, -1.0, 1.0);
                let g = uniform(rng, &[s[0], s[1], 1, 1], -1.0, 1.0);
                check(vec![a, b, g], seed, cfg, |t, v| {
                    let y = t.add(v[0], v[1])?;
                    t.add(y, v[2])
                })
            }),
        ),
        (
            "filter_concat",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                let x = uniform(rng, &s, -1.0, 1.0);
                let w1 = uniform(rng, &[2, s[1], 1, 1], -1.0, 1.0);
                let w3 = uniform(rng, &[2, s[1], 3, 3], -1.0, 1.0);
                check(vec![x, w1, w3], seed, cfg, |t, v| {
                    t.filter_concat(v[0], &[ConvParams::new(v[1], None, 1, 0), ConvParams::new(v[2], None, 1, 1)])
                })
            }),
        ),
        (
            "dense",
            Box::new(|rng, seed, cfg| {
                let (n, d, m) = (rng.random_range(1..=3), rng.random_range(2..=6), rng.random_range(1..=4));
                let x = uniform(rng, &[n, d], -1.0, 1.0);
                let w = uniform(rng, &[d, m], -1.0, 1.0);
                let b = uniform(rng, &[m], -1.0, 1.0);
                check(vec![x, w, b], seed, cfg, |t, v| t.dense(v[0], v[1], v[2], Some(Activation::Gelu)))
            }),
        ),
        (
            "mul_gate",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                let x = uniform(rng, &s, -1.0, 1.0);
                let sg = uniform(rng, &[s[0], 1, s[2], s[3]], 0.0, 1.0);
                let cg = uniform(rng, &[s[0], s[1], 1, 1], 0.0, 1.0);
                check(vec![x, sg, cg], seed, cfg, |t, v| {
                    let y = t.mul_gate(v[0], v[1])?;
                    t.mul_gate(y, v[2])
                })
            }),
        ),
        (
            "mul",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                let a = uniform(rng, &s, -1.0, 1.0);
                let b = uniform(rng, &s, -1.0, 1.0);
                check(vec![a, b], seed, cfg, |t, v| t.mul(v[0], v[1]))
            }),
        ),
        (
            "channel_mean_max",
            Box::new(|rng, seed, cfg| {
                let x = random_input(rng, -1.0, 1.0);
                check(vec![x], seed, cfg, |t, v| t.channel_mean_max(v[0]))
            }),
        ),
        (
            "upsample_bilinear",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                let x = uniform(rng, &s, -1.0, 1.0);
                let (oh, ow) = (rng.random_range(2..=12), rng.random_range(2..=12));
                check(vec![x], seed, cfg, move |t, v| t.upsample_bilinear(v[0], oh, ow))
            }),
        ),
    ];
    cases.push((
        "flatten+scale",
        Box::new(|rng, seed, cfg| {
            let x = random_input(rng, -1.0, 1.0);
            check(vec![x], seed, cfg, |t, v| {
                let y = t.flatten(v[0])?;
                t.scale(y, -1.7)
            })
        }),
    ));
    cases
}

/// Builds a module's store, then checks it with respect to input and weights.
fn module_check<M>(
    seed: u64,
    cfg: &GradCheckConfig,
    shape: [usize; 4],
    init: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<M>,
    forward: impl Fn(&M, &mut Session<'_>, &mut Tape, Var) -> Result<Var>,
    mode: Mode,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let module = init(&mut store, &mut rng)?;
    let x = uniform(&mut rng, &shape, -1.0, 1.0);
    params_check(&store, x, seed, cfg, mode, |s, t, x| forward(&module, s, t, x))
}

/// One var per store entry: `weights` in order for trainable entries,
/// constants for buffers.
fn store_vars(store: &ParamStore, tape: &mut Tape, weights: &[Var]) -> Vec<Var> {
    let mut next = weights.iter();
    (0..store.len())
        .map(|i| match store.kind(i) {
            ParamKind::Weight => *next.next().expect("one var per weight"),
            ParamKind::Buffer => tape.constant(store.tensor(i).clone()),
        })
        .collect()
}

/// Checks `forward` with respect to its input and every weight in `store`.
pub fn params_check<F>(store: &ParamStore, x: Tensor, seed: u64, cfg: &GradCheckConfig, mode: Mode, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_>, &mut Tape, Var) -> Result<Var>,
{
    let weights: Vec<usize> = store.weights().collect();
    let mut inputs = vec![x];
    inputs.extend(weights.iter().map(|&i| store.tensor(i).clone()));
    check(inputs, seed, cfg, |tape, v| {
        let vars = store_vars(store, tape, &v[1..]);
        let mut s = Session::new(store, mode).with_dropout_seed(seed).with_param_vars(&vars)?;
        forward(&mut s, tape, v[0])
    })
}

fn attention_cases() -> Vec<(&'static str, Case)> {
    vec![
        (
            "spatial_channel_attention",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                module_check(
                    seed,
                    cfg,
                    s,
                    |st, r| {
                        let m = SpatialChannelAttention::new("sca", s[1]);
                        m.init(st, r)?;
                        Ok(m)
                    },
                    |m, sess, t, x| m.forward(sess, t, x),
                    Mode::Eval,
                )
            }),
        ),
        (
            "pmm_block",
            Box::new(|rng, seed, cfg| {
                let mut s = random_shape(rng);
                s[0] = 2;
                module_check(
                    seed,
                    cfg,
                    s,
                    |st, r| {
                        let m = Pmm::new("pmm", s[1], 0.2);
                        m.init(st, r)?;
                        Ok(m)
                    },
                    |m, sess, t, x| m.forward(sess, t, x),
                    Mode::Train,
                )
            }),
        ),
        (
            "csfem",
            Box::new(|rng, seed, cfg| {
                let s = random_shape(rng);
                module_check(
                    seed,
                    cfg,
                    s,
                    |st, r| {
                        let m = Csfem::new("csfem", s[1]);
                        m.init(st, r)?;
                        Ok(m)
                    },
                    |m, sess, t, x| m.forward(sess, t, x),
                    Mode::Eval,
                )
            }),
        ),
    ]
}

fn run_cases(cases: Vec<(&'static str, Case)>, seeds: u64, cfg: &GradCheckConfig) -> Result<Vec<CheckRow>> {
    cases
        .into_iter()
        .map(|(name, case)| {
            let mut row = CheckRow::new(name, cfg.tol);
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ name.len() as u64);
                let cfg = GradCheckConfig { seed, ..cfg.clone() };
                row.absorb(&case(&mut rng, seed, &cfg)?);
            }
            Ok(row)
        })
        .collect()
}

/// Every differentiable primitive over `seeds` random shapes (64-bit, eps 1e-5).
pub fn primitive_suite(seeds: u64) -> Result<Vec<CheckRow>> {
    run_cases(primitive_cases(), seeds, &GradCheckConfig::default())
}

/// The three gating modules, with respect to input and all weights.
pub fn attention_suite(seeds: u64) -> Result<Vec<CheckRow>> {
    run_cases(attention_cases(), seeds, &GradCheckConfig::default())
}

/// Sets every BN running statistic to the statistics of `x`, so eval mode
/// sees unit-scale activations as it would after training.
pub fn calibrate_bn<N: Network>(net: &mut N, x: &Tensor) -> Result<()> {
    let updates = {
        let mut tape = Tape::new();
        let mut s = Session::new(net.params(), Mode::Train).tracking_params(false);
        let xv = tape.constant(x.clone());
        net.forward(&mut s, &mut tape, xv)?;
        s.take_bn_updates()
    };
    apply_bn_updates(net.params_mut(), &updates, 0.0)
}

/// Random weights with zero mean over axis 1, so the projection ignores the
/// constant part of a distribution over that axis.
fn centered_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut t = uniform(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), shape, -1.0, 1.0);
    let (n, k) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let v = t.values_mut();
    for b in 0..n {
        for i in 0..inner {
            let at = |c: usize| (b * k + c) * inner + i;
            let mean = (0..k).map(|c| v[at(c)]).sum::<f64>() / k as f64;
            for c in 0..k {
                v[at(c)] -= mean;
            }
        }
    }
    t
}

fn network_row<N: Network>(name: &str, net: &N, x: Tensor, coords: usize, seed: u64) -> Result<CheckRow> {
    let cfg = GradCheckConfig {
        tol: 1e-3,
        max_coords_per_input: Some(coords),
        seed,
        ..GradCheckConfig::default()
    };
    let store = net.params();
    let weights: Vec<usize> = store.weights().collect();
    let mut inputs = vec![x];
    inputs.extend(weights.iter().map(|&i| store.tensor(i).clone()));
    let report = grad_check_multi(
        |tape, v| {
            let vars = store_vars(store, tape, &v[1..]);
            let mut s = Session::new(store, Mode::Eval).with_param_vars(&vars)?;
            let y = net.forward(&mut s, tape, v[0])?;
            let w = centered_weights(tape.shape(y), seed);
            tape.weighted_sum(y, &w)
        },
        &inputs,
        &cfg,
    )?;
    let mut row = CheckRow::new(name, cfg.tol);
    row.absorb(&report);
    Ok(row)
}

/// Whole-network check of tiny PMAD-LinkNet on a 2-image 32x32 batch, sampling
/// `coords` coordinates of the input and of each weight tensor.
pub fn seg_network_check(coords: usize, seed: u64) -> Result<CheckRow> {
    let mut net = SegModel::new(SegNetConfig::tiny().with_input(32, 32), seed)?;
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(seed + 1), &[2, 1, 32, 32], 0.0, 1.0);
    calibrate_bn(&mut net, &x)?;
    network_row("pmad-linknet (tiny, 2x32x32)", &net, x, coords, seed)
}

/// Whole-network check of tiny CSFEC-Net on one 32x32 sample.
pub fn cls_network_check(coords: usize, seed: u64) -> Result<CheckRow> {
    let mut net = ClsModel::new(ClsNetConfig::tiny().with_input(32, 32), seed)?;
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(seed + 1), &[1, 3, 32, 32], 0.0, 1.0);
    calibrate_bn(&mut net, &x)?;
    network_row("csfec-net (tiny, 1x32x32)", &net, x, coords, seed)
}
