use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rule;
use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Silu,
    Gelu,
    LeakyRelu(f64),
}

/// Neumaier-compensated sum; keeps reductions accurate enough for
/// finite-difference checks of large graphs.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => x * std_normal_cdf(x),
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
        }
    }

    /// Derivative at `x`; kinks take the negative-side slope.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => std_normal_cdf(x) + x * std_normal_pdf(x),
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::LeakyRelu(_) => "leaky_relu",
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// How a `[N, C, 1, 1]` or `[N, 1, H, W]` operand lines up with `[N, C, H, W]`.
#[derive(Clone, Copy)]
enum Gate {
    Same,
    Channel { hw: usize },
    Spatial { c: usize, hw: usize },
}

fn gate_kind(full: &[usize], gate: &[usize]) -> Result<Gate> {
    if full == gate {
        return Ok(Gate::Same);
    }
    if let ([n, c, h, w], [gn, gc, gh, gw]) = (full, gate) {
        if n == gn && c == gc && *gh == 1 && *gw == 1 {
            return Ok(Gate::Channel { hw: h * w });
        }
        if n == gn && *gc == 1 && h == gh && w == gw {
            return Ok(Gate::Spatial { c: *c, hw: h * w });
        }
    }
    Err(shape_err(format!("cannot broadcast {gate:?} against {full:?}")))
}

fn gate_index(kind: Gate, i: usize) -> usize {
    match kind {
        Gate::Same => i,
        Gate::Channel { hw, .. } => i / hw,
        Gate::Spatial { c, hw } => (i / (c * hw)) * hw + i % hw,
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.value(a).len() < self.value(b).len() {
            (b, a)
        } else {
            (a, b)
        };
        let kind = gate_kind(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<f64> = av
            .values()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.values()[gate_index(kind, i)])
            .collect();
        let blen = bv.len();
        let value = Tensor::from_vec(av.shape(), out)?;
        self.push(
            value,
            &[a, b],
            rule("add", move |ctx| {
                let g = ctx.grad_output;
                let gb = match kind {
                    Gate::Same => g.to_vec(),
                    _ => {
                        let mut gb = vec![0.0; blen];
                        g.iter()
                            .enumerate()
                            .for_each(|(i, v)| gb[gate_index(kind, i)] += v);
                        gb
                    }
                };
                vec![Some(g.to_vec()), Some(gb)]
            }),
        )
    }

    /// `a - b` for identically shaped operands.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product of identically shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "mul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = Tensor::from_vec(
            self.shape(a),
            zip_map(self.value(a).values(), self.value(b).values(), |x, y| x * y),
        )?;
        self.push(
            value,
            &[a, b],
            rule("mul", |ctx| {
                let (x, y) = (ctx.inputs[0].values(), ctx.inputs[1].values());
                let g = ctx.grad_output;
                vec![
                    Some(zip_map(g, y, |g, y| g * y)),
                    Some(zip_map(g, x, |g, x| g * x)),
                ]
            }),
        )
    }

    /// Multiplies a `[N, C, H, W]` map by a channel gate `[N, C, 1, 1]`,
    /// a spatial gate `[N, 1, H, W]`, or a same-shape gate.
    pub fn mul_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let kind = gate_kind(self.shape(x), self.shape(gate))?;
        let (xv, gv) = (self.value(x), self.value(gate));
        let out: Vec<f64> = xv
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv.values()[gate_index(kind, i)])
            .collect();
        let value = Tensor::from_vec(xv.shape(), out)?;
        self.push(
            value,
            &[x, gate],
            rule("mul_gate", move |ctx| {
                let (xs, gs) = (ctx.inputs[0].values(), ctx.inputs[1].values());
                let g = ctx.grad_output;
                let mut dx = vec![0.0; xs.len()];
                let mut dg = vec![0.0; gs.len()];
                for i in 0..xs.len() {
                    let j = gate_index(kind, i);
                    dx[i] = g[i] * gs[j];
                    dg[j] += g[i] * xs[i];
                }
                vec![Some(dx), Some(dg)]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = Tensor::from_vec(
            self.shape(x),
            self.value(x).values().iter().map(|v| v * factor).collect(),
        )?;
        self.push(
            value,
            &[x],
            rule("scale", move |ctx| {
                vec![Some(ctx.grad_output.iter().map(|g| g * factor).collect())]
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let total = compensated_sum(self.value(x).values().iter().copied());
        self.push(
            Tensor::scalar(total),
            &[x],
            rule("sum", move |ctx| vec![Some(vec![ctx.grad_output[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ x ⊙ w` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(shape_err("weighted_sum weights shape"));
        }
        let w = weights.values().to_vec();
        let total = compensated_sum(self.value(x).values().iter().zip(&w).map(|(a, b)| a * b));
        self.push(
            Tensor::scalar(total),
            &[x],
            rule("weighted_sum", move |ctx| {
                let g = ctx.grad_output[0];
                vec![Some(w.iter().map(|v| v * g).collect())]
            }),
        )
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        if matches!(kind, Activation::Relu | Activation::LeakyRelu(_)) {
            let signs: Vec<u64> = self
                .value(x)
                .values()
                .chunks(64)
                .map(|c| c.iter().enumerate().fold(0u64, |m, (i, &v)| m | (u64::from(v > 0.0) << i)))
                .collect();
            self.record_branches(signs);
        }
        let value = Tensor::from_vec(
            self.shape(x),
            self.value(x).values().iter().map(|&v| kind.apply(v)).collect(),
        )?;
        self.push(
            value,
            &[x],
            rule(kind.name(), move |ctx| {
                let xs = ctx.inputs[0].values();
                vec![Some(zip_map(ctx.grad_output, xs, |g, x| g * kind.derivative(x)))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).values();
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let m = (0..dim).map(|k| xs[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..dim {
                    let e = (xs[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..dim {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        self.push(
            value,
            &[x],
            rule("softmax", move |ctx| {
                let y = ctx.output.values();
                let g = ctx.grad_output;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * dim + k) * inner + i;
                        let dot: f64 = (0..dim).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..dim {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Inverted dropout. In eval mode (`train == false`) or with `rate == 0`
    /// this records an identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        let n = self.value(x).len();
        let mask: Vec<f64> = if train && rate > 0.0 {
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; n]
        };
        let value = Tensor::from_vec(self.shape(x), zip_map(self.value(x).values(), &mask, |a, b| a * b))?;
        self.push(
            value,
            &[x],
            rule("dropout", move |ctx| vec![Some(zip_map(ctx.grad_output, &mask, |g, m| g * m))]),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?.with_requires_grad(false);
        self.push(value, &[x], rule("reshape", |ctx| vec![Some(ctx.grad_output.to_vec())]))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Stacks tensors along axis 1; all other dimensions must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(shape_err("concat needs rank >= 2"));
        }
        let n = base[0];
        let inner: usize = base[2..].iter().product();
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != n || s[2..] != base[2..] {
                return Err(shape_err(format!("concat of {base:?} and {s:?}")));
            }
            chans.push(s[1]);
        }
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&chans) {
                let v = self.value(p).values();
                out.extend_from_slice(&v[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = base.clone();
        shape[1] = total;
        let value = Tensor::from_vec(&shape, out)?;
        self.push(
            value,
            parts,
            rule("concat", move |ctx| {
                let g = ctx.grad_output;
                let mut grads: Vec<Vec<f64>> =
                    chans.iter().map(|c| Vec::with_capacity(n * c * inner)).collect();
                let mut at = 0;
                for _ in 0..n {
                    for (gi, &c) in grads.iter_mut().zip(&chans) {
                        gi.extend_from_slice(&g[at..at + c * inner]);
                        at += c * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    /// Picks channel `c` of `[N, C, ...]`, keeping a singleton channel axis.
    pub fn select_channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || c >= shape[1] {
            return Err(shape_err(format!("channel {c} of {shape:?}")));
        }
        let (n, ch) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let xs = self.value(x).values();
        let mut out = Vec::with_capacity(n * inner);
        for b in 0..n {
            let at = (b * ch + c) * inner;
            out.extend_from_slice(&xs[at..at + inner]);
        }
        let mut oshape = shape.clone();
        oshape[1] = 1;
        let len = xs.len();
        let value = Tensor::from_vec(&oshape, out)?;
        self.push(
            value,
            &[x],
            rule("select_channel", move |ctx| {
                let mut dx = vec![0.0; len];
                for b in 0..n {
                    let at = (b * ch + c) * inner;
                    dx[at..at + inner].copy_from_slice(&ctx.grad_output[b * inner..(b + 1) * inner]);
                }
                vec![Some(dx)]
            }),
        )
    }
}
