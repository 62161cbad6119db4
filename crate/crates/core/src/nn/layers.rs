//! Parameterized building blocks shared by both networks.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ParamKind, ParamStore};
use super::session::Session;
use crate::error::{Error, Result};
use crate::ops::{Activation, ConvParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// Plain or transposed 2-D convolution owning `{name}.weight` / `{name}.bias`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub transpose: bool,
}

impl Conv {
    /// Stride-1 convolution with `same` padding for odd kernels.
    pub fn same(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self::new(name, in_ch, out_ch, kernel, 1, kernel / 2)
    }

    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            bias: true,
            transpose: false,
        }
    }

    pub fn transposed(mut self) -> Self {
        self.transpose = true;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let k = self.kernel;
        let (shape, fan_in) = if self.transpose {
            ([self.in_ch, self.out_ch, k, k], self.in_ch * k * k / (self.stride * self.stride).max(1))
        } else {
            ([self.out_ch, self.in_ch, k, k], self.in_ch * k * k)
        };
        store.insert(format!("{}.weight", self.name), he_normal(&shape, fan_in, rng)?, ParamKind::Weight)?;
        if self.bias {
            store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_ch]), ParamKind::Weight)?;
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let kernel = s.param(tape, &format!("{}.weight", self.name))?;
        let bias = if self.bias {
            Some(s.param(tape, &format!("{}.bias", self.name))?)
        } else {
            None
        };
        let p = ConvParams::new(kernel, bias, self.stride, self.padding);
        if self.transpose {
            tape.transpose_conv2d(x, &p)
        } else {
            tape.conv2d(x, &p)
        }
    }

    pub fn out_size(&self, size: usize) -> usize {
        if self.transpose {
            (size - 1) * self.stride + self.kernel - 2 * self.padding
        } else {
            (size + 2 * self.padding - self.kernel) / self.stride + 1
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "{}{} {}->{} k{} s{} p{}",
            if self.transpose { "tconv" } else { "conv" },
            if self.bias { "" } else { "(no bias)" },
            self.in_ch,
            self.out_ch,
            self.kernel,
            self.stride,
            self.padding
        )
    }
}

/// Batch normalization owning gamma/beta and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        let c = self.channels;
        let n = &self.name;
        store.insert(format!("{n}.gamma"), Tensor::full(&[c], 1.0), ParamKind::Weight)?;
        store.insert(format!("{n}.beta"), Tensor::zeros(&[c]), ParamKind::Weight)?;
        store.insert(format!("{n}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer)?;
        store.insert(format!("{n}.running_var"), Tensor::full(&[c], 1.0), ParamKind::Buffer)?;
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        s.batch_norm(tape, x, &self.name)
    }
}

/// Convolution, optional batch norm, optional activation.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub act: Option<Activation>,
}

impl ConvUnit {
    /// conv -> BN -> activation, all named under `name`. The conv drops its
    /// bias since BN's shift subsumes it.
    pub fn new(name: &str, conv: Conv, act: Option<Activation>) -> Self {
        let conv = Conv {
            name: format!("{name}.conv"),
            bias: false,
            ..conv
        };
        let bn = Some(BatchNorm::new(format!("{name}.bn"), conv.out_ch));
        Self { conv, bn, act }
    }

    /// Shorthand for a stride-1 same-padded conv-BN-ReLU.
    pub fn relu(name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self::new(name, Conv::same("", in_ch, out_ch, kernel), Some(Activation::Relu))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv.init(store, rng)?;
        if let Some(bn) = &self.bn {
            bn.init(store)?;
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(s, tape, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(s, tape, y)?;
        }
        match self.act {
            Some(a) => tape.activation(a, y),
            None => Ok(y),
        }
    }

    pub fn out_ch(&self) -> usize {
        self.conv.out_ch
    }

    pub fn describe(&self) -> String {
        let mut d = self.conv.describe();
        if self.bn.is_some() {
            d.push_str(" +bn");
        }
        if let Some(a) = self.act {
            d.push_str(&format!(" +{}", a.name()));
        }
        d
    }
}

/// Chain of conv units applied in order.
#[derive(Debug, Clone)]
pub struct Path {
    pub units: Vec<ConvUnit>,
}

impl Path {
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.units.iter().try_for_each(|u| u.init(store, rng))
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        self.units.iter().try_fold(x, |y, u| u.forward(s, tape, y))
    }

    pub fn out_ch(&self) -> usize {
        self.units.last().map(ConvUnit::out_ch).unwrap_or(0)
    }

    pub fn describe(&self) -> String {
        self.units.iter().map(ConvUnit::describe).collect::<Vec<_>>().join(" | ")
    }
}

/// Fully connected layer owning `{name}.weight [D, M]` / `{name}.bias [M]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Option<Activation>,
}

impl Dense {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, act: Option<Activation>) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            act,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let w = he_normal(&[self.in_dim, self.out_dim], self.in_dim, rng)?;
        store.insert(format!("{}.weight", self.name), w, ParamKind::Weight)?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_dim]), ParamKind::Weight)?;
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = s.param(tape, &format!("{}.weight", self.name))?;
        let b = s.param(tape, &format!("{}.bias", self.name))?;
        tape.dense(x, w, b, self.act)
    }
}
