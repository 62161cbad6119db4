use super::rule;
use crate::error::{shape_err, Result};
use crate::linalg::{gemm, Mat, Window};
use crate::tape::{Tape, Var};
use crate::tensor::{dims4, Tensor};

use super::Activation;

/// Kernel, bias and geometry of a convolution.
///
/// For [`Tape::conv2d`] the kernel is `[out_ch, in_ch, kh, kw]`; for
/// [`Tape::transpose_conv2d`] it is `[in_ch, out_ch, kh, kw]`, so one tensor
/// serves both directions of an adjoint pair.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub kernel: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            bias,
            stride,
            padding,
        }
    }
}

fn kernel_dims(tape: &Tape, p: &ConvParams) -> Result<(usize, usize, usize, usize)> {
    let dims = dims4(tape.shape(p.kernel))?;
    if dims.2 == 0 || dims.3 == 0 || p.stride == 0 {
        return Err(shape_err("kernel and stride must be positive"));
    }
    Ok(dims)
}

fn check_bias(tape: &Tape, p: &ConvParams, channels: usize) -> Result<()> {
    if let Some(b) = p.bias {
        if tape.shape(b) != [channels] {
            return Err(shape_err(format!(
                "bias {:?} for {channels} output channels",
                tape.shape(b)
            )));
        }
    }
    Ok(())
}

fn bias_grad(g: &[f64], n: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for b in 0..n {
        for (c, acc) in db.iter_mut().enumerate() {
            let at = (b * channels + c) * plane;
            *acc += g[at..at + plane].iter().sum::<f64>();
        }
    }
    db
}

impl Tape {
    /// Zero-padded cross-correlation.
    pub fn conv2d(&mut self, x: Var, p: &ConvParams) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let (oc, ic, kh, kw) = kernel_dims(self, p)?;
        if ic != c {
            return Err(shape_err(format!("conv kernel expects {ic} channels, input has {c}")));
        }
        if h + 2 * p.padding < kh || w + 2 * p.padding < kw {
            return Err(shape_err(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        check_bias(self, p, oc)?;
        let win = Window {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride: p.stride,
            padding: p.padding,
        };
        let (oh, ow) = (win.out_height(), win.out_width());
        let (rows, cols) = (win.col_rows(), win.col_cols());
        let xs = self.value(x).values();
        let ks = self.value(p.kernel).values();
        let mut out = vec![0.0; n * oc * cols];
        let mut col = vec![0.0; rows * cols];
        for b in 0..n {
            win.im2col(&xs[b * c * h * w..(b + 1) * c * h * w], &mut col);
            let dst = &mut out[b * oc * cols..(b + 1) * oc * cols];
            if let Some(bias) = p.bias {
                for (o, &bv) in self.value(bias).values().iter().enumerate() {
                    dst[o * cols..(o + 1) * cols].fill(bv);
                }
            }
            gemm(Mat::new(ks, oc, rows), Mat::new(&col, rows, cols), dst, 1.0);
        }
        let value = Tensor::from_vec(&[n, oc, oh, ow], out)?;
        let mut inputs = vec![x, p.kernel];
        inputs.extend(p.bias);
        self.push(
            value,
            &inputs,
            rule("conv2d", move |ctx| {
                let xs = ctx.inputs[0].values();
                let ks = ctx.inputs[1].values();
                let g = ctx.grad_output;
                let mut dx = vec![0.0; xs.len()];
                let mut dk = vec![0.0; ks.len()];
                let mut col = vec![0.0; rows * cols];
                let mut dcol = vec![0.0; rows * cols];
                for b in 0..n {
                    let gb = &g[b * oc * cols..(b + 1) * oc * cols];
                    win.im2col(&xs[b * c * h * w..(b + 1) * c * h * w], &mut col);
                    gemm(Mat::new(gb, oc, cols), Mat::new(&col, rows, cols).t(), &mut dk, 1.0);
                    gemm(Mat::new(ks, oc, rows).t(), Mat::new(gb, oc, cols), &mut dcol, 0.0);
                    win.col2im(&dcol, &mut dx[b * c * h * w..(b + 1) * c * h * w]);
                }
                let mut grads = vec![Some(dx), Some(dk)];
                if ctx.inputs.len() == 3 {
                    grads.push(Some(bias_grad(g, n, oc, cols)));
                }
                grads
            }),
        )
    }

    /// Scatter-add transpose convolution; the adjoint of [`Tape::conv2d`]
    /// for a shared kernel. Output size is `(H - 1) * s + k - 2p`.
    pub fn transpose_conv2d(&mut self, x: Var, p: &ConvParams) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let (ic, oc, kh, kw) = kernel_dims(self, p)?;
        if ic != c {
            return Err(shape_err(format!(
                "transpose kernel expects {ic} channels, input has {c}"
            )));
        }
        let full_h = (h - 1) * p.stride + kh;
        let full_w = (w - 1) * p.stride + kw;
        if full_h <= 2 * p.padding || full_w <= 2 * p.padding {
            return Err(shape_err("transpose conv padding removes the whole output"));
        }
        check_bias(self, p, oc)?;
        let (oh, ow) = (full_h - 2 * p.padding, full_w - 2 * p.padding);
        // Geometry of the forward convolution this operation is the adjoint of.
        let win = Window {
            channels: oc,
            height: oh,
            width: ow,
            kh,
            kw,
            stride: p.stride,
            padding: p.padding,
        };
        debug_assert_eq!((win.out_height(), win.out_width()), (h, w));
        let (rows, cols) = (win.col_rows(), h * w);
        let xs = self.value(x).values();
        let ks = self.value(p.kernel).values();
        let plane = oh * ow;
        let mut out = vec![0.0; n * oc * plane];
        let mut col = vec![0.0; rows * cols];
        for b in 0..n {
            gemm(
                Mat::new(ks, ic, rows).t(),
                Mat::new(&xs[b * c * cols..(b + 1) * c * cols], c, cols),
                &mut col,
                0.0,
            );
            let dst = &mut out[b * oc * plane..(b + 1) * oc * plane];
            win.col2im(&col, dst);
            if let Some(bias) = p.bias {
                for (o, &bv) in self.value(bias).values().iter().enumerate() {
                    dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::from_vec(&[n, oc, oh, ow], out)?;
        let mut inputs = vec![x, p.kernel];
        inputs.extend(p.bias);
        self.push(
            value,
            &inputs,
            rule("transpose_conv2d", move |ctx| {
                let xs = ctx.inputs[0].values();
                let ks = ctx.inputs[1].values();
                let g = ctx.grad_output;
                let mut dx = vec![0.0; xs.len()];
                let mut dk = vec![0.0; ks.len()];
                let mut gcol = vec![0.0; rows * cols];
                for b in 0..n {
                    win.im2col(&g[b * oc * plane..(b + 1) * oc * plane], &mut gcol);
                    let xb = &xs[b * c * cols..(b + 1) * c * cols];
                    gemm(
                        Mat::new(ks, ic, rows),
                        Mat::new(&gcol, rows, cols),
                        &mut dx[b * c * cols..(b + 1) * c * cols],
                        0.0,
                    );
                    gemm(Mat::new(xb, c, cols), Mat::new(&gcol, rows, cols).t(), &mut dk, 1.0);
                }
                let mut grads = vec![Some(dx), Some(dk)];
                if ctx.inputs.len() == 3 {
                    grads.push(Some(bias_grad(g, n, oc, plane)));
                }
                grads
            }),
        )
    }

    /// Parallel convolutions of one input, concatenated along channels.
    pub fn filter_concat(&mut self, x: Var, params: &[ConvParams]) -> Result<Var> {
        let outs = params
            .iter()
            .map(|p| self.conv2d(x, p))
            .collect::<Result<Vec<_>>>()?;
        self.concat_channels(&outs)
    }

    /// `x [N, D] · W [D, M] + b [M]`, optionally followed by an activation.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Option<Activation>) -> Result<Var> {
        let (n, d) = match self.shape(x) {
            [n, d] => (*n, *d),
            s => return Err(shape_err(format!("dense input must be [N, D], got {s:?}"))),
        };
        let m = match self.shape(w) {
            [wd, m] if *wd == d => *m,
            s => return Err(shape_err(format!("dense weight {s:?} for input width {d}"))),
        };
        if self.shape(b) != [m] {
            return Err(shape_err(format!("dense bias {:?} for width {m}", self.shape(b))));
        }
        let mut out = Vec::with_capacity(n * m);
        let bv = self.value(b).values();
        for _ in 0..n {
            out.extend_from_slice(bv);
        }
        gemm(
            Mat::new(self.value(x).values(), n, d),
            Mat::new(self.value(w).values(), d, m),
            &mut out,
            1.0,
        );
        let value = Tensor::from_vec(&[n, m], out)?;
        let y = self.push(
            value,
            &[x, w, b],
            rule("dense", move |ctx| {
                let (xs, ws) = (ctx.inputs[0].values(), ctx.inputs[1].values());
                let g = ctx.grad_output;
                let mut dx = vec![0.0; n * d];
                let mut dw = vec![0.0; d * m];
                gemm(Mat::new(g, n, m), Mat::new(ws, d, m).t(), &mut dx, 0.0);
                gemm(Mat::new(xs, n, d).t(), Mat::new(g, n, m), &mut dw, 0.0);
                let mut db = vec![0.0; m];
                for row in g.chunks(m.max(1)) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(dx), Some(dw), Some(db)]
            }),
        )?;
        match act {
            Some(a) => self.activation(a, y),
            None => Ok(y),
        }
    }
}
