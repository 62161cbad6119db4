use super::rule;
use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{dims4, Tensor};

fn pooled_dims(h: usize, w: usize, k: usize, s: usize) -> Result<(usize, usize)> {
    if k == 0 || s == 0 {
        return Err(shape_err("pooling window and stride must be positive"));
    }
    if k > h || k > w {
        return Err(Error::WindowTooLarge {
            window: k,
            height: h,
            width: w,
        });
    }
    Ok(((h - k) / s + 1, (w - k) / s + 1))
}

/// Sample positions and weights of a corner-aligned bilinear resize.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                (src as f64 - 1.0) / 2.0
            } else {
                i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

impl Tape {
    /// Max over `k x k` windows with stride `s`; backward routes to the first
    /// maximal element in row-major order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let (oh, ow) = pooled_dims(h, w, k, s)?;
        let xs = self.value(x).values();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = base;
                    for m in 0..k {
                        for q in 0..k {
                            let idx = base + (i * s + m) * w + j * s + q;
                            if xs[idx] > best {
                                best = xs[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (p * oh + i) * ow + j;
                    out[o] = best;
                    arg[o] = at;
                }
            }
        }
        let len = xs.len();
        self.record_branches(arg.iter().map(|&a| a as u64));
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        self.push(
            value,
            &[x],
            rule("maxpool2d", move |ctx| {
                let mut dx = vec![0.0; len];
                for (g, &a) in ctx.grad_output.iter().zip(&arg) {
                    dx[a] += g;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean over `k x k` windows with stride `s`.
    pub fn avgpool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let (oh, ow) = pooled_dims(h, w, k, s)?;
        let xs = self.value(x).values();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for m in 0..k {
                        let row = base + (i * s + m) * w + j * s;
                        acc += xs[row..row + k].iter().sum::<f64>();
                    }
                    out[(p * oh + i) * ow + j] = acc * inv;
                }
            }
        }
        let len = xs.len();
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        self.push(
            value,
            &[x],
            rule("avgpool2d", move |ctx| {
                let g = ctx.grad_output;
                let mut dx = vec![0.0; len];
                for p in 0..n * c {
                    let base = p * h * w;
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(p * oh + i) * ow + j] * inv;
                            for m in 0..k {
                                let row = base + (i * s + m) * w + j * s;
                                dx[row..row + k].iter_mut().for_each(|v| *v += gv);
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]` spatial mean.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let plane = h * w;
        if plane == 0 {
            return Err(shape_err("global pooling of an empty plane"));
        }
        let xs = self.value(x).values();
        let out: Vec<f64> = xs
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::from_vec(&[n, c, 1, 1], out)?;
        self.push(
            value,
            &[x],
            rule("global_avgpool", move |ctx| {
                let inv = 1.0 / plane as f64;
                let dx = ctx
                    .grad_output
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(g * inv, plane))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// `[N, C, H, W] -> [N, 2, H, W]`: channel mean stacked over channel max.
    pub fn channel_mean_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let plane = h * w;
        let xs = self.value(x).values();
        let mut out = vec![0.0; n * 2 * plane];
        let mut arg = vec![0usize; n * plane];
        for b in 0..n {
            for p in 0..plane {
                let mut sum = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for ch in 0..c {
                    let idx = (b * c + ch) * plane + p;
                    sum += xs[idx];
                    if xs[idx] > best {
                        best = xs[idx];
                        at = idx;
                    }
                }
                out[b * 2 * plane + p] = sum / c as f64;
                out[(b * 2 + 1) * plane + p] = best;
                arg[b * plane + p] = at;
            }
        }
        let len = xs.len();
        self.record_branches(arg.iter().map(|&a| a as u64));
        let value = Tensor::from_vec(&[n, 2, h, w], out)?;
        self.push(
            value,
            &[x],
            rule("channel_mean_max", move |ctx| {
                let g = ctx.grad_output;
                let mut dx = vec![0.0; len];
                let inv = 1.0 / c as f64;
                for b in 0..n {
                    for p in 0..plane {
                        let gm = g[b * 2 * plane + p] * inv;
                        for ch in 0..c {
                            dx[(b * c + ch) * plane + p] += gm;
                        }
                        dx[arg[b * plane + p]] += g[(b * 2 + 1) * plane + p];
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Corner-aligned bilinear resize of every plane to `out_h x out_w`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(shape_err("bilinear resize to or from an empty plane"));
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xs = self.value(x).values();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[i * out_w + j] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let len = xs.len();
        let value = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
        self.push(
            value,
            &[x],
            rule("upsample_bilinear", move |ctx| {
                let g = ctx.grad_output;
                let mut dx = vec![0.0; len];
                for p in 0..n * c {
                    let gsrc = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gsrc[i * out_w + j];
                            d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            d[y1 * w + x0] += gv * fy * (1.0 - fx);
                            d[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = tape.maxpool2d(x, 2, 2).unwrap();
        let a = tape.avgpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(m).values(), &[4.0]);
        assert_eq!(tape.value(a).values(), &[2.5]);
        assert!(matches!(tape.maxpool2d(x, 3, 1), Err(Error::WindowTooLarge { .. })));
    }

    #[test]
    fn constant_image() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 4, 4], 0.3));
        for y in [tape.maxpool2d(x, 2, 2).unwrap(), tape.avgpool2d(x, 2, 1).unwrap()] {
            assert!(tape.value(y).values().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn windows_match_brute_force() {
        let vals: Vec<f64> = (0..16).map(|i| ((i * 29) % 16) as f64 * 0.25 - 2.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 4, 4], vals.clone()).unwrap());
        let m = tape.maxpool2d(x, 2, 2).unwrap();
        let a = tape.avgpool2d(x, 2, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let win: Vec<f64> = (0..4).map(|t| vals[(2 * i + t / 2) * 4 + 2 * j + t % 2]).collect();
                let mx = win.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let av = win.iter().sum::<f64>() / 4.0;
                assert_eq!(tape.value(m).values()[i * 2 + j], mx);
                assert!((tape.value(a).values()[i * 2 + j] - av).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::full(&[1, 1, 2, 2], 1.0));
        let m = tape.maxpool2d(x, 2, 2).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_corner_aligned() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let y = tape.upsample_bilinear(x, 2, 4).unwrap();
        let v = tape.value(y).values();
        for row in v.chunks(4) {
            for (a, b) in row.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
