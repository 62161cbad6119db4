use super::rule;
use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the batch's own mean and population variance.
    Train { eps: f64 },
    /// Normalize with stored running statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel batch statistics observed in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(shape_err(format!("batch norm expects [N, C] or [N, C, H, W], got {shape:?}"))),
    }
}

impl Tape {
    /// `gamma * (x - mu) / sqrt(var + eps) + beta` per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let (n, c, plane) = layout(&shape)?;
        let count = n * plane;
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!("batch norm affine parameters for {c} channels")));
        }
        let xs = self.value(x).values();
        let at = |b: usize, ch: usize| (b * c + ch) * plane;
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let s: f64 = (0..n).map(|b| xs[at(b, ch)..at(b, ch) + plane].iter().sum::<f64>()).sum();
                    let m = s / count as f64;
                    let v: f64 = (0..n)
                        .map(|b| {
                            xs[at(b, ch)..at(b, ch) + plane]
                                .iter()
                                .map(|x| (x - m) * (x - m))
                                .sum::<f64>()
                        })
                        .sum();
                    mean[ch] = m;
                    var[ch] = v / count as f64;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("running statistics do not match channel count"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gs = self.value(gamma).values();
        let bs = self.value(beta).values();
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let (scale, shift) = (gs[ch] * inv_std[ch], bs[ch] - gs[ch] * inv_std[ch] * mean[ch]);
                let base = at(b, ch);
                for i in base..base + plane {
                    out[i] = xs[i] * scale + shift;
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var,
        });
        let y = self.push(
            value,
            &[x, gamma, beta],
            rule(if train { "batch_norm_train" } else { "batch_norm_eval" }, move |ctx| {
                let xs = ctx.inputs[0].values();
                let gs = ctx.inputs[1].values();
                let g = ctx.grad_output;
                let at = |b: usize, ch: usize| (b * c + ch) * plane;
                let mut dx = vec![0.0; xs.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for b in 0..n {
                        for i in at(b, ch)..at(b, ch) + plane {
                            sg += g[i];
                            sgx += g[i] * (xs[i] - m) * is;
                        }
                    }
                    dbeta[ch] = sg;
                    dgamma[ch] = sgx;
                    let k = gs[ch] * is;
                    for b in 0..n {
                        for i in at(b, ch)..at(b, ch) + plane {
                            dx[i] = if train {
                                let xhat = (xs[i] - m) * is;
                                k * (g[i] - sg / count as f64 - xhat * sgx / count as f64)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        )?;
        Ok((y, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(tape: &mut Tape, x: Tensor, g: f64, b: f64, mode: BatchNormMode<'_>) -> Vec<f64> {
        let c = x.dim(1);
        let x = tape.constant(x);
        let gv = tape.constant(Tensor::full(&[c], g));
        let bv = tape.constant(Tensor::full(&[c], b));
        let (y, _) = tape.batch_norm(x, gv, bv, mode).unwrap();
        tape.value(y).values().to_vec()
    }

    #[test]
    fn three_values_population_variance() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = bn(&mut tape, x, 1.0, 0.0, BatchNormMode::Train { eps: 0.0 });
        let s = (1.5f64).sqrt();
        for (a, b) in y.iter().zip([-s, 0.0, s]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((s - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn normalized_statistics_and_affine() {
        let vals: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 31) % 23) as f64 * 0.7 - 3.0).collect();
        let x = Tensor::from_vec(&[2, 3, 4, 5], vals).unwrap();
        let mut tape = Tape::new();
        let y = bn(&mut tape, x.clone(), 1.0, 0.0, BatchNormMode::Train { eps: 1e-12 });
        for ch in 0..3 {
            let xs: Vec<f64> = (0..2)
                .flat_map(|b| y[(b * 3 + ch) * 20..(b * 3 + ch + 1) * 20].to_vec())
                .collect();
            let m = xs.iter().sum::<f64>() / 40.0;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 40.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-6);
        }
        let z = bn(&mut tape, x, 2.0, 5.0, BatchNormMode::Train { eps: 1e-12 });
        for (a, b) in z.iter().zip(&y) {
            assert!((a - (2.0 * b + 5.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let y = bn(
            &mut tape,
            x.clone(),
            1.0,
            0.0,
            BatchNormMode::Eval {
                mean: &[1.0],
                var: &[4.0],
                eps: 0.0,
            },
        );
        assert_eq!(y, vec![1.0, 2.0]);
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let bad = tape.batch_norm(xv, g, b, BatchNormMode::Eval { mean: &[], var: &[], eps: 0.0 });
        assert!(bad.is_err());
    }

    #[test]
    fn empty_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[0, 2], vec![]).unwrap());
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.batch_norm(x, g, b, BatchNormMode::Train { eps: 1e-5 }),
            Err(Error::EmptyBatch)
        ));
    }
}
