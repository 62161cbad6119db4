//! Dense kernels shared by the convolution and dense layers.

/// Row-major matrix operand: `rows x cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, where `out` is row-major `m x n`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], beta: f64) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(out.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths were checked against the logical dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D sliding window over one `[C, H, W]` image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Output positions `[lo, hi)` along one axis whose tap `k` lands inside
    /// an input of length `extent`.
    fn span(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if extent + p > k { (extent + p - k).div_ceil(s).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfolds `img` into `col` (`col_rows x col_cols`), zero padding outside.
    pub fn im2col(&self, img: &[f64], col: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (h, w, s, p) = (self.height, self.width, self.stride, self.padding);
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kh {
                let (ylo, yhi) = self.span(ki, h, oh);
                for kj in 0..self.kw {
                    let (xlo, xhi) = self.span(kj, w, ow);
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    dst[..ylo * ow].fill(0.0);
                    dst[yhi * ow..].fill(0.0);
                    for oy in ylo..yhi {
                        let iy = oy * s + ki - p;
                        let src = &plane[iy * w..(iy + 1) * w];
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        line[..xlo].fill(0.0);
                        line[xhi..].fill(0.0);
                        if xhi > xlo {
                            let x0 = xlo * s + kj - p;
                            if s == 1 {
                                line[xlo..xhi].copy_from_slice(&src[x0..x0 + xhi - xlo]);
                            } else {
                                for (v, ix) in line[xlo..xhi].iter_mut().zip((x0..).step_by(s)) {
                                    *v = src[ix];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters `col` and adds into `img`.
    pub fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (h, w, s, p) = (self.height, self.width, self.stride, self.padding);
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kh {
                let (ylo, yhi) = self.span(ki, h, oh);
                for kj in 0..self.kw {
                    let (xlo, xhi) = self.span(kj, w, ow);
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in ylo..yhi {
                        if xhi <= xlo {
                            break;
                        }
                        let iy = oy * s + ki - p;
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        let line = &src[oy * ow + xlo..oy * ow + xhi];
                        let x0 = xlo * s + kj - p;
                        if s == 1 {
                            for (d, v) in dst[x0..x0 + line.len()].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (v, ix) in line.iter().zip((x0..).step_by(s)) {
                                dst[ix] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
