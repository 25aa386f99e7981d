//! Raw NCHW kernels shared by the forward and backward passes.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Spatial output size of a convolution, or `None` when the kernel does not fit.
pub(crate) fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (out_h·out_w)` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W · im2col(x[n])`, weight `O × (C·k·k)`.
pub(crate) fn conv2d<T: Scalar>(x: &[T], batch: usize, w: &[T], out_ch: usize, g: &ConvGeom) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_ch * g.col_cols();
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
        T::gemm(
            out_ch,
            g.col_rows(),
            g.col_cols(),
            w,
            false,
            &cols,
            false,
            T::zero(),
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    out
}

/// Gradients of [`conv2d`]: returns `(dx, dw)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    w: &[T],
    out_ch: usize,
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_ch * g.col_cols();
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); out_ch * g.col_rows()]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        let dy_n = &dy[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
            T::gemm(out_ch, g.col_cols(), g.col_rows(), dy_n, false, &cols, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(g.col_rows(), out_ch, g.col_cols(), w, true, dy_n, false, T::zero(), &mut cols);
            col2im(&cols, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Transposed convolution: the input-gradient of [`conv2d`] applied to `y`.
/// `g` describes the *forward* convolution whose input this produces.
pub(crate) fn conv_transpose2d<T: Scalar>(y: &[T], batch: usize, w: &[T], out_ch: usize, g: &ConvGeom) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let y_len = out_ch * g.col_cols();
    let mut x = vec![T::zero(); batch * in_len];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        T::gemm(
            g.col_rows(),
            out_ch,
            g.col_cols(),
            w,
            true,
            &y[n * y_len..(n + 1) * y_len],
            false,
            T::zero(),
            &mut cols,
        );
        col2im(&cols, g, &mut x[n * in_len..(n + 1) * in_len]);
    }
    x
}

/// Gradients of [`conv_transpose2d`] with respect to `y` and the kernel.
pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    y: &[T],
    batch: usize,
    w: &[T],
    out_ch: usize,
    g: &ConvGeom,
    dx: &[T],
    need_dy: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.channels * g.height * g.width;
    let y_len = out_ch * g.col_cols();
    let mut dy = need_dy.then(|| vec![T::zero(); batch * y_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); out_ch * g.col_rows()]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        im2col(&dx[n * in_len..(n + 1) * in_len], g, &mut cols);
        if let Some(dy) = dy.as_mut() {
            T::gemm(
                out_ch,
                g.col_rows(),
                g.col_cols(),
                w,
                false,
                &cols,
                false,
                T::zero(),
                &mut dy[n * y_len..(n + 1) * y_len],
            );
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(
                out_ch,
                g.col_cols(),
                g.col_rows(),
                &y[n * y_len..(n + 1) * y_len],
                false,
                &cols,
                true,
                T::one(),
                dw,
            );
        }
    }
    (dy, dw)
}

/// Max pooling over `planes` independent `h×w` planes. Returns values and flat argmax indices.
pub(crate) fn max_pool<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * s * w + j * s;
                for di in 0..k {
                    for dj in 0..k {
                        let at = base + (i * s + di) * w + j * s + dj;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx, oh, ow)
}

pub(crate) fn upsample_nearest<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let row = &plane[(i / f) * w..(i / f + 1) * w];
            for j in 0..ow {
                out.push(row[j / f]);
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                dx[p * h * w + (i / f) * w + j / f] += dy[p * oh * ow + i * ow + j];
            }
        }
    }
    dx
}

/// Normalized 1-D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of `planes` planes with the 1-D window `g` along both axes.
pub(crate) fn separable_filter<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, g: &[T]) -> Vec<T> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..ow {
                let mut acc = T::zero();
                for (t, &gt) in g.iter().enumerate() {
                    acc += gt * plane[i * w + j + t];
                }
                tmp[i * ow + j] = acc;
            }
        }
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = T::zero();
                for (t, &gt) in g.iter().enumerate() {
                    acc += gt * tmp[(i + t) * ow + j];
                }
                out.push(acc);
            }
        }
    }
    out
}

pub(crate) fn separable_filter_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, g: &[T]) -> Vec<T> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut dx = vec![T::zero(); planes * h * w];
    let mut dtmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        dtmp.iter_mut().for_each(|v| *v = T::zero());
        let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let d = dyp[i * ow + j];
                for (t, &gt) in g.iter().enumerate() {
                    dtmp[(i + t) * ow + j] += gt * d;
                }
            }
        }
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..ow {
                let d = dtmp[i * ow + j];
                for (t, &gt) in g.iter().enumerate() {
                    dxp[i * w + j + t] += gt * d;
                }
            }
        }
    }
    dx
}
