//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so the tape
//! is topologically ordered by construction and [`Tape::gradients`] is a single
//! reverse sweep.

pub mod cases;
mod gradcheck;
pub(crate) mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::gaussian_window;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::ConvGeom;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `x ± b` with `b` broadcast along dimension 1.
    ChannelBias { x: Var, b: Var, negate: bool },
    /// `x ± b` with `b` broadcast along the batch dimension.
    SampleBias { x: Var, b: Var, negate: bool },
    Relu(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { y: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    Dropout { x: Var, mask: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    BatchNormTranspose { y: Var, gamma: Var, beta: Var, eps: T },
    GaussFilter { x: Var, window: Vec<T> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    buffer_updates: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// `(parameter id, gradient)` for each parameter read through [`Tape::param`].
    /// A parameter read twice appears twice.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|(id, idx)| self.grads[*idx].as_ref().map(|g| (id.as_str(), g)))
    }
}

fn broadcast_len(shape: &[usize], axis_len: usize) -> Option<(usize, usize, usize)> {
    // (outer, channels, inner) for a dimension-1 broadcast
    if shape.len() < 2 || shape[1] != axis_len {
        return None;
    }
    let outer = shape[0];
    let inner = shape[2..].iter().product();
    Some((outer, axis_len, inner))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape == self.id && v.idx < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::NotOnTape)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn grad_flag(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Records an input. Gradients flow to it when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a named parameter value; its gradient is reported under `id`.
    pub fn param(&mut self, id: &str, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Param(id.to_string()), trainable)
    }

    /// Pending non-trainable state updates (batch-norm running statistics).
    pub fn buffer_updates(&self) -> &[(String, Tensor<T>)] {
        &self.buffer_updates
    }

    pub(crate) fn record_buffer_update(&mut self, id: String, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                ctx,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let out = self.zip_map(a, b, |x, y| x / y);
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * c);
        let rg = self.grad_flag(x);
        Ok(self.push(out, Op::Scale(x, c), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v + c);
        let rg = self.grad_flag(x);
        Ok(self.push(out, Op::AddScalar(x), rg))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * v);
        let rg = self.grad_flag(x);
        Ok(self.push(out, Op::Square(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        let rg = self.grad_flag(x);
        Ok(self.push(Tensor::scalar(T::of_f64(s)), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = v.data().iter().map(|v| v.as_f64()).sum::<f64>() / v.numel() as f64;
        let rg = self.grad_flag(x);
        Ok(self.push(Tensor::scalar(T::of_f64(s)), Op::Mean(x), rg))
    }

    /// Mean over every dimension except the leading one: `[N, ...] -> [N]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if v.rank() < 1 || v.numel() == 0 {
            return Err(Error::shape("mean_rows", format!("{:?}", v.shape())));
        }
        let n = v.shape()[0];
        let row = v.numel() / n;
        let data = (0..n)
            .map(|i| {
                let s: f64 = v.row(i).iter().map(|x| x.as_f64()).sum();
                T::of_f64(s / row as f64)
            })
            .collect();
        let rg = self.grad_flag(x);
        Ok(self.push(Tensor::from_vec(&[n], data), Op::MeanRows(x), rg))
    }

    /// Two-dimensional product `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("expected matrices, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {sa:?}{} · {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, ka, n, self.value(a).data(), ta, self.value(b).data(), tb, T::zero(), &mut out);
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a, b, ta, tb }, rg))
    }

    fn channel_bias(&mut self, x: Var, b: Var, negate: bool) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let bv = self.value(b);
        if bv.rank() != 1 {
            return Err(Error::shape("bias", format!("bias must be a vector, got {:?}", bv.shape())));
        }
        let (outer, ch, inner) = broadcast_len(self.shape(x), bv.numel()).ok_or_else(|| {
            Error::shape("bias", format!("{:?} does not broadcast over {:?}", bv.shape(), self.shape(x)))
        })?;
        let mut out = self.value(x).clone().with_requires_grad(false);
        let bd = self.value(b).data().to_vec();
        let od = out.data_mut();
        for o in 0..outer {
            for (c, &bc) in bd.iter().enumerate().take(ch) {
                let base = (o * ch + c) * inner;
                let s = if negate { -bc } else { bc };
                od[base..base + inner].iter_mut().for_each(|v| *v += s);
            }
        }
        let rg = self.grad_flag(x) || self.grad_flag(b);
        Ok(self.push(out, Op::ChannelBias { x, b, negate }, rg))
    }

    /// `x + b`, `b` broadcast along dimension 1 (features or channels).
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        self.channel_bias(x, b, false)
    }

    /// `x - b`, `b` broadcast along dimension 1.
    pub fn sub_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        self.channel_bias(x, b, true)
    }

    fn sample_bias(&mut self, x: Var, b: Var, negate: bool) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.is_empty() || &sx[1..] != sb {
            return Err(Error::shape("sample bias", format!("{sb:?} does not broadcast over {sx:?}")));
        }
        let row = self.value(b).numel();
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone().with_requires_grad(false);
        for chunk in out.data_mut().chunks_mut(row.max(1)) {
            for (v, &bb) in chunk.iter_mut().zip(&bd) {
                if negate {
                    *v -= bb;
                } else {
                    *v += bb;
                }
            }
        }
        let rg = self.grad_flag(x) || self.grad_flag(b);
        Ok(self.push(out, Op::SampleBias { x, b, negate }, rg))
    }

    /// `x + b` where `b` has the shape of one sample of `x`.
    pub fn add_sample(&mut self, x: Var, b: Var) -> Result<Var> {
        self.sample_bias(x, b, false)
    }

    /// `x - b` where `b` has the shape of one sample of `x`.
    pub fn sub_sample(&mut self, x: Var, b: Var) -> Result<Var> {
        self.sample_bias(x, b, true)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.grad_flag(x);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        let rg = self.grad_flag(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn nchw(&self, x: Var, ctx: &str) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(ctx, format!("expected N×C×H×W input, got {s:?}"))),
        }
    }

    /// Cross-correlation of `x: N×C×H×W` with `w: O×C×k×k` (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let [n, c, h, wd] = self.nchw(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("kernel {ws:?} incompatible with input channels {c}")));
        }
        let k = ws[2];
        let (oh, ow) = match (kernels::conv_out_size(h, k, stride, pad), kernels::conv_out_size(wd, k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape("conv2d", format!("kernel {k} does not fit {h}×{wd} with pad {pad}"))),
        };
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad, out_h: oh, out_w: ow };
        let out = kernels::conv2d(self.value(x).data(), n, self.value(w).data(), ws[0], &geom);
        let rg = self.grad_flag(x) || self.grad_flag(w);
        Ok(self.push(Tensor::from_vec(&[n, ws[0], oh, ow], out), Op::Conv2d { x, w, geom }, rg))
    }

    /// Transposed convolution with kernel `w: O×C×k×k` mapping `y: N×O×Hy×Wy`
    /// to `N×C×H×W`, where `H = (Hy-1)·stride - 2·pad + k + output_pad`.
    pub fn conv_transpose2d(&mut self, y: Var, w: Var, stride: usize, pad: usize, output_pad: (usize, usize)) -> Result<Var> {
        self.check(y)?;
        self.check(w)?;
        let [n, o, hy, wy] = self.nchw(y, "conv_transpose2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != o || ws[2] != ws[3] {
            return Err(Error::shape("conv_transpose2d", format!("kernel {ws:?} incompatible with {o} input channels")));
        }
        let k = ws[2];
        if stride == 0 || output_pad.0 >= stride || output_pad.1 >= stride {
            return Err(Error::shape("conv_transpose2d", format!("output padding {output_pad:?} must be smaller than stride {stride}")));
        }
        let full_h = (hy - 1) * stride + k + output_pad.0;
        let full_w = (wy - 1) * stride + k + output_pad.1;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape("conv_transpose2d", "padding consumes the whole output"));
        }
        let geom = ConvGeom {
            channels: ws[1],
            height: full_h - 2 * pad,
            width: full_w - 2 * pad,
            kernel: k,
            stride,
            pad,
            out_h: hy,
            out_w: wy,
        };
        let out = kernels::conv_transpose2d(self.value(y).data(), n, self.value(w).data(), o, &geom);
        let rg = self.grad_flag(y) || self.grad_flag(w);
        Ok(self.push(
            Tensor::from_vec(&[n, geom.channels, geom.height, geom.width], out),
            Op::ConvTranspose2d { y, w, geom },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.check(x)?;
        let [n, c, h, w] = self.nchw(x, "max_pool2d")?;
        if kernel == 0 || stride == 0 || h < kernel || w < kernel {
            return Err(Error::shape("max_pool2d", format!("window {kernel}/{stride} on {h}×{w}")));
        }
        let (out, argmax, oh, ow) = kernels::max_pool(self.value(x).data(), n * c, h, w, kernel, stride);
        let rg = self.grad_flag(x);
        Ok(self.push(Tensor::from_vec(&[n, c, oh, ow], out), Op::MaxPool { x, argmax }, rg))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check(x)?;
        let [n, c, h, w] = self.nchw(x, "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let out = kernels::upsample_nearest(self.value(x).data(), n * c, h, w, factor);
        let rg = self.grad_flag(x);
        Ok(self.push(Tensor::from_vec(&[n, c, h * factor, w * factor], out), Op::Upsample { x, factor }, rg))
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = T::of_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() >= rate { keep } else { T::zero() })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_vec(v.shape(), data);
        let rg = self.grad_flag(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Batch normalization over dimension 1. With `running = None` batch
    /// statistics are used and `(mean, unbiased variance)` of the batch are returned
    /// alongside; otherwise the given running mean and variance are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let ch = self.value(gamma).numel();
        let (outer, _, inner) = broadcast_len(self.shape(x), ch)
            .ok_or_else(|| Error::shape("batch_norm", format!("{} features vs input {:?}", ch, self.shape(x))))?;
        if self.value(beta).numel() != ch {
            return Err(Error::shape("batch_norm", "gamma and beta lengths differ"));
        }
        let m = outer * inner;
        let xd = self.value(x).data();
        let mut stats = None;
        let (mean, inv_std): (Vec<T>, Vec<T>) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.iter().map(|&v| 1.0 / (v.as_f64() + eps).sqrt()).map(T::of_f64).collect()),
            None => {
                if m < 2 {
                    return Err(Error::shape("batch_norm", "batch statistics need at least two values per feature"));
                }
                let mut mean = vec![0.0f64; ch];
                let mut var = vec![0.0f64; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        mean[c] += xd[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        var[c] += xd[base..base + inner].iter().map(|v| (v.as_f64() - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                let biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
                let unbiased: Vec<T> = var.iter().map(|v| T::of_f64(v / (m - 1) as f64)).collect();
                stats = Some((mean.iter().map(|&v| T::of_f64(v)).collect(), unbiased));
                (
                    mean.into_iter().map(T::of_f64).collect(),
                    biased.into_iter().map(|v| T::of_f64(1.0 / (v + eps).sqrt())).collect(),
                )
            }
        };
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                    out[i] = xhat[i] * g[c] + b[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.grad_flag(x) || self.grad_flag(gamma) || self.grad_flag(beta);
        let v = self.push(
            Tensor::from_vec(&shape, out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: running.is_none() },
            rg,
        );
        Ok((v, stats))
    }

    /// Transposed batch normalization `x = (y - beta) · eps / gamma`, per feature.
    pub fn batch_norm_transpose(&mut self, y: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(y)?;
        self.check(gamma)?;
        self.check(beta)?;
        let ch = self.value(gamma).numel();
        let (outer, _, inner) = broadcast_len(self.shape(y), ch)
            .ok_or_else(|| Error::shape("batch_norm_transpose", format!("{} features vs input {:?}", ch, self.shape(y))))?;
        let g = self.value(gamma).data();
        if let Some(c) = g.iter().position(|v| *v == T::zero()) {
            return Err(Error::invalid(format!("batch-norm scale is zero at feature {c}; cannot invert")));
        }
        let b = self.value(beta).data();
        let e = T::of_f64(eps);
        let yd = self.value(y).data();
        let mut out = vec![T::zero(); yd.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    out[i] = (yd[i] - b[c]) * e / g[c];
                }
            }
        }
        let shape = self.shape(y).to_vec();
        let rg = self.grad_flag(y) || self.grad_flag(gamma) || self.grad_flag(beta);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::BatchNormTranspose { y, gamma, beta, eps: e }, rg))
    }

    /// Separable "valid" filtering of each `H×W` plane with the 1-D window applied on both axes.
    pub fn gauss_filter(&mut self, x: Var, window: &[T]) -> Result<Var> {
        self.check(x)?;
        let [n, c, h, w] = self.nchw(x, "gauss_filter")?;
        let k = window.len();
        if k == 0 || k > h || k > w {
            return Err(Error::shape("gauss_filter", format!("window {k} larger than {h}×{w}")));
        }
        let out = kernels::separable_filter(self.value(x).data(), n * c, h, w, window);
        let rg = self.grad_flag(x);
        Ok(self.push(
            Tensor::from_vec(&[n, c, h - k + 1, w - k + 1], out),
            Op::GaussFilter { x, window: window.to_vec() },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits: N×K` against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", format!("logits {s:?} vs {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut loss = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).as_f64();
            let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = T::of_f64((row[j].as_f64() - max).exp() / z);
            }
            loss += z.ln() + max - row[label].as_f64();
        }
        let rg = self.grad_flag(logits);
        Ok(self.push(
            Tensor::scalar(T::of_f64(loss / labels.len() as f64)),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.idx).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.backward_op(&node.op, &g) {
                if !self.nodes[input.idx].requires_grad {
                    continue;
                }
                match &mut grads[input.idx] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(id) if n.requires_grad => Some((id.clone(), i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads, params })
    }

    fn backward_op(&self, op: &Op<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.idx].value;
        let needs = |v: Var| self.nodes[v.idx].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor::from_vec(val(v).shape(), data);
        let gd = g.data();
        let mut res = Vec::new();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    res.push((*a, like(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect())));
                }
                if needs(*b) {
                    res.push((*b, like(*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect())));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    res.push((*a, like(*a, gd.iter().zip(vb).map(|(&g, &y)| g / y).collect())));
                }
                if needs(*b) {
                    let d = gd.iter().zip(va).zip(vb).map(|((&g, &x), &y)| -g * x / (y * y)).collect();
                    res.push((*b, like(*b, d)));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.map(|v| v * *c))),
            Op::AddScalar(x) => res.push((*x, g.clone())),
            Op::Square(x) => {
                let d = gd.iter().zip(val(*x).data()).map(|(&g, &v)| T::of_f64(2.0) * v * g).collect();
                res.push((*x, like(*x, d)));
            }
            Op::Sum(x) => res.push((*x, Tensor::full(val(*x).shape(), gd[0]))),
            Op::Mean(x) => {
                let n = T::of_f64(val(*x).numel() as f64);
                res.push((*x, Tensor::full(val(*x).shape(), gd[0] / n)));
            }
            Op::MeanRows(x) => {
                let v = val(*x);
                let rows = v.shape()[0];
                let row = v.numel() / rows;
                let scale = T::of_f64(1.0 / row as f64);
                let mut d = Vec::with_capacity(v.numel());
                for &gr in gd.iter().take(rows) {
                    d.extend(std::iter::repeat_n(gr * scale, row));
                }
                res.push((*x, like(*x, d)));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                // C = op(A)·op(B);  dop(A) = G·op(B)ᵀ,  dop(B) = op(A)ᵀ·G
                if needs(*a) {
                    let mut d = vec![T::zero(); m * k];
                    if *ta {
                        // dA (k×m) = op(B)·Gᵀ
                        T::gemm(k, n, m, val(*b).data(), *tb, gd, true, T::zero(), &mut d);
                    } else {
                        T::gemm(m, n, k, gd, false, val(*b).data(), !*tb, T::zero(), &mut d);
                    }
                    res.push((*a, like(*a, d)));
                }
                if needs(*b) {
                    let mut d = vec![T::zero(); k * n];
                    if *tb {
                        // dB (n×k) = Gᵀ·op(A)
                        T::gemm(n, m, k, gd, true, val(*a).data(), *ta, T::zero(), &mut d);
                    } else {
                        T::gemm(k, m, n, val(*a).data(), !*ta, gd, false, T::zero(), &mut d);
                    }
                    res.push((*b, like(*b, d)));
                }
            }
            Op::ChannelBias { x, b, negate } => {
                res.push((*x, g.clone()));
                if needs(*b) {
                    let ch = val(*b).numel();
                    let (outer, _, inner) = broadcast_len(g.shape(), ch).expect("checked in forward");
                    let mut d = vec![T::zero(); ch];
                    for o in 0..outer {
                        for (c, dc) in d.iter_mut().enumerate() {
                            let base = (o * ch + c) * inner;
                            let s: T = gd[base..base + inner].iter().copied().sum();
                            *dc += if *negate { -s } else { s };
                        }
                    }
                    res.push((*b, like(*b, d)));
                }
            }
            Op::SampleBias { x, b, negate } => {
                res.push((*x, g.clone()));
                if needs(*b) {
                    let row = val(*b).numel();
                    let mut d = vec![T::zero(); row];
                    for chunk in gd.chunks(row.max(1)) {
                        for (acc, &v) in d.iter_mut().zip(chunk) {
                            *acc += if *negate { -v } else { v };
                        }
                    }
                    res.push((*b, like(*b, d)));
                }
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                res.push((*x, like(*x, d)));
            }
            Op::Reshape(x) => res.push((*x, like(*x, gd.to_vec()))),
            Op::Conv2d { x, w, geom } => {
                let batch = val(*x).shape()[0];
                let out_ch = val(*w).shape()[0];
                let (dx, dw) = kernels::conv2d_backward(
                    val(*x).data(),
                    batch,
                    val(*w).data(),
                    out_ch,
                    geom,
                    gd,
                    needs(*x),
                    needs(*w),
                );
                if let Some(dx) = dx {
                    res.push((*x, like(*x, dx)));
                }
                if let Some(dw) = dw {
                    res.push((*w, like(*w, dw)));
                }
            }
            Op::ConvTranspose2d { y, w, geom } => {
                let batch = val(*y).shape()[0];
                let out_ch = val(*w).shape()[0];
                let (dy, dw) = kernels::conv_transpose2d_backward(
                    val(*y).data(),
                    batch,
                    val(*w).data(),
                    out_ch,
                    geom,
                    gd,
                    needs(*y),
                    needs(*w),
                );
                if let Some(dy) = dy {
                    res.push((*y, like(*y, dy)));
                }
                if let Some(dw) = dw {
                    res.push((*w, like(*w, dw)));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); val(*x).numel()];
                for (&i, &gv) in argmax.iter().zip(gd) {
                    d[i] += gv;
                }
                res.push((*x, like(*x, d)));
            }
            Op::Upsample { x, factor } => {
                let s = val(*x).shape();
                let d = kernels::upsample_nearest_backward(gd, s[0] * s[1], s[2], s[3], *factor);
                res.push((*x, like(*x, d)));
            }
            Op::Dropout { x, mask } => {
                res.push((*x, like(*x, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect())));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let ch = val(*gamma).numel();
                let (outer, _, inner) = broadcast_len(g.shape(), ch).expect("checked in forward");
                let m = T::of_f64((outer * inner) as f64);
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            dgamma[c] += gd[i] * xhat[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            for i in base..base + inner {
                                dx[i] = if *batch_stats {
                                    gam[c] * inv_std[c] / m * (m * gd[i] - dbeta[c] - xhat[i] * dgamma[c])
                                } else {
                                    gam[c] * inv_std[c] * gd[i]
                                };
                            }
                        }
                    }
                    res.push((*x, like(*x, dx)));
                }
                if needs(*gamma) {
                    res.push((*gamma, like(*gamma, dgamma)));
                }
                if needs(*beta) {
                    res.push((*beta, like(*beta, dbeta)));
                }
            }
            Op::BatchNormTranspose { y, gamma, beta, eps } => {
                let ch = val(*gamma).numel();
                let (outer, _, inner) = broadcast_len(g.shape(), ch).expect("checked in forward");
                let (gam, bet, yd) = (val(*gamma).data(), val(*beta).data(), val(*y).data());
                let mut dy = vec![T::zero(); gd.len()];
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        let f = *eps / gam[c];
                        for i in base..base + inner {
                            dy[i] = gd[i] * f;
                            dbeta[c] -= gd[i] * f;
                            dgamma[c] -= gd[i] * (yd[i] - bet[c]) * f / gam[c];
                        }
                    }
                }
                if needs(*y) {
                    res.push((*y, like(*y, dy)));
                }
                if needs(*gamma) {
                    res.push((*gamma, like(*gamma, dgamma)));
                }
                if needs(*beta) {
                    res.push((*beta, like(*beta, dbeta)));
                }
            }
            Op::GaussFilter { x, window } => {
                let s = val(*x).shape();
                let d = kernels::separable_filter_backward(gd, s[0] * s[1], s[2], s[3], window);
                res.push((*x, like(*x, d)));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = val(*logits).shape()[1];
                let scale = gd[0] / T::of_f64(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                res.push((*logits, like(*logits, d)));
            }
        }
        debug_assert!(res.iter().all(|(v, t)| t.shape() == val(*v).shape()), "gradient shape mismatch in {op:?}");
        res
    }
}

#[cfg(test)]
mod tests;
