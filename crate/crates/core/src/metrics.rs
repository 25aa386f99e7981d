//! SSIM, MSE, accuracy and bit error rate.

use crate::autograd::{gaussian_window, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::ExecutableGraph;
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, data_range: 1.0, k1: 0.01, k2: 0.03 }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Per-pixel SSIM map of `N×C×H×W` images. The window is clamped to the image size.
pub fn ssim_map<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, p: &SsimParams) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    let s = tape.shape(a).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("ssim", format!("expected N×C×H×W, got {s:?}")));
    }
    let size = p.window.min(s[2]).min(s[3]);
    let window: Vec<T> = gaussian_window(size, p.sigma).into_iter().map(T::of_f64).collect();
    let (c1, c2) = (T::of_f64(p.c1()), T::of_f64(p.c2()));
    let two = T::of_f64(2.0);

    let mu_a = tape.gauss_filter(a, &window)?;
    let mu_b = tape.gauss_filter(b, &window)?;
    let aa = tape.square(a)?;
    let bb = tape.square(b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.gauss_filter(aa, &window)?;
    let e_bb = tape.gauss_filter(bb, &window)?;
    let e_ab = tape.gauss_filter(ab, &window)?;
    let mu_a2 = tape.square(mu_a)?;
    let mu_b2 = tape.square(mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_a2)?;
    let var_b = tape.sub(e_bb, mu_b2)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let l_num = tape.scale(mu_ab, two)?;
    let l_num = tape.add_scalar(l_num, c1)?;
    let c_num = tape.scale(cov, two)?;
    let c_num = tape.add_scalar(c_num, c2)?;
    let num = tape.mul(l_num, c_num)?;
    let l_den = tape.add(mu_a2, mu_b2)?;
    let l_den = tape.add_scalar(l_den, c1)?;
    let c_den = tape.add(var_a, var_b)?;
    let c_den = tape.add_scalar(c_den, c2)?;
    let den = tape.mul(l_den, c_den)?;
    tape.div(num, den)
}

/// Mean SSIM over all images, channels and window positions; differentiable.
pub fn ssim_var<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, p: &SsimParams) -> Result<Var> {
    let m = ssim_map(tape, a, b, p)?;
    tape.mean(m)
}

fn as_batch(t: &Tensor) -> Result<Tensor<f64>> {
    let t = t.cast::<f64>();
    match t.rank() {
        2 => {
            let s = t.shape().to_vec();
            t.reshape(&[1, 1, s[0], s[1]])
        }
        3 => {
            let s = t.shape().to_vec();
            t.reshape(&[1, s[0], s[1], s[2]])
        }
        4 => Ok(t),
        _ => Err(Error::shape("ssim", format!("expected an image, got {:?}", t.shape()))),
    }
}

/// SSIM of each image pair in two batches (channel mean per image).
pub fn ssim_per_image(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Vec<f64>> {
    let (a, b) = (as_batch(a)?, as_batch(b)?);
    let mut tape = Tape::<f64>::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let m = ssim_map(&mut tape, va, vb, p)?;
    let map = tape.value(m);
    let n = map.shape()[0];
    Ok((0..n).map(|i| {
        let r = map.row(i);
        r.iter().sum::<f64>() / r.len() as f64
    }).collect())
}

/// SSIM of two images (or the mean over two batches), in `[-1, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    let v = ssim_per_image(a, b, p)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::invalid("mse of empty tensors"));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.numel() as f64)
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub const EVAL_BATCH: usize = 500;

/// Fraction of argmax-correct predictions in eval mode.
pub fn accuracy(graph: &ExecutableGraph, store: &ParameterStore, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let logits = graph.eval(store, &x)?;
        correct += labels.iter().enumerate().filter(|(i, &l)| argmax(logits.row(*i)) == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Hamming distance divided by length.
pub fn ber(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("ber", format!("{} vs {} bits", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("bit error rate of empty strings"));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    use super::*;
    use crate::autograd::grad_check;

    fn pattern(h: usize, w: usize) -> Tensor {
        let d = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                0.5 + 0.4 * ((x as f32 * 0.7).sin() * (y as f32 * 0.45).cos())
            })
            .collect();
        Tensor::from_vec(&[1, h, w], d)
    }

    fn noise(rng: &mut SplitMix64, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[1, h, w], (0..h * w).map(|_| rng.random::<f32>()).collect())
    }

    /// Direct scalar SSIM: explicit 2-D Gaussian weights over every valid window.
    fn reference_ssim(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w) = (a.shape()[1], a.shape()[2]);
        let k = 11.min(h).min(w);
        let g = gaussian_window(k, 1.5);
        let (c1, c2) = (1e-4, 9e-4);
        let (ad, bd) = (a.data(), b.data());
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = g[dy] * g[dx];
                        let (va, vb) = (ad[(y0 + dy) * w + x0 + dx] as f64, bd[(y0 + dy) * w + x0 + dx] as f64);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn identity_is_one() {
        let x = pattern(28, 28);
        assert!((ssim(&x, &x, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn inverted_checkerboard_is_minus_one() {
        let d: Vec<f32> = (0..28 * 28).map(|i| ((i / 28 + i % 28) % 2) as f32).collect();
        let x = Tensor::from_vec(&[1, 28, 28], d);
        let inv = x.map(|v| 1.0 - v);
        let s = ssim(&x, &inv, &SsimParams::default()).unwrap();
        assert!((s + 1.0).abs() < 0.01, "{s}");
    }

    #[test]
    fn structure_vs_noise_is_near_zero_and_matches_reference() {
        let x = pattern(28, 28);
        for seed in 0..50 {
            let n = noise(&mut SplitMix64::seed_from_u64(seed), 28, 28);
            let s = ssim(&x, &n, &SsimParams::default()).unwrap();
            assert!(s.abs() < 0.1, "seed {seed}: {s}");
            assert!((s - reference_ssim(&x, &n)).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_and_bounded() {
        let mut rng = SplitMix64::seed_from_u64(3);
        for _ in 0..30 {
            let a = noise(&mut rng, 16, 16);
            let b = noise(&mut rng, 16, 16).map(|v| v * 0.3);
            let p = SsimParams::default();
            let (ab, ba) = (ssim(&a, &b, &p).unwrap(), ssim(&b, &a, &p).unwrap());
            assert!((ab - ba).abs() < 1e-6);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn converges_to_one_as_noise_vanishes() {
        let x = pattern(28, 28);
        let mut rng = SplitMix64::seed_from_u64(1);
        let n = noise(&mut rng, 28, 28).map(|v| v - 0.5);
        let mut prev = -1.0;
        for scale in [0.5f32, 0.2, 0.1, 0.05, 0.01] {
            let y = Tensor::from_vec(x.shape(), x.data().iter().zip(n.data()).map(|(a, b)| a + scale * b).collect());
            let s = ssim(&x, &y, &SsimParams::default()).unwrap();
            assert!(s > prev, "{scale}: {s} <= {prev}");
            prev = s;
        }
        assert!(prev > 0.99);
    }

    #[test]
    fn ssim_gradient_passes_grad_check() {
        let mut rng = SplitMix64::seed_from_u64(11);
        let a = Tensor::<f64>::from_vec(&[1, 1, 16, 16], (0..256).map(|_| rng.random::<f64>()).collect());
        let b = Tensor::<f64>::from_vec(&[1, 1, 16, 16], (0..256).map(|_| rng.random::<f64>()).collect());
        let p = SsimParams::default();
        let report = grad_check(|t, v| ssim_var(t, v[0], v[1], &p), &[a, b], 1e-3).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(ssim(&Tensor::zeros(&[1, 8, 8]), &Tensor::zeros(&[1, 8, 9]), &SsimParams::default()).is_err());
        assert!(mse(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::from_vec(&[2], vec![0.0, 0.0]);
        let b = Tensor::from_vec(&[2], vec![2.0, 2.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 4.0);
        assert_eq!(mse(&b, &a).unwrap(), 4.0);
    }

    #[test]
    fn ber_examples() {
        let a = vec![0u8, 1, 1, 0];
        assert_eq!(ber(&a, &a).unwrap(), 0.0);
        let c: Vec<u8> = a.iter().map(|b| 1 - b).collect();
        assert_eq!(ber(&a, &c).unwrap(), 1.0);
        let mut x = vec![1u8; 36];
        let y = x.clone();
        x[5] = 0;
        assert!((ber(&x, &y).unwrap() - 1.0 / 36.0).abs() < 1e-12);
        assert!(ber(&a, &a[..3]).is_err());
    }
}
