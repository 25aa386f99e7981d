//! One random finite-difference instance per differentiable op, shared by the
//! unit tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::{gaussian_window, grad_check, GradCheckReport, Tape, Var};
use crate::error::Result;
use crate::metrics::{ssim_var, SsimParams};
use crate::tensor::Tensor;

pub type CaseFn = fn(&mut SplitMix64) -> Result<GradCheckReport>;

pub struct GradCase {
    pub op: &'static str,
    pub run: CaseFn,
}

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values bounded away from zero by at least `margin`.
fn rand_away_from_zero(rng: &mut SplitMix64, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(margin..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Distinct values at least 0.01 apart, so max-pool winners are stable under ±1e-3.
fn rand_distinct(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::from_vec(shape, vals)
}

fn check<F>(op: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check(op, inputs, tol)
}

fn pair(rng: &mut SplitMix64) -> [Tensor<f64>; 2] {
    [rand_tensor(rng, &[2, 3, 2], -1.0, 1.0), rand_tensor(rng, &[2, 3, 2], 0.5, 2.0)]
}

fn single(rng: &mut SplitMix64) -> [Tensor<f64>; 1] {
    [rand_tensor(rng, &[2, 3, 2], -1.0, 1.0)]
}

fn relu(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.relu(v[0]), &[rand_away_from_zero(rng, &[3, 5], 0.1)], 1e-4)
}

fn matmul(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let (ta, tb) = (rng.random::<bool>(), rng.random::<bool>());
    let a = rand_tensor(rng, &[4, 4], -1.0, 1.0);
    let b = rand_tensor(rng, &[4, 4], -1.0, 1.0);
    check(|t, v| t.matmul(v[0], v[1], ta, tb), &[a, b], 1e-4)
}

fn matmul_rect(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let a = rand_tensor(rng, &[3, 5], -1.0, 1.0);
    let b = rand_tensor(rng, &[2, 5], -1.0, 1.0);
    check(|t, v| t.matmul(v[0], v[1], false, true), &[a, b], 1e-4)
}

fn add(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.add(v[0], v[1]), &pair(rng), 1e-3)
}

fn sub(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.sub(v[0], v[1]), &pair(rng), 1e-3)
}

fn mul(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.mul(v[0], v[1]), &pair(rng), 1e-3)
}

fn div(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.div(v[0], v[1]), &pair(rng), 1e-3)
}

fn scale(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.scale(v[0], -1.7), &single(rng), 1e-3)
}

fn add_scalar(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.add_scalar(v[0], 0.3), &single(rng), 1e-3)
}

fn square(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.square(v[0]), &single(rng), 1e-3)
}

fn sum(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.sum(v[0]), &single(rng), 1e-3)
}

fn mean(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.mean(v[0]), &single(rng), 1e-3)
}

fn mean_rows(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.mean_rows(v[0]), &single(rng), 1e-3)
}

fn reshape(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.reshape(v[0], &[3, 4]), &single(rng), 1e-3)
}

fn channel_inputs(rng: &mut SplitMix64) -> [Tensor<f64>; 2] {
    [rand_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0), rand_tensor(rng, &[3], -1.0, 1.0)]
}

fn sample_inputs(rng: &mut SplitMix64) -> [Tensor<f64>; 2] {
    [rand_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0), rand_tensor(rng, &[3, 2, 2], -1.0, 1.0)]
}

fn add_channel(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.add_channel(v[0], v[1]), &channel_inputs(rng), 1e-3)
}

fn sub_channel(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.sub_channel(v[0], v[1]), &channel_inputs(rng), 1e-3)
}

fn add_sample(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.add_sample(v[0], v[1]), &sample_inputs(rng), 1e-3)
}

fn sub_sample(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.sub_sample(v[0], v[1]), &sample_inputs(rng), 1e-3)
}

fn stride_pad(rng: &mut SplitMix64) -> (usize, usize) {
    (1 + (rng.random::<u32>() % 2) as usize, (rng.random::<u32>() % 2) as usize)
}

fn conv2d(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let (stride, pad) = stride_pad(rng);
    let x = rand_tensor(rng, &[2, 2, 5, 5], -1.0, 1.0);
    let w = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
    check(|t, v| t.conv2d(v[0], v[1], stride, pad), &[x, w], 1e-3)
}

fn conv_transpose2d(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let (stride, pad) = stride_pad(rng);
    let y = rand_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0);
    let w = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let op = if stride == 2 { (1, 1) } else { (0, 0) };
    check(|t, v| t.conv_transpose2d(v[0], v[1], stride, pad, op), &[y, w], 1e-3)
}

fn max_pool2d(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.max_pool2d(v[0], 2, 2), &[rand_distinct(rng, &[2, 2, 4, 4])], 1e-3)
}

fn upsample_nearest(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.upsample_nearest(v[0], 2), &[rand_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0)], 1e-3)
}

fn dropout(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let x = rand_tensor(rng, &[4, 6], -1.0, 1.0);
    let seed = rng.random::<u64>();
    check(|t, v| t.dropout(v[0], 0.3, &mut SplitMix64::seed_from_u64(seed)), &[x], 1e-3)
}

fn bn_inputs(rng: &mut SplitMix64) -> [Tensor<f64>; 3] {
    [rand_tensor(rng, &[4, 3, 2, 2], -1.0, 1.0), rand_tensor(rng, &[3], 0.5, 1.5), rand_tensor(rng, &[3], -0.5, 0.5)]
}

fn batch_norm_train(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, None)?.0), &bn_inputs(rng), 1e-3)
}

fn batch_norm_eval(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let rm = [0.1, -0.2, 0.0];
    let rv = [1.2, 0.8, 0.5];
    check(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, Some((&rm, &rv)))?.0), &bn_inputs(rng), 1e-3)
}

fn batch_norm_features(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let x = rand_tensor(rng, &[5, 4], -1.0, 1.0);
    let g = rand_tensor(rng, &[4], 0.5, 1.5);
    let b = rand_tensor(rng, &[4], -0.5, 0.5);
    check(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, None)?.0), &[x, g, b], 1e-3)
}

fn batch_norm_transpose(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    check(|t, v| t.batch_norm_transpose(v[0], v[1], v[2], 1e-5), &bn_inputs(rng), 1e-3)
}

fn gauss_filter(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let window: Vec<f64> = gaussian_window(5, 1.5);
    check(|t, v| t.gauss_filter(v[0], &window), &[rand_tensor(rng, &[1, 2, 7, 6], 0.0, 1.0)], 1e-3)
}

fn cross_entropy(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let logits = rand_tensor(rng, &[4, 5], -3.0, 3.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    check(|t, v| t.softmax_cross_entropy(v[0], &labels), &[logits], 1e-3)
}

fn ssim(rng: &mut SplitMix64) -> Result<GradCheckReport> {
    let a = rand_tensor(rng, &[1, 1, 16, 16], 0.0, 1.0);
    let b = rand_tensor(rng, &[1, 1, 16, 16], 0.0, 1.0);
    let p = SsimParams::default();
    check(|t, v| ssim_var(t, v[0], v[1], &p), &[a, b], 1e-3)
}

/// Every differentiable op.
pub const GRAD_CASES: &[GradCase] = &[
    GradCase { op: "relu", run: relu },
    GradCase { op: "matmul", run: matmul },
    GradCase { op: "matmul_rect", run: matmul_rect },
    GradCase { op: "add", run: add },
    GradCase { op: "sub", run: sub },
    GradCase { op: "mul", run: mul },
    GradCase { op: "div", run: div },
    GradCase { op: "scale", run: scale },
    GradCase { op: "add_scalar", run: add_scalar },
    GradCase { op: "square", run: square },
    GradCase { op: "sum", run: sum },
    GradCase { op: "mean", run: mean },
    GradCase { op: "mean_rows", run: mean_rows },
    GradCase { op: "reshape", run: reshape },
    GradCase { op: "add_channel", run: add_channel },
    GradCase { op: "sub_channel", run: sub_channel },
    GradCase { op: "add_sample", run: add_sample },
    GradCase { op: "sub_sample", run: sub_sample },
    GradCase { op: "conv2d", run: conv2d },
    GradCase { op: "conv_transpose2d", run: conv_transpose2d },
    GradCase { op: "max_pool2d", run: max_pool2d },
    GradCase { op: "upsample_nearest", run: upsample_nearest },
    GradCase { op: "dropout", run: dropout },
    GradCase { op: "batch_norm/train", run: batch_norm_train },
    GradCase { op: "batch_norm/eval", run: batch_norm_eval },
    GradCase { op: "batch_norm/features", run: batch_norm_features },
    GradCase { op: "batch_norm_transpose", run: batch_norm_transpose },
    GradCase { op: "gauss_filter", run: gauss_filter },
    GradCase { op: "softmax_cross_entropy", run: cross_entropy },
    GradCase { op: "ssim", run: ssim },
];

/// Instance `seed` of `case`.
pub fn run_case(case: &GradCase, seed: u64) -> Result<GradCheckReport> {
    (case.run)(&mut SplitMix64::seed_from_u64(seed))
}
