use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::*;

const SEEDS: u64 = 100;

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

#[test]
fn linear_forward_matches_hand_multiply() {
    // y = x·wᵀ + b
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
    let w = tape.constant(Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]));
    let b = tape.constant(Tensor::from_vec(&[2], vec![1.0, 1.0]));
    let xw = tape.matmul(x, w, false, true).unwrap();
    let y = tape.add_channel(xw, b).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 6.0]);

    let eye = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let x = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]));
    let y = tape.matmul(x, eye, false, true).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn same_padding_conv_preserves_spatial_size() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 28, 28]));
    let w = tape.constant(Tensor::zeros(&[6, 1, 3, 3]));
    let y = tape.conv2d(x, w, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 6, 28, 28]);
}

#[test]
fn grad_of_weighted_sum_is_the_input() {
    let mut tape = Tape::<f32>::new();
    let x = Tensor::from_vec(&[1, 3], vec![0.5, -2.0, 3.0]);
    let w = tape.leaf(Tensor::from_vec(&[3, 1], vec![1.0, 1.0, 1.0]).with_requires_grad(true));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(xv, w, false, false).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.gradients(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), x.data());
}

#[test]
fn mse_gradient_has_analytic_form() {
    let y = Tensor::from_vec(&[4], vec![1.0f64, 2.0, -1.0, 0.5]);
    let t = Tensor::from_vec(&[4], vec![0.0f64, 2.5, 1.0, 0.5]);
    let mut tape = Tape::<f64>::new();
    let yv = tape.leaf(y.clone().with_requires_grad(true));
    let tv = tape.constant(t.clone());
    let d = tape.sub(yv, tv).unwrap();
    let sq = tape.square(d).unwrap();
    let loss = tape.mean(sq).unwrap();
    let g = tape.gradients(loss).unwrap();
    for i in 0..4 {
        let expected = 2.0 * (y.data()[i] - t.data()[i]) / 4.0;
        assert!((g.get(yv).unwrap().data()[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn loss_from_another_tape_is_rejected() {
    let mut a = Tape::<f32>::new();
    let mut b = Tape::<f32>::new();
    let x = a.leaf(Tensor::scalar(1.0).with_requires_grad(true));
    let _ = b.leaf(Tensor::scalar(1.0));
    assert!(matches!(b.gradients(x), Err(Error::NotOnTape)));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
    assert!(tape.gradients(x).is_err());
}

#[test]
fn gradients_accumulate_over_shared_inputs() {
    // loss = sum(x + x) -> grad 2
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).with_requires_grad(true));
    let y = tape.add(x, x).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.gradients(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn every_op_passes_grad_check_on_every_seed() {
    for case in cases::GRAD_CASES {
        for seed in 0..SEEDS {
            let r = cases::run_case(case, seed).unwrap();
            assert!(r.passed, "{} seed {seed}: {r:?}", case.op);
        }
    }
}

#[test]
fn transposed_conv_is_the_input_gradient_of_conv() {
    let mut rng = SplitMix64::seed_from_u64(7);
    for (side, stride, pad) in [(7, 1, 1), (7, 2, 1), (8, 2, 1), (8, 2, 0), (7, 1, 0)] {
        let op = (side + 2 * pad - 3) % stride;
        let out_pad = (op, op);
        let x = rand_tensor(&mut rng, &[2, 3, side, side], -1.0, 1.0).cast::<f32>();
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x.clone().with_requires_grad(true));
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        let upstream = rand_tensor(&mut rng, tape.shape(y), -1.0, 1.0).cast::<f32>();
        let u = tape.constant(upstream.clone());
        let p = tape.mul(y, u).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.gradients(loss).unwrap();
        let autograd_dx = grads.get(xv).unwrap().clone();

        let mut t2 = Tape::<f32>::new();
        let yv = t2.constant(upstream);
        let wv = t2.constant(w);
        let xt = t2.conv_transpose2d(yv, wv, stride, pad, out_pad).unwrap();
        assert_eq!(t2.shape(xt), x.shape());
        assert!(t2.value(xt).max_abs_diff(&autograd_dx) <= 1e-5);
    }
}

#[test]
fn one_by_one_transposed_conv_is_per_pixel_linear_map() {
    let w = Tensor::from_vec(&[2, 3, 1, 1], vec![1.0f32, 2.0, 3.0, -1.0, 0.5, 4.0]);
    let y = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0f32, 2.0, -1.0, 3.0]);
    let mut tape = Tape::<f32>::new();
    let yv = tape.constant(y);
    let wv = tape.constant(w);
    let x = tape.conv_transpose2d(yv, wv, 1, 0, (0, 0)).unwrap();
    // x[c, p] = sum_o y[o, p] * w[o, c]
    assert_eq!(
        tape.value(x).data(),
        &[1.0 + 1.0, 2.0 - 3.0, 2.0 - 0.5, 4.0 + 1.5, 3.0 - 4.0, 6.0 + 12.0]
    );
}

#[test]
fn eval_forward_is_deterministic() {
    let mut rng = SplitMix64::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 1, 6, 6], -1.0, 1.0).cast::<f32>();
    let w = rand_tensor(&mut rng, &[3, 1, 3, 3], -1.0, 1.0).cast::<f32>();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, 1, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.max_pool2d(y, 2, 2).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn grad_check_rejects_oversized_inputs() {
    let x = Tensor::<f64>::zeros(&[600]);
    assert!(grad_check(|t, v| t.sum(v[0]), &[x], 1e-3).is_err());
}
