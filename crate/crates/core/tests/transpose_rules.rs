use inkwm::graph::{bias_id, layer_prefix, transpose_model, weight_id, FrozenBranch, LayerSpec, ModelSpec};
use inkwm::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

fn linear_spec(n: usize) -> ModelSpec {
    ModelSpec { layers: vec![LayerSpec::Linear { in_features: n, out_features: n }], input_shape: vec![n], output_dim: n }
}

/// Gram-Schmidt on random rows, in f64.
fn random_orthonormal(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-3 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows.concat()
}

#[test]
fn identity_linear_returns_the_key() {
    let spec = linear_spec(3);
    let mut store = spec.init_store(0).unwrap();
    let p = layer_prefix(0);
    store.set(&weight_id(&p), Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap();
    store.set(&bias_id(&p), Tensor::zeros(&[3])).unwrap();
    let twd = transpose_model(&spec, &store, 0.0, &[]).unwrap();
    let y = Tensor::from_vec(&[1, 3], vec![0.5, -2.0, 7.0]);
    assert_eq!(twd.eval(&store, &y).unwrap().data(), y.data());
}

#[test]
fn hand_computed_linear_transpose() {
    let spec = linear_spec(2);
    let mut store = spec.init_store(0).unwrap();
    let p = layer_prefix(0);
    store.set(&weight_id(&p), Tensor::from_vec(&[2, 2], vec![3., 4., 5., 6.])).unwrap();
    store.set(&bias_id(&p), Tensor::from_vec(&[2], vec![1., 1.])).unwrap();
    let twd = transpose_model(&spec, &store, 0.0, &[]).unwrap();
    let x = twd.eval(&store, &Tensor::from_vec(&[1, 2], vec![4., 6.])).unwrap();
    assert_eq!(x.data(), &[34., 42.]);
}

#[test]
fn orthonormal_linear_is_inverted() {
    let mut rng = SplitMix64::seed_from_u64(11);
    for n in [2, 5, 10, 16] {
        let spec = linear_spec(n);
        let mut store = spec.init_store(n as u64).unwrap();
        let p = layer_prefix(0);
        let w: Vec<f32> = random_orthonormal(n, &mut rng).into_iter().map(|v| v as f32).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.set(&weight_id(&p), Tensor::from_vec(&[n, n], w)).unwrap();
        store.set(&bias_id(&p), Tensor::from_vec(&[n], b)).unwrap();
        let fwd = inkwm::graph::ExecutableGraph::build(&spec, &store).unwrap();
        let twd = transpose_model(&spec, &store, 0.0, &[]).unwrap();
        let x = Tensor::from_vec(&[3, n], (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let back = twd.eval(&store, &fwd.eval(&store, &x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-5, "n = {n}: {}", back.max_abs_diff(&x));
    }
}

fn bn_t(y: &[f32], gamma: &[f32], beta: &[f32], eps: f64) -> inkwm::Result<Vec<f32>> {
    let mut t = Tape::new();
    let n = gamma.len();
    let yv = t.constant(Tensor::from_vec(&[y.len() / n, n], y.to_vec()));
    let g = t.constant(Tensor::from_vec(&[n], gamma.to_vec()));
    let b = t.constant(Tensor::from_vec(&[n], beta.to_vec()));
    let x = t.batch_norm_transpose(yv, g, b, eps)?;
    Ok(t.value(x).data().to_vec())
}

#[test]
fn batch_norm_transpose_examples() {
    let y = [0.5f32, -2.0, 3.0, 8.0];
    let x = bn_t(&y, &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
    for (a, b) in x.iter().zip(y) {
        assert!((a - b * 1e-5).abs() <= 1e-12);
    }
    assert_eq!(bn_t(&[2.0, 2.0, 2.0, 2.0], &[0.7, 1.3], &[2.0, 2.0], 1e-5).unwrap(), vec![0.0; 4]);
    let eps = 1e-5f32;
    let x = bn_t(&y, &[eps, eps], &[0.0, 0.0], eps as f64).unwrap();
    for (a, b) in x.iter().zip(y) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
    assert!(bn_t(&y, &[1.0, 0.0], &[0.0, 0.0], 1e-5).is_err());
}

#[test]
fn nearest_upsampling_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]));
    let u = t.upsample_nearest(x, 2).unwrap();
    #[rustfmt::skip]
    let want = [
        1., 1., 2., 2.,
        1., 1., 2., 2.,
        3., 3., 4., 4.,
        3., 3., 4., 4.,
    ];
    assert_eq!(t.shape(u), &[1, 1, 4, 4]);
    assert_eq!(t.value(u).data(), &want);

    let c = t.constant(Tensor::full(&[1, 2, 6, 6], 0.25));
    let down = t.max_pool2d(c, 2, 2).unwrap();
    let up = t.upsample_nearest(down, 2).unwrap();
    assert_eq!(t.value(up).data(), t.value(c).data());
}

#[test]
fn residual_toy_block_subtracts_the_frozen_branch() {
    // out = inner(x) + x with inner a 2-unit linear layer
    let spec = ModelSpec {
        layers: vec![LayerSpec::Residual { layers: vec![LayerSpec::Linear { in_features: 2, out_features: 2 }] }],
        input_shape: vec![2],
        output_dim: 2,
    };
    let mut store = spec.init_store(0).unwrap();
    let block = layer_prefix(0);
    let inner = spec.param_defs().into_iter().find(|d| d.id.ends_with("weight")).unwrap().id;
    let inner_bias = inner.replace("weight", "bias");
    store.set(&inner, Tensor::from_vec(&[2, 2], vec![1., 2., 0., 1.])).unwrap();
    store.set(&inner_bias, Tensor::from_vec(&[2], vec![1., 0.])).unwrap();
    let frozen = FrozenBranch { block_id: block, value: Tensor::from_vec(&[2], vec![0.5, -1.0]) };
    let twd = transpose_model(&spec, &store, 0.0, &[frozen]).unwrap();
    // c - b = [2.5, 2]; minus bias = [1.5, 2]; · w = [1.5, 1.5·2 + 2] = [1.5, 5]
    let x = twd.eval(&store, &Tensor::from_vec(&[1, 2], vec![3.0, 1.0])).unwrap();
    assert_eq!(x.data(), &[1.5, 5.0]);
}

#[test]
fn transposed_shapes_follow_the_forward_input() {
    for name in ["default_cnn", "cnn_bn", "fc_only"] {
        let spec = ModelSpec::preset(name, [1, 28, 28], 10).unwrap();
        let store = spec.init_store(0).unwrap();
        let twd = transpose_model(&spec, &store, 0.3, &[]).unwrap();
        let out = twd.eval(&store, &Tensor::zeros(&[2, 10])).unwrap();
        assert_eq!(out.shape(), &[2, 1, 28, 28], "{name}");
    }
    let spec = ModelSpec::default_cnn([3, 32, 32], 10);
    let store = spec.init_store(0).unwrap();
    let twd = transpose_model(&spec, &store, 0.3, &[]).unwrap();
    assert_eq!(twd.eval(&store, &Tensor::zeros(&[1, 10])).unwrap().shape(), &[1, 3, 32, 32]);
}

fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn conv_transpose_is_the_conv_input_gradient() {
    let mut rng = SplitMix64::seed_from_u64(5);
    // (c_in, c_out, size, k, stride, pad)
    for (ci, co, hw, k, s, p) in [(1, 4, 8, 3, 1, 1), (2, 3, 7, 5, 1, 2), (3, 2, 9, 3, 2, 1), (2, 2, 10, 4, 2, 0), (1, 1, 6, 1, 1, 0)] {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(random_tensor(&[2, ci, hw, hw], &mut rng).with_requires_grad(true));
        let w = t.constant(random_tensor(&[co, ci, k, k], &mut rng));
        let y = t.conv2d(x, w, s, p).unwrap();
        let g = t.constant(random_tensor(t.shape(y), &mut rng));
        let prod = t.mul(y, g).unwrap();
        let loss = t.sum(prod).unwrap();
        let grads = t.gradients(loss).unwrap();
        let dx = grads.get(x).unwrap().clone();

        let op = (hw + 2 * p - k) % s;
        let back = t.conv_transpose2d(g, w, s, p, (op, op)).unwrap();
        assert_eq!(t.shape(back), dx.shape());
        let diff = t.value(back).max_abs_diff(&dx);
        assert!(diff <= 1e-5, "{ci}->{co} k{k} s{s} p{p}: {diff}");
    }
}
