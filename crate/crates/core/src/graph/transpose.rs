//! Weight-shared transposed graphs.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::exec::{annotate, check_bound, ExecutableGraph, Mode};
use super::spec::*;
use crate::autograd::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::params::{ParamRole, Parameter, ParameterStore};
use crate::tensor::Tensor;

pub const DEFAULT_ADDED_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransposedLayer {
    /// `x = (y - b) · w`
    Linear { weight: String, bias: String },
    /// Bias removed per channel, then the transposed convolution with the forward kernel.
    Conv { weight: String, bias: String, stride: usize, pad: usize, output_pad: (usize, usize) },
    /// `x = (y - beta) · eps / gamma`
    BatchNorm { gamma: String, beta: String, eps: f64 },
    Upsample { factor: usize },
    Relu,
    /// A dropout layer of the forward model, applied as-is.
    Dropout { rate: f64 },
    /// Dropout added after transposed conv/linear layers.
    AddedDropout { rate: f64 },
    /// Per-sample reshape undoing a flatten.
    Reshape { shape: Vec<usize> },
    /// Subtract the frozen skip branch, then run the transposed inner path.
    Residual { block: String, inner: Vec<TransposedLayer> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBranch {
    pub block_id: String,
    /// Per-sample activation at the block's merge point.
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct TransposedSpec {
    pub layers: Vec<TransposedLayer>,
    pub added_dropout_rate: f64,
    pub frozen_branches: BTreeMap<String, Tensor>,
}

impl TransposedSpec {
    /// Parameter ids referenced by the transposed layers.
    pub fn param_ids(&self) -> Vec<String> {
        fn walk(layers: &[TransposedLayer], out: &mut Vec<String>) {
            for l in layers {
                match l {
                    TransposedLayer::Linear { weight, bias } | TransposedLayer::Conv { weight, bias, .. } => {
                        out.push(weight.clone());
                        out.push(bias.clone());
                    }
                    TransposedLayer::BatchNorm { gamma, beta, .. } => {
                        out.push(gamma.clone());
                        out.push(beta.clone());
                    }
                    TransposedLayer::Residual { inner, .. } => walk(inner, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }
}

/// Transposed graph mapping key vectors `N×output_dim` to model-input-shaped images.
#[derive(Clone, Debug)]
pub struct TransposedGraph {
    spec: TransposedSpec,
    key_width: usize,
    output_shape: Vec<usize>,
}

struct Builder<'a> {
    rate: f64,
    frozen: &'a BTreeMap<String, Tensor>,
}

impl Builder<'_> {
    /// `shapes[i]` is the per-sample input of `layers[i]`, `shapes[len]` the output.
    fn transpose(&self, layers: &[LayerSpec], shapes: &[Vec<usize>], prefix: Option<&str>) -> Result<Vec<TransposedLayer>> {
        let mut out = Vec::new();
        for i in (0..layers.len()).rev() {
            let p = match prefix {
                Some(pre) => format!("{pre}.{i}"),
                None => layer_prefix(i),
            };
            let (inp, outp) = (&shapes[i], &shapes[i + 1]);
            match &layers[i] {
                LayerSpec::Linear { .. } => {
                    out.push(TransposedLayer::Linear { weight: weight_id(&p), bias: bias_id(&p) });
                    out.push(TransposedLayer::AddedDropout { rate: self.rate });
                }
                LayerSpec::Conv2d { kernel, stride, pad, .. } => {
                    let mut op = [0usize; 2];
                    for a in 0..2 {
                        let full = inp[a + 1] + 2 * pad;
                        let covered = (outp[a + 1] - 1) * stride + kernel;
                        if full < covered || full - covered >= *stride {
                            return Err(Error::shape(
                                format!("transposing {p} (conv2d)"),
                                format!("no output padding maps {outp:?} back to {inp:?}"),
                            ));
                        }
                        op[a] = full - covered;
                    }
                    out.push(TransposedLayer::Conv {
                        weight: weight_id(&p),
                        bias: bias_id(&p),
                        stride: *stride,
                        pad: *pad,
                        output_pad: (op[0], op[1]),
                    });
                    out.push(TransposedLayer::AddedDropout { rate: self.rate });
                }
                LayerSpec::BatchNorm { eps, .. } => {
                    out.push(TransposedLayer::BatchNorm { gamma: gamma_id(&p), beta: beta_id(&p), eps: *eps })
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    if kernel != stride || inp[1] != outp[1] * stride || inp[2] != outp[2] * stride {
                        return Err(Error::shape(
                            format!("transposing {p} (max_pool)"),
                            format!("nearest upsampling cannot map {outp:?} back to {inp:?}"),
                        ));
                    }
                    if *stride < 2 {
                        return Err(Error::Unsupported(format!("{p}: pooling with stride {stride}")));
                    }
                    out.push(TransposedLayer::Upsample { factor: *stride });
                }
                LayerSpec::Relu => out.push(TransposedLayer::Relu),
                LayerSpec::Dropout { rate } => out.push(TransposedLayer::Dropout { rate: *rate }),
                LayerSpec::Flatten => out.push(TransposedLayer::Reshape { shape: inp.clone() }),
                LayerSpec::Residual { layers: inner } => {
                    let b = self
                        .frozen
                        .get(&p)
                        .ok_or_else(|| Error::InvalidSpec(format!("residual block {p} has no frozen branch")))?;
                    if b.shape() != outp.as_slice() {
                        return Err(Error::shape(format!("frozen branch {p}"), format!("{:?} vs merge shape {outp:?}", b.shape())));
                    }
                    let mut inner_shapes = vec![inp.clone()];
                    for (j, l) in inner.iter().enumerate() {
                        let next = l.output_shape(inner_shapes.last().unwrap(), &format!("{p}.{j}"))?;
                        inner_shapes.push(next);
                    }
                    let inner_t = self.transpose(inner, &inner_shapes, Some(&p))?;
                    out.push(TransposedLayer::Residual { block: p.clone(), inner: inner_t });
                }
            }
        }
        Ok(out)
    }
}

/// Builds the transposed graph of `spec`. Residual blocks need frozen branches.
pub fn transpose_model(
    spec: &ModelSpec,
    store: &ParameterStore,
    added_dropout_rate: f64,
    frozen: &[FrozenBranch],
) -> Result<TransposedGraph> {
    if !(0.0..1.0).contains(&added_dropout_rate) {
        return Err(Error::invalid(format!("added dropout rate {added_dropout_rate} outside [0, 1)")));
    }
    let shapes = spec.shapes()?;
    check_bound(spec, store)?;
    let frozen: BTreeMap<String, Tensor> = frozen.iter().map(|f| (f.block_id.clone(), f.value.clone())).collect();
    let builder = Builder { rate: added_dropout_rate, frozen: &frozen };
    let mut layers = builder.transpose(&spec.layers, &shapes, None)?;
    // no dropout after the layer producing the output
    if matches!(layers.last(), Some(TransposedLayer::AddedDropout { .. })) {
        layers.pop();
    }
    Ok(TransposedGraph {
        spec: TransposedSpec { layers, added_dropout_rate, frozen_branches: frozen },
        key_width: spec.output_dim,
        output_shape: spec.input_shape.clone(),
    })
}

impl TransposedGraph {
    pub fn spec(&self) -> &TransposedSpec {
        &self.spec
    }

    pub fn key_width(&self) -> usize {
        self.key_width
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    /// Runs `keys: N×key_width` through the transposed layers.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, keys: Var, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        let s = tape.shape(keys);
        if s.len() != 2 || s[1] != self.key_width {
            return Err(Error::shape("transposed input", format!("expected N×{}, got {s:?}", self.key_width)));
        }
        let mut h = keys;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            h = self.apply(tape, store, layer, h, mode, rng).map_err(|e| annotate(e, &format!("transposed layer {i}")))?;
        }
        Ok(h)
    }

    /// Eval-mode extraction without keeping the tape.
    pub fn eval(&self, store: &ParameterStore, keys: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let k = tape.constant(keys.clone());
        let mut rng = <rand_xoshiro::SplitMix64 as rand::SeedableRng>::seed_from_u64(0);
        let y = self.forward(&mut tape, store, k, Mode::Eval, &mut rng)?;
        Ok(tape.value(y).clone())
    }

    fn apply(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        layer: &TransposedLayer,
        y: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        match layer {
            TransposedLayer::Linear { weight, bias } => {
                let w = store.read(tape, weight)?;
                let b = store.read(tape, bias)?;
                let d = tape.sub_channel(y, b)?;
                tape.matmul(d, w, false, false)
            }
            TransposedLayer::Conv { weight, bias, stride, pad, output_pad } => {
                let w = store.read(tape, weight)?;
                let b = store.read(tape, bias)?;
                let d = tape.sub_channel(y, b)?;
                tape.conv_transpose2d(d, w, *stride, *pad, *output_pad)
            }
            TransposedLayer::BatchNorm { gamma, beta, eps } => {
                let g = store.read(tape, gamma)?;
                let b = store.read(tape, beta)?;
                tape.batch_norm_transpose(y, g, b, *eps)
            }
            TransposedLayer::Upsample { factor } => tape.upsample_nearest(y, *factor),
            TransposedLayer::Relu => tape.relu(y),
            TransposedLayer::Dropout { rate } | TransposedLayer::AddedDropout { rate } => match mode {
                Mode::Train if *rate > 0.0 => tape.dropout(y, *rate, rng),
                _ => Ok(y),
            },
            TransposedLayer::Reshape { shape } => {
                let n = tape.shape(y)[0];
                let mut full = vec![n];
                full.extend_from_slice(shape);
                tape.reshape(y, &full)
            }
            TransposedLayer::Residual { block, inner } => {
                let b = tape.constant(self.spec.frozen_branches[block].clone());
                let mut h = tape.sub_sample(y, b)?;
                for l in inner {
                    h = self.apply(tape, store, l, h, mode, rng)?;
                }
                Ok(h)
            }
        }
    }
}

/// Trains the plain forward model for `warmup_epochs`, then records the mean
/// skip-branch activation of every top-level residual block over `data`.
pub fn capture_frozen_branches(
    graph: &ExecutableGraph,
    store: &mut ParameterStore,
    data: &Dataset,
    warmup_epochs: usize,
    opt: &mut OptimizerState,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<FrozenBranch>> {
    let blocks = graph.spec().residual_blocks();
    if blocks.is_empty() {
        return Err(Error::InvalidSpec("model has no residual blocks".into()));
    }
    if warmup_epochs == 0 {
        return Err(Error::invalid("warm-up needs at least one epoch"));
    }
    for _ in 0..warmup_epochs {
        crate::train::train_epoch(graph, store, opt, data, batch_size, rng)?;
    }
    let mut sums: Vec<Option<Vec<f64>>> = vec![None; blocks.len()];
    let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); blocks.len()];
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let x = data.images.select_rows(chunk);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut taps = Vec::new();
        graph.forward_tapped(&mut tape, store, xv, Mode::Eval, rng, Some(&mut taps))?;
        for (k, (_, v)) in taps.iter().enumerate() {
            let t = tape.value(*v);
            let per = t.numel() / t.shape()[0];
            shapes[k] = t.shape()[1..].to_vec();
            let acc = sums[k].get_or_insert_with(|| vec![0.0; per]);
            for row in 0..t.shape()[0] {
                for (a, &x) in acc.iter_mut().zip(t.row(row)) {
                    *a += x as f64;
                }
            }
        }
    }
    let n = data.len() as f64;
    Ok(blocks
        .into_iter()
        .zip(sums)
        .zip(shapes)
        .map(|((block_id, sum), shape)| FrozenBranch {
            block_id,
            value: Tensor::from_vec(&shape, sum.unwrap_or_default().into_iter().map(|s| (s / n) as f32).collect()),
        })
        .collect())
}

/// The original head kept aside while a replacement head is trained.
#[derive(Clone, Debug)]
pub struct ArchivedHead {
    pub spec: ModelSpec,
    pub params: Vec<Parameter>,
}

fn last_linear(spec: &ModelSpec) -> Result<(usize, usize)> {
    match spec.layers.last() {
        Some(LayerSpec::Linear { in_features, .. }) => Ok((spec.layers.len() - 1, *in_features)),
        Some(other) => Err(Error::Unsupported(format!("last layer is {}, expected linear", other.name()))),
        None => Err(Error::InvalidSpec("model has no layers".into())),
    }
}

/// Replaces the final linear layer with a freshly initialized one of width `new_output_dim`.
pub fn swap_last_layer(spec: &ModelSpec, store: &mut ParameterStore, new_output_dim: usize) -> Result<(ModelSpec, ArchivedHead)> {
    let (idx, in_features) = last_linear(spec)?;
    let p = layer_prefix(idx);
    let (wid, bid) = (weight_id(&p), bias_id(&p));
    let archived = vec![store.get(&wid)?.clone(), store.get(&bid)?.clone()];
    let mut new_spec = spec.clone();
    new_spec.layers[idx] = LayerSpec::Linear { in_features, out_features: new_output_dim };
    new_spec.output_dim = new_output_dim;
    store.init(&wid, &[new_output_dim, in_features], in_features, ParamRole::Weight);
    store.init(&bid, &[new_output_dim], in_features, ParamRole::Bias);
    Ok((new_spec, ArchivedHead { spec: spec.clone(), params: archived }))
}

/// Re-binds the archived head. Returns the original spec.
pub fn restore_last_layer(store: &mut ParameterStore, archived: &ArchivedHead) -> Result<ModelSpec> {
    for p in &archived.params {
        let mut p = p.clone();
        p.grad = None;
        store.restore(p);
    }
    check_bound(&archived.spec, store)?;
    Ok(archived.spec.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(layers: &[TransposedLayer]) -> Vec<&'static str> {
        layers
            .iter()
            .map(|l| match l {
                TransposedLayer::Linear { .. } => "linear_t",
                TransposedLayer::Conv { .. } => "conv_t",
                TransposedLayer::BatchNorm { .. } => "bn_t",
                TransposedLayer::Upsample { .. } => "upsample",
                TransposedLayer::Relu => "relu",
                TransposedLayer::Dropout { .. } => "dropout",
                TransposedLayer::AddedDropout { .. } => "added_dropout",
                TransposedLayer::Reshape { .. } => "reshape",
                TransposedLayer::Residual { .. } => "residual",
            })
            .collect()
    }

    #[test]
    fn mlp_rule_application() {
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Linear { in_features: 3, out_features: 4 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 4, out_features: 2 },
            ],
            input_shape: vec![3],
            output_dim: 2,
        };
        let store = spec.init_store(0).unwrap();
        let t = transpose_model(&spec, &store, 0.3, &[]).unwrap();
        assert_eq!(names(&t.spec().layers), ["linear_t", "added_dropout", "relu", "linear_t"]);
    }

    #[test]
    fn default_cnn_maps_keys_to_images() {
        let spec = ModelSpec::default_cnn([1, 28, 28], 10);
        let store = spec.init_store(0).unwrap();
        let t = transpose_model(&spec, &store, 0.3, &[]).unwrap();
        assert!(names(&t.spec().layers).contains(&"upsample"));
        let out = t.eval(&store, &Tensor::zeros(&[2, 10])).unwrap();
        assert_eq!(out.shape(), &[2, 1, 28, 28]);
    }

    #[test]
    fn no_transposed_only_parameters() {
        for name in ["default_cnn", "cnn_bn", "fc_only"] {
            let spec = ModelSpec::preset(name, [1, 28, 28], 10).unwrap();
            let store = spec.init_store(0).unwrap();
            let t = transpose_model(&spec, &store, 0.3, &[]).unwrap();
            for id in t.spec().param_ids() {
                assert!(store.contains(&id), "{id}");
            }
            assert_eq!(store.trainable_count(), spec.trainable_count());
        }
    }

    #[test]
    fn residual_needs_frozen_branch() {
        let spec = ModelSpec::tiny_residual([1, 8, 8], 4);
        let store = spec.init_store(0).unwrap();
        assert!(transpose_model(&spec, &store, 0.3, &[]).is_err());
        let fb = FrozenBranch { block_id: "l3".into(), value: Tensor::zeros(&[8, 4, 4]) };
        let t = transpose_model(&spec, &store, 0.3, &[fb]).unwrap();
        assert_eq!(t.eval(&store, &Tensor::zeros(&[1, 4])).unwrap().shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn swap_and_restore_head() {
        let spec = ModelSpec::default_cnn([1, 12, 12], 100);
        let mut store = spec.init_store(4).unwrap();
        let g = ExecutableGraph::build(&spec, &store).unwrap();
        let x = Tensor::full(&[2, 1, 12, 12], 0.3);
        let before = g.eval(&store, &x).unwrap();
        let (small, archived) = swap_last_layer(&spec, &mut store, 10).unwrap();
        let g2 = ExecutableGraph::build(&small, &store).unwrap();
        assert_eq!(g2.eval(&store, &x).unwrap().shape(), &[2, 10]);
        let orig = restore_last_layer(&mut store, &archived).unwrap();
        let g3 = ExecutableGraph::build(&orig, &store).unwrap();
        let after = g3.eval(&store, &x).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn swap_same_width_reinitializes() {
        let spec = ModelSpec::default_cnn([1, 12, 12], 10);
        let mut store = spec.init_store(4).unwrap();
        let w = store.tensor("l11.weight").unwrap().clone();
        swap_last_layer(&spec, &mut store, 10).unwrap();
        assert_ne!(store.tensor("l11.weight").unwrap().data(), w.data());
    }

    #[test]
    fn swap_requires_linear_head() {
        let spec = ModelSpec {
            layers: vec![LayerSpec::Linear { in_features: 3, out_features: 3 }, LayerSpec::Relu],
            input_shape: vec![3],
            output_dim: 3,
        };
        let mut store = spec.init_store(0).unwrap();
        assert!(matches!(swap_last_layer(&spec, &mut store, 2), Err(Error::Unsupported(_))));
    }
}
