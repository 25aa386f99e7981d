use rand::Rng;

use super::spec::*;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Batch-norm running statistics momentum.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch-norm uses batch statistics.
    Train,
    /// Deterministic: dropout off, batch-norm uses running statistics.
    Eval,
}

/// Checks that every parameter a spec needs is bound with the right shape.
pub(crate) fn check_bound(spec: &ModelSpec, store: &ParameterStore) -> Result<()> {
    for d in spec.param_defs() {
        let t = store.tensor(&d.id)?;
        if t.shape() != d.shape.as_slice() {
            return Err(Error::shape(format!("parameter {}", d.id), format!("store has {:?}, layer needs {:?}", t.shape(), d.shape)));
        }
    }
    Ok(())
}

/// A forward graph bound to a spec. Parameter values are read from the
/// store at every evaluation, so it always reflects the latest updates.
#[derive(Clone, Debug)]
pub struct ExecutableGraph {
    spec: ModelSpec,
    shapes: Vec<Vec<usize>>,
}

impl ExecutableGraph {
    pub fn build(spec: &ModelSpec, store: &ParameterStore) -> Result<Self> {
        let shapes = spec.shapes()?;
        check_bound(spec, store)?;
        Ok(ExecutableGraph { spec: spec.clone(), shapes })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Per-sample shape entering each top-level layer, plus the output shape.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        self.forward_tapped(tape, store, x, mode, rng, None)
    }

    /// Like [`forward`](Self::forward), additionally reporting the skip-branch
    /// input of every top-level residual block as `(block id, value)`.
    pub fn forward_tapped(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        mode: Mode,
        rng: &mut impl Rng,
        mut taps: Option<&mut Vec<(String, Var)>>,
    ) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            return Err(Error::shape(
                "forward input",
                format!("expected N×{:?}, got {s:?}", self.spec.input_shape),
            ));
        }
        let mut h = x;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let prefix = layer_prefix(i);
            if let (LayerSpec::Residual { .. }, Some(t)) = (layer, taps.as_deref_mut()) {
                t.push((prefix.clone(), h));
            }
            h = apply_layer(tape, store, layer, &prefix, h, mode, rng)
                .map_err(|e| annotate(e, &format!("layer {i} ({})", layer.name())))?;
        }
        Ok(h)
    }

    /// Eval-mode forward pass on a batch, without keeping the tape.
    pub fn eval(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        // eval mode draws no random numbers
        let mut rng = <rand_xoshiro::SplitMix64 as rand::SeedableRng>::seed_from_u64(0);
        let y = self.forward(&mut tape, store, xv, Mode::Eval, &mut rng)?;
        Ok(tape.value(y).clone())
    }
}

pub(crate) fn annotate(e: Error, ctx: &str) -> Error {
    match e {
        Error::Shape { context, detail } => Error::Shape { context: format!("{ctx}: {context}"), detail },
        other => other,
    }
}

fn apply_layer(
    tape: &mut Tape,
    store: &ParameterStore,
    layer: &LayerSpec,
    prefix: &str,
    x: Var,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    match layer {
        LayerSpec::Linear { .. } => {
            let w = store.read(tape, &weight_id(prefix))?;
            let b = store.read(tape, &bias_id(prefix))?;
            let xw = tape.matmul(x, w, false, true)?;
            tape.add_channel(xw, b)
        }
        LayerSpec::Conv2d { stride, pad, .. } => {
            let w = store.read(tape, &weight_id(prefix))?;
            let b = store.read(tape, &bias_id(prefix))?;
            let y = tape.conv2d(x, w, *stride, *pad)?;
            tape.add_channel(y, b)
        }
        LayerSpec::BatchNorm { eps, .. } => {
            let g = store.read(tape, &gamma_id(prefix))?;
            let b = store.read(tape, &beta_id(prefix))?;
            let rm_id = running_mean_id(prefix);
            let rv_id = running_var_id(prefix);
            match mode {
                Mode::Train => {
                    let (y, stats) = tape.batch_norm(x, g, b, *eps, None)?;
                    let (mean, var) = stats.expect("batch statistics");
                    let blend = |old: &Tensor, new: &[f32]| {
                        let data = old
                            .data()
                            .iter()
                            .zip(new)
                            .map(|(&o, &n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                            .collect();
                        Tensor::from_vec(old.shape(), data)
                    };
                    let rm = blend(store.tensor(&rm_id)?, &mean);
                    let rv = blend(store.tensor(&rv_id)?, &var);
                    tape.record_buffer_update(rm_id, rm);
                    tape.record_buffer_update(rv_id, rv);
                    Ok(y)
                }
                Mode::Eval => {
                    let rm = store.tensor(&rm_id)?.data().to_vec();
                    let rv = store.tensor(&rv_id)?.data().to_vec();
                    Ok(tape.batch_norm(x, g, b, *eps, Some((&rm, &rv)))?.0)
                }
            }
        }
        LayerSpec::MaxPool { kernel, stride } => tape.max_pool2d(x, *kernel, *stride),
        LayerSpec::Relu => tape.relu(x),
        LayerSpec::Dropout { rate } => match mode {
            Mode::Train => tape.dropout(x, *rate, rng),
            Mode::Eval => Ok(x),
        },
        LayerSpec::Flatten => {
            let s = tape.shape(x);
            let n = s[0];
            let rest = s[1..].iter().product();
            tape.reshape(x, &[n, rest])
        }
        LayerSpec::Residual { layers } => {
            let mut h = x;
            for (j, l) in layers.iter().enumerate() {
                h = apply_layer(tape, store, l, &format!("{prefix}.{j}"), h, mode, rng)?;
            }
            tape.add(h, x)
        }
    }
}
