use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamRole, ParameterStore};

pub const DEFAULT_BN_EPS: f64 = 1e-5;

fn default_eps() -> f64 {
    DEFAULT_BN_EPS
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    BatchNorm {
        features: usize,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    Flatten,
    /// `out = inner(x) + x`
    Residual {
        layers: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Residual { .. } => "residual",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize], ctx: &str) -> Result<Vec<usize>> {
        let bad = |detail: String| Err(Error::shape(format!("{ctx} ({})", self.name()), detail));
        match self {
            LayerSpec::Linear { in_features, out_features } => {
                if input != [*in_features] {
                    return bad(format!("expects [{in_features}], got {input:?}"));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, pad } => {
                let &[c, h, w] = input else {
                    return bad(format!("expects C×H×W, got {input:?}"));
                };
                if c != *in_ch {
                    return bad(format!("expects {in_ch} channels, got {c}"));
                }
                if *stride == 0 || *kernel == 0 || h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return bad(format!("kernel {kernel} stride {stride} pad {pad} does not fit {h}×{w}"));
                }
                Ok(vec![*out_ch, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1])
            }
            LayerSpec::BatchNorm { features, eps } => {
                if input.first() != Some(features) {
                    return bad(format!("expects {features} features, got {input:?}"));
                }
                if !(*eps > 0.0) {
                    return bad(format!("eps must be positive, got {eps}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let &[c, h, w] = input else {
                    return bad(format!("expects C×H×W, got {input:?}"));
                };
                if *kernel == 0 || *stride == 0 || h < *kernel || w < *kernel {
                    return bad(format!("window {kernel}/{stride} does not fit {h}×{w}"));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return bad(format!("rate {rate} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Residual { layers } => {
                if layers.is_empty() {
                    return bad("empty residual block".into());
                }
                let mut s = input.to_vec();
                for (j, l) in layers.iter().enumerate() {
                    s = l.output_shape(&s, &format!("{ctx}.{j}"))?;
                }
                if s != input {
                    return bad(format!("inner path maps {input:?} to {s:?}; skip needs equal shapes"));
                }
                Ok(s)
            }
        }
    }
}

/// A parameter a layer needs in the store.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub id: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub role: ParamRole,
}

pub fn weight_id(prefix: &str) -> String {
    format!("{prefix}.weight")
}
pub fn bias_id(prefix: &str) -> String {
    format!("{prefix}.bias")
}
pub fn gamma_id(prefix: &str) -> String {
    format!("{prefix}.gamma")
}
pub fn beta_id(prefix: &str) -> String {
    format!("{prefix}.beta")
}
pub fn running_mean_id(prefix: &str) -> String {
    format!("{prefix}.running_mean")
}
pub fn running_var_id(prefix: &str) -> String {
    format!("{prefix}.running_var")
}

/// Prefix of top-level layer `i`; nested layers append `.j`.
pub fn layer_prefix(i: usize) -> String {
    format!("l{i}")
}

fn collect_params(layers: &[LayerSpec], prefix: Option<&str>, out: &mut Vec<ParamDef>) {
    for (i, layer) in layers.iter().enumerate() {
        let p = match prefix {
            Some(pre) => format!("{pre}.{i}"),
            None => layer_prefix(i),
        };
        let def = |id: String, shape: Vec<usize>, fan_in: usize, role: ParamRole| ParamDef { id, shape, fan_in, role };
        match layer {
            LayerSpec::Linear { in_features, out_features } => {
                out.push(def(weight_id(&p), vec![*out_features, *in_features], *in_features, ParamRole::Weight));
                out.push(def(bias_id(&p), vec![*out_features], *in_features, ParamRole::Bias));
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => {
                let fan_in = in_ch * kernel * kernel;
                out.push(def(weight_id(&p), vec![*out_ch, *in_ch, *kernel, *kernel], fan_in, ParamRole::Weight));
                out.push(def(bias_id(&p), vec![*out_ch], fan_in, ParamRole::Bias));
            }
            LayerSpec::BatchNorm { features, .. } => {
                out.push(def(gamma_id(&p), vec![*features], 1, ParamRole::Scale));
                out.push(def(beta_id(&p), vec![*features], 1, ParamRole::Shift));
                out.push(def(running_mean_id(&p), vec![*features], 1, ParamRole::Buffer));
                out.push(def(running_var_id(&p), vec![*features], 1, ParamRole::Buffer));
            }
            LayerSpec::Residual { layers } => collect_params(layers, Some(&p), out),
            LayerSpec::MaxPool { .. } | LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Flatten => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape, `[C, H, W]` or `[features]`.
    pub input_shape: Vec<usize>,
    pub output_dim: usize,
}

impl ModelSpec {
    /// Per-sample shape entering each top-level layer, plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("model has no layers".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(shapes.last().unwrap(), &format!("layer {i}"))?;
            shapes.push(next);
        }
        let last = shapes.last().unwrap();
        if last != &[self.output_dim] {
            return Err(Error::InvalidSpec(format!(
                "final layer produces {last:?}, declared output_dim is {}",
                self.output_dim
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn param_defs(&self) -> Vec<ParamDef> {
        let mut out = Vec::new();
        collect_params(&self.layers, None, &mut out);
        out
    }

    /// Fresh store with every parameter initialized.
    pub fn init_store(&self, seed: u64) -> Result<ParameterStore> {
        self.validate()?;
        let mut store = ParameterStore::new(seed);
        for d in self.param_defs() {
            store.init(&d.id, &d.shape, d.fan_in, d.role);
            if d.id.ends_with(".running_var") {
                store.set(&d.id, crate::Tensor::full(&d.shape, 1.0))?;
            }
        }
        Ok(store)
    }

    /// Trainable scalar count implied by the spec.
    pub fn trainable_count(&self) -> usize {
        self.param_defs()
            .iter()
            .filter(|d| d.role.is_trainable())
            .map(|d| d.shape.iter().product::<usize>())
            .sum()
    }

    pub fn residual_blocks(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Residual { .. }))
            .map(|(i, _)| layer_prefix(i))
            .collect()
    }

    /// Two conv layers (each with ReLU and 2×2 max pooling) followed by
    /// fully connected layers of widths 512, 256 and `classes`.
    pub fn default_cnn(input: [usize; 3], classes: usize) -> ModelSpec {
        Self::cnn(input, classes, [16, 32], 5)
    }

    /// Two same-padded conv/ReLU/pool stages with `channels` outputs and a
    /// 512-256-`classes` fully connected head.
    pub fn cnn(input: [usize; 3], classes: usize, channels: [usize; 2], kernel: usize) -> ModelSpec {
        let [c, h, w] = input;
        let pad = kernel / 2;
        let flat = channels[1] * (h / 4) * (w / 4);
        ModelSpec {
            layers: vec![
                LayerSpec::Conv2d { in_ch: c, out_ch: channels[0], kernel, stride: 1, pad },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Conv2d { in_ch: channels[0], out_ch: channels[1], kernel, stride: 1, pad },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { in_features: flat, out_features: 512 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 512, out_features: 256 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 256, out_features: classes },
            ],
            input_shape: input.to_vec(),
            output_dim: classes,
        }
    }

    /// The default CNN with batch normalization after each convolution.
    pub fn cnn_bn(input: [usize; 3], classes: usize) -> ModelSpec {
        let mut spec = Self::default_cnn(input, classes);
        let convs: Vec<(usize, usize)> = spec
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                LayerSpec::Conv2d { out_ch, .. } => Some((i, *out_ch)),
                _ => None,
            })
            .collect();
        for &(i, features) in convs.iter().rev() {
            spec.layers.insert(i + 1, LayerSpec::BatchNorm { features, eps: DEFAULT_BN_EPS });
        }
        spec
    }

    /// Three hidden fully connected layers of width 1024.
    pub fn fc_only(input: [usize; 3], classes: usize) -> ModelSpec {
        let flat = input.iter().product();
        ModelSpec {
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Linear { in_features: flat, out_features: 1024 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 1024, out_features: 1024 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 1024, out_features: 1024 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 1024, out_features: classes },
            ],
            input_shape: input.to_vec(),
            output_dim: classes,
        }
    }

    /// A small network with one identity-skip residual block.
    pub fn tiny_residual(input: [usize; 3], classes: usize) -> ModelSpec {
        let [c, h, w] = input;
        let flat = 8 * (h / 4) * (w / 4);
        ModelSpec {
            layers: vec![
                LayerSpec::Conv2d { in_ch: c, out_ch: 8, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Residual {
                    layers: vec![
                        LayerSpec::Conv2d { in_ch: 8, out_ch: 8, kernel: 3, stride: 1, pad: 1 },
                        LayerSpec::Relu,
                        LayerSpec::Conv2d { in_ch: 8, out_ch: 8, kernel: 3, stride: 1, pad: 1 },
                    ],
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { in_features: flat, out_features: 128 },
                LayerSpec::Relu,
                LayerSpec::Linear { in_features: 128, out_features: classes },
            ],
            input_shape: input.to_vec(),
            output_dim: classes,
        }
    }

    pub fn preset(name: &str, input: [usize; 3], classes: usize) -> Result<ModelSpec> {
        match name {
            "default_cnn" => Ok(Self::default_cnn(input, classes)),
            "cnn_bn" => Ok(Self::cnn_bn(input, classes)),
            "fc_only" => Ok(Self::fc_only(input, classes)),
            "tiny_residual" => Ok(Self::tiny_residual(input, classes)),
            other => Err(Error::InvalidSpec(format!("unknown model preset `{other}`"))),
        }
    }
}
