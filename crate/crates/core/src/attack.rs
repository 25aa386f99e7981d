//! Third-party manipulations of a watermarked model.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{restore_last_layer, swap_last_layer, transpose_model, ExecutableGraph, ModelSpec, TransposedGraph};
use crate::metrics::accuracy;
use crate::optim::OptimizerState;
use crate::params::{ParamRole, ParameterStore};
use crate::tensor::Tensor;
use crate::train::train_epoch;
use crate::watermark::{self, extract, generate_keys, watermark_ssim, Watermark, WatermarkSecret, KEY_RANGE};

/// What an attack is measured against: the forward model's accuracy on
/// `eval` and the SSIM of the owner's watermark.
pub struct Probe<'a> {
    pub fwd: &'a ExecutableGraph,
    pub twd: &'a TransposedGraph,
    pub wm: &'a Watermark,
    pub eval: &'a Dataset,
}

impl Probe<'_> {
    pub fn measure(&self, store: &ParameterStore, at: usize, keep_images: bool) -> Result<TracePoint> {
        let per_key = watermark_ssim(self.twd, store, self.wm)?;
        let images = if keep_images {
            extract(self.twd, store, &self.wm.key_batch())?.into_iter().map(|t| t.map(|v| v.clamp(0.0, 1.0))).collect()
        } else {
            Vec::new()
        };
        Ok(TracePoint {
            at,
            accuracy: accuracy(self.fwd, store, self.eval)?,
            mean_ssim: watermark::mean(&per_key),
            per_key_ssim: per_key,
            images,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TracePoint {
    /// Epoch, optimizer step or pruning level in percent, depending on the attack.
    pub at: usize,
    pub accuracy: f64,
    pub mean_ssim: f64,
    pub per_key_ssim: Vec<f64>,
    /// Clamped extractions of the owner's keys, when recorded.
    #[serde(skip)]
    pub images: Vec<Tensor>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackTrace {
    pub attack: String,
    pub points: Vec<TracePoint>,
}

impl AttackTrace {
    fn new(attack: &str) -> Self {
        AttackTrace { attack: attack.to_string(), points: Vec::new() }
    }

    pub fn first(&self) -> &TracePoint {
        &self.points[0]
    }

    pub fn last(&self) -> &TracePoint {
        self.points.last().expect("traces start with a baseline point")
    }
}

/// Plain cross-entropy training with a fresh Adam at `base_lr · lr_factor`.
/// The trace has the baseline plus one point per epoch.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    store: &mut ParameterStore,
    probe: &Probe<'_>,
    data: &Dataset,
    base_lr: f64,
    lr_factor: f64,
    epochs: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<AttackTrace> {
    let mut opt = OptimizerState::adam(base_lr * lr_factor)?;
    let mut trace = AttackTrace::new("fine_tune");
    trace.points.push(probe.measure(store, 0, true)?);
    for epoch in 1..=epochs {
        train_epoch(probe.fwd, store, &mut opt, data, batch_size, rng)?;
        trace.points.push(probe.measure(store, epoch, true)?);
    }
    Ok(trace)
}

/// Zeroes exactly `floor(level · N)` of the `N` weights with the smallest
/// magnitude, ranked over all weight tensors together. Biases and batch-norm
/// parameters are left alone. Returns the number of entries zeroed.
pub fn prune(store: &mut ParameterStore, level: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::invalid(format!("pruning level {level} outside [0, 1)")));
    }
    let mut entries: Vec<(f32, usize, usize)> = Vec::new();
    for (pi, p) in store.iter().enumerate() {
        if p.role == ParamRole::Weight {
            entries.extend(p.tensor.data().iter().enumerate().map(|(i, v)| (v.abs(), pi, i)));
        }
    }
    let k = (level * entries.len() as f64).floor() as usize;
    if k == 0 {
        return Ok(0);
    }
    entries.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut doomed: Vec<(usize, usize)> = entries[..k].iter().map(|e| (e.1, e.2)).collect();
    doomed.sort_unstable();
    let mut it = doomed.into_iter().peekable();
    for (pi, p) in store.iter_mut().enumerate() {
        let d = p.tensor.data_mut();
        while let Some(&(q, i)) = it.peek() {
            if q != pi {
                break;
            }
            d[i] = 0.0;
            it.next();
        }
    }
    Ok(k)
}

/// Accuracy and SSIM after pruning copies of `store` at each level.
pub fn pruning_curve(store: &ParameterStore, probe: &Probe<'_>, levels: &[f64]) -> Result<AttackTrace> {
    let mut trace = AttackTrace::new("prune");
    for &level in levels {
        let mut s = store.clone();
        prune(&mut s, level)?;
        trace.points.push(probe.measure(&s, (level * 100.0).round() as usize, true)?);
    }
    Ok(trace)
}

/// Fine-tuning for `epochs`, then pruning at `level`. The last point is
/// measured after pruning.
#[allow(clippy::too_many_arguments)]
pub fn fine_prune(
    store: &mut ParameterStore,
    probe: &Probe<'_>,
    data: &Dataset,
    lr: f64,
    epochs: usize,
    level: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<AttackTrace> {
    let mut trace = fine_tune(store, probe, data, lr, 1.0, epochs, batch_size, rng)?;
    trace.attack = "fine_prune".into();
    prune(store, level)?;
    trace.points.push(probe.measure(store, epochs + 1, true)?);
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySource {
    /// The owner's keys (an adversary who knows them).
    Embedded,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecretSource {
    /// Uniform noise in `[0, 1]`.
    Noise,
    Black,
    /// What an unwatermarked model extracts for the adversarial key.
    UnwatermarkedExtraction,
}

/// Builds the adversary's watermark of `n_keys` pairs. `reference` is an
/// unwatermarked model, needed only for [`SecretSource::UnwatermarkedExtraction`].
pub fn adversary_watermark(
    owner: &Watermark,
    keys: KeySource,
    secrets: SecretSource,
    n_keys: usize,
    reference: Option<(&TransposedGraph, &ParameterStore)>,
    seed: u64,
) -> Result<Watermark> {
    let width = owner.pairs()[0].0.width();
    let dims = owner.pairs()[0].1.image().shape().to_vec();
    let keys = match keys {
        KeySource::Embedded => {
            if n_keys == 0 || n_keys > owner.len() {
                return Err(Error::invalid(format!("adversary wants {n_keys} of {} embedded keys", owner.len())));
            }
            owner.keys()[..n_keys].to_vec()
        }
        KeySource::Random => generate_keys(n_keys, width, KEY_RANGE.0, KEY_RANGE.1, seed)?,
    };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed_0f5e_c2e7);
    let images: Vec<Tensor> = match secrets {
        SecretSource::Noise => (0..n_keys)
            .map(|_| Tensor::from_vec(&dims, (0..dims.iter().product()).map(|_| rng.random::<f32>()).collect()))
            .collect(),
        SecretSource::Black => (0..n_keys).map(|_| Tensor::zeros(&dims)).collect(),
        SecretSource::UnwatermarkedExtraction => {
            let (twd, store) = reference.ok_or_else(|| Error::invalid("unwatermarked extraction needs a reference model"))?;
            extract(twd, store, &watermark::keys_tensor(&keys)?)?
                .into_iter()
                .map(|t| t.map(|v| v.clamp(0.0, 1.0)))
                .collect()
        }
    };
    let secrets = images.into_iter().map(WatermarkSecret::new).collect::<Result<Vec<_>>>()?;
    let mut wm = Watermark::from_parts(keys, secrets)?;
    wm.weights = owner.weights;
    Ok(wm)
}

/// Budget and sampling of an adversarial hardening run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryBudget {
    pub steps: usize,
    /// Steps after which a full point (accuracy, SSIM, images) is recorded.
    pub checkpoints: Vec<usize>,
    /// Stop as soon as the owner's mean SSIM drops below this value.
    pub stop_below: Option<f64>,
}

impl AdversaryBudget {
    /// Every step for the first 25 steps, no early stop.
    pub fn new(steps: usize) -> Self {
        AdversaryBudget { steps, checkpoints: (1..=steps.min(25)).collect(), stop_below: None }
    }
}

/// Transposed-only training on an adversarial watermark. Points are taken
/// before the first step, at every checkpoint and after the last step.
fn adversarial_hardening(
    name: &str,
    store: &mut ParameterStore,
    probe: &Probe<'_>,
    adversary: &Watermark,
    opt: &mut OptimizerState,
    budget: &AdversaryBudget,
    rng: &mut impl Rng,
) -> Result<AttackTrace> {
    let mut trace = AttackTrace::new(name);
    trace.points.push(probe.measure(store, 0, true)?);
    for step in 1..=budget.steps {
        watermark::watermark_step(store, probe.twd, adversary, opt, rng)?;
        let stop = match budget.stop_below {
            Some(t) => watermark::mean(&watermark_ssim(probe.twd, store, probe.wm)?) < t,
            None => false,
        };
        if stop || budget.checkpoints.contains(&step) || step == budget.steps {
            trace.points.push(probe.measure(store, step, true)?);
        }
        if stop {
            break;
        }
    }
    Ok(trace)
}

/// Erasure: hardening on the adversary's pairs hoping to wipe the owner's.
pub fn erase_watermark(
    store: &mut ParameterStore,
    probe: &Probe<'_>,
    adversary: &Watermark,
    opt: &mut OptimizerState,
    budget: &AdversaryBudget,
    rng: &mut impl Rng,
) -> Result<AttackTrace> {
    adversarial_hardening("erase", store, probe, adversary, opt, budget, rng)
}

/// Overwriting: embedding a second watermark. The trace follows the original one.
pub fn overwrite_watermark(
    store: &mut ParameterStore,
    probe: &Probe<'_>,
    new_wm: &Watermark,
    opt: &mut OptimizerState,
    budget: &AdversaryBudget,
    rng: &mut impl Rng,
) -> Result<AttackTrace> {
    adversarial_hardening("overwrite", store, probe, new_wm, opt, budget, rng)
}

#[derive(Clone, Debug, Serialize)]
pub struct CrossDatasetOutcome {
    /// Accuracy on the new task and the owner's SSIM (head restored) per epoch.
    pub trace: AttackTrace,
    /// Owner SSIM with the new head left in place, when its width matches the keys.
    pub ssim_without_restore: Option<f64>,
}

/// Replaces the head for `new_data`, fine-tunes, and measures the owner's
/// watermark with the original head put back. The store ends with the
/// original head restored.
#[allow(clippy::too_many_arguments)]
pub fn cross_dataset_finetune(
    store: &mut ParameterStore,
    spec: &ModelSpec,
    twd: &TransposedGraph,
    wm: &Watermark,
    new_data: &Dataset,
    new_eval: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<CrossDatasetOutcome> {
    if new_data.sample_shape() != spec.input_shape.as_slice() {
        return Err(Error::shape(
            "cross-dataset fine-tuning",
            format!("model input {:?}, new data {:?}", spec.input_shape, new_data.sample_shape()),
        ));
    }
    let (new_spec, archived) = swap_last_layer(spec, store, new_data.classes)?;
    let fwd = ExecutableGraph::build(&new_spec, store)?;
    let restored_ssim = |s: &ParameterStore| -> Result<f64> {
        let mut tmp = s.clone();
        restore_last_layer(&mut tmp, &archived)?;
        Ok(watermark::mean(&watermark_ssim(twd, &tmp, wm)?))
    };
    let mut opt = OptimizerState::adam(lr)?;
    let mut trace = AttackTrace::new("cross_dataset");
    let point = |s: &ParameterStore, at: usize| -> Result<TracePoint> {
        Ok(TracePoint {
            at,
            accuracy: accuracy(&fwd, s, new_eval)?,
            mean_ssim: restored_ssim(s)?,
            per_key_ssim: Vec::new(),
            images: Vec::new(),
        })
    };
    trace.points.push(point(store, 0)?);
    for epoch in 1..=epochs {
        train_epoch(&fwd, store, &mut opt, new_data, batch_size, rng)?;
        trace.points.push(point(store, epoch)?);
    }
    let ssim_without_restore = if new_data.classes == wm.pairs()[0].0.width() {
        let t = transpose_model(&new_spec, store, twd.spec().added_dropout_rate, &[])?;
        Some(watermark::mean(&watermark_ssim(&t, store, wm)?))
    } else {
        None
    };
    restore_last_layer(store, &archived)?;
    Ok(CrossDatasetOutcome { trace, ssim_without_restore })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModelSpec;

    #[test]
    fn prune_level_zero_is_identity() {
        let spec = ModelSpec::default_cnn([1, 16, 16], 10);
        let mut s = spec.init_store(0).unwrap();
        let orig = s.clone();
        assert_eq!(prune(&mut s, 0.0).unwrap(), 0);
        assert!(s.same_values(&orig));
    }

    #[test]
    fn prune_half_zeroes_smallest_weights_only() {
        let spec = ModelSpec::default_cnn([1, 16, 16], 10);
        let mut s = spec.init_store(1).unwrap();
        for p in s.iter_mut().filter(|p| p.role == ParamRole::Bias) {
            p.tensor = p.tensor.map(|_| 1e-6);
        }
        let orig = s.clone();
        let n: usize = s.iter().filter(|p| p.role == ParamRole::Weight).map(|p| p.tensor.numel()).sum();
        let k = prune(&mut s, 0.5).unwrap();
        assert_eq!(k, n / 2);
        let mut zeroed = Vec::new();
        let mut kept = Vec::new();
        for (p, o) in s.iter().zip(orig.iter()) {
            if p.role != ParamRole::Weight {
                assert_eq!(p.tensor.data(), o.tensor.data());
                continue;
            }
            for (&v, &w) in p.tensor.data().iter().zip(o.tensor.data()) {
                if v == 0.0 { zeroed.push(w.abs()) } else { kept.push(w.abs()) }
            }
        }
        assert_eq!(zeroed.len(), n / 2);
        let max_zeroed = zeroed.iter().cloned().fold(0.0f32, f32::max);
        let min_kept = kept.iter().cloned().fold(f32::INFINITY, f32::min);
        assert!(max_zeroed <= min_kept);
    }

    #[test]
    fn prune_rejects_bad_levels() {
        let mut s = ModelSpec::default_cnn([1, 16, 16], 10).init_store(0).unwrap();
        assert!(prune(&mut s, 1.0).is_err());
        assert!(prune(&mut s, -0.1).is_err());
    }
}
