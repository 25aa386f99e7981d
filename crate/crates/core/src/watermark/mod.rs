//! Key/secret pairs, hardening, constraint training, extraction and verification.

pub mod font;
pub mod keys;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::data::{netpbm, Dataset};
use crate::error::{Error, Result};
use crate::graph::{ExecutableGraph, Mode, TransposedGraph};
use crate::metrics::{accuracy, ssim_per_image, ssim_var, SsimParams};
use crate::optim::OptimizerState;
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::train::{ce_step, shuffled_batches};

pub use font::{render_text, DEFAULT_TEXTS};
pub use keys::{format_keys, generate_keys, keys_tensor, load_keys, parse_keys, save_keys, WatermarkKey, KEY_RANGE};

/// An input-shaped `C×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkSecret {
    image: Tensor,
}

impl WatermarkSecret {
    pub fn new(image: Tensor) -> Result<Self> {
        if image.rank() != 3 {
            return Err(Error::shape("watermark secret", format!("expected C×H×W, got {:?}", image.shape())));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("secret pixel {v} outside [0, 1]")));
        }
        Ok(WatermarkSecret { image })
    }

    pub fn from_text(text: &str, dims: [usize; 3]) -> Result<Self> {
        Self::new(render_text(text, dims)?)
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Weight on `1 - SSIM`.
    pub ssim: f64,
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ssim: 1.0, mse: 1.0 }
    }
}

pub const DEFAULT_SSIM_STOP: f64 = 0.95;
pub const DEFAULT_MAX_HARDENING_STEPS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct Watermark {
    pairs: Vec<(WatermarkKey, WatermarkSecret)>,
    pub ssim_stop: f64,
    pub max_hardening_steps: usize,
    pub weights: LossWeights,
}

impl Watermark {
    pub fn new(pairs: Vec<(WatermarkKey, WatermarkSecret)>) -> Result<Self> {
        let (k0, s0) = pairs.first().ok_or_else(|| Error::invalid("a watermark needs at least one key/secret pair"))?;
        for (k, s) in &pairs {
            if k.width() != k0.width() {
                return Err(Error::invalid("watermark keys differ in width"));
            }
            if s.image.shape() != s0.image.shape() {
                return Err(Error::shape("watermark secrets", format!("{:?} vs {:?}", s.image.shape(), s0.image.shape())));
            }
        }
        Ok(Watermark {
            pairs,
            ssim_stop: DEFAULT_SSIM_STOP,
            max_hardening_steps: DEFAULT_MAX_HARDENING_STEPS,
            weights: LossWeights::default(),
        })
    }

    /// Pairs `keys` with secrets from `secrets` in order.
    pub fn from_parts(keys: Vec<WatermarkKey>, secrets: Vec<WatermarkSecret>) -> Result<Self> {
        if keys.len() != secrets.len() {
            return Err(Error::invalid(format!("{} keys but {} secrets", keys.len(), secrets.len())));
        }
        Self::new(keys.into_iter().zip(secrets).collect())
    }

    /// `n` random keys paired with the built-in text secrets (cycled if `n > 11`).
    pub fn with_text_secrets(n: usize, key_width: usize, dims: [usize; 3], seed: u64) -> Result<Self> {
        let keys = generate_keys(n, key_width, KEY_RANGE.0, KEY_RANGE.1, seed)?;
        let secrets = (0..n)
            .map(|i| WatermarkSecret::from_text(DEFAULT_TEXTS[i % DEFAULT_TEXTS.len()], dims))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(keys, secrets)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(WatermarkKey, WatermarkSecret)] {
        &self.pairs
    }

    pub fn keys(&self) -> Vec<WatermarkKey> {
        self.pairs.iter().map(|(k, _)| k.clone()).collect()
    }

    /// `N×width` key batch.
    pub fn key_batch(&self) -> Tensor {
        keys_tensor(&self.keys()).expect("validated at construction")
    }

    /// `N×C×H×W` secret batch.
    pub fn secret_batch(&self) -> Tensor {
        let imgs: Vec<Tensor> = self.pairs.iter().map(|(_, s)| s.image.clone()).collect();
        Tensor::stack(&imgs).expect("validated at construction")
    }

    pub fn secrets(&self) -> Vec<Tensor> {
        self.pairs.iter().map(|(_, s)| s.image.clone()).collect()
    }

    fn check_graph(&self, twd: &TransposedGraph) -> Result<()> {
        let (k, s) = &self.pairs[0];
        if k.width() != twd.key_width() {
            return Err(Error::shape("watermark keys", format!("width {} but the model has {} outputs", k.width(), twd.key_width())));
        }
        if s.image.shape() != twd.output_shape() {
            return Err(Error::shape("watermark secrets", format!("{:?} but the model input is {:?}", s.image.shape(), twd.output_shape())));
        }
        Ok(())
    }
}

/// `weights.ssim·(1 − SSIM) + weights.mse·MSE`. Returns `(loss, ssim)`.
pub fn watermark_loss(tape: &mut Tape, out: Var, secrets: Var, weights: LossWeights) -> Result<(Var, Var)> {
    let s = ssim_var(tape, out, secrets, &SsimParams::default())?;
    let neg = tape.scale(s, -weights.ssim as f32)?;
    let structural = tape.add_scalar(neg, weights.ssim as f32)?;
    let diff = tape.sub(out, secrets)?;
    let sq = tape.square(diff)?;
    let m = tape.mean(sq)?;
    let pixel = tape.scale(m, weights.mse as f32)?;
    Ok((tape.add(structural, pixel)?, s))
}

/// One optimizer step of transposed training on the full key batch.
/// Returns the train-mode `(loss, mean SSIM)` before the update.
pub fn watermark_step(
    store: &mut ParameterStore,
    twd: &TransposedGraph,
    wm: &Watermark,
    opt: &mut OptimizerState,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let keys = tape.constant(wm.key_batch());
    let secrets = tape.constant(wm.secret_batch());
    let out = twd.forward(&mut tape, store, keys, Mode::Train, rng)?;
    let (loss, s) = watermark_loss(&mut tape, out, secrets, wm.weights)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("watermark loss {value}")));
    }
    let ssim = tape.value(s).item() as f64;
    store.backward(&tape, loss)?;
    opt.step(store)?;
    Ok((value, ssim))
}

/// Eval-mode transposed inference: one unclamped `C×H×W` image per key row.
pub fn extract(twd: &TransposedGraph, store: &ParameterStore, keys: &Tensor) -> Result<Vec<Tensor>> {
    let out = twd.eval(store, keys)?;
    let per: Vec<usize> = out.shape()[1..].to_vec();
    Ok((0..out.shape()[0]).map(|i| Tensor::from_vec(&per, out.row(i).to_vec())).collect())
}

/// Per-key eval-mode SSIM of the extraction against the secrets.
pub fn watermark_ssim(twd: &TransposedGraph, store: &ParameterStore, wm: &Watermark) -> Result<Vec<f64>> {
    let out = twd.eval(store, &wm.key_batch())?;
    ssim_per_image(&out, &wm.secret_batch(), &SsimParams::default())
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HardeningReport {
    pub steps_taken: usize,
    pub final_mean_ssim: f64,
    pub per_key_ssim: Vec<f64>,
    pub reached_stop: bool,
    /// `(step, best mean SSIM so far)` every 100 steps and at the end.
    pub best_ssim_trace: Vec<(usize, f64)>,
    pub wall_time_s: f64,
}

pub const HARDENING_TRACE_EVERY: usize = 100;

/// Transposed-only training until the eval-mode mean SSIM reaches
/// `wm.ssim_stop` or `wm.max_hardening_steps` steps were taken.
pub fn harden(
    store: &mut ParameterStore,
    twd: &TransposedGraph,
    wm: &Watermark,
    opt: &mut OptimizerState,
    rng: &mut impl Rng,
) -> Result<HardeningReport> {
    wm.check_graph(twd)?;
    let start = Instant::now();
    let mut per_key = watermark_ssim(twd, store, wm)?;
    let mut best = mean(&per_key);
    let mut trace = vec![(0, best)];
    let mut steps = 0;
    while mean(&per_key) < wm.ssim_stop && steps < wm.max_hardening_steps {
        watermark_step(store, twd, wm, opt, rng).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at hardening step {}", steps + 1)),
            other => other,
        })?;
        steps += 1;
        per_key = watermark_ssim(twd, store, wm)?;
        best = best.max(mean(&per_key));
        if steps % HARDENING_TRACE_EVERY == 0 {
            trace.push((steps, best));
        }
    }
    if trace.last().map(|t| t.0) != Some(steps) {
        trace.push((steps, best));
    }
    let final_mean_ssim = mean(&per_key);
    Ok(HardeningReport {
        steps_taken: steps,
        final_mean_ssim,
        reached_stop: final_mean_ssim >= wm.ssim_stop,
        per_key_ssim: per_key,
        best_ssim_trace: trace,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_ce_loss: f64,
    pub mean_wm_loss: f64,
    pub accuracy: f64,
    pub mean_ssim: f64,
    /// Training only, the end-of-epoch evaluation is excluded.
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Models and data for constraint training.
pub struct ConstraintSetup<'a> {
    pub fwd: &'a ExecutableGraph,
    pub twd: &'a TransposedGraph,
    pub train: &'a Dataset,
    /// Accuracy is reported on this set after every epoch.
    pub eval: &'a Dataset,
    pub batch_size: usize,
}

/// Alternates one cross-entropy step and one watermark step per minibatch.
/// `main_opt` and `wm_opt` keep separate moment estimates.
pub fn constraint_train(
    store: &mut ParameterStore,
    setup: &ConstraintSetup<'_>,
    wm: &Watermark,
    main_opt: &mut OptimizerState,
    wm_opt: &mut OptimizerState,
    epochs: usize,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    wm.check_graph(setup.twd)?;
    if setup.train.is_empty() {
        return Err(Error::invalid("constraint training on an empty dataset"));
    }
    let mut report = TrainReport::default();
    for epoch in 1..=epochs {
        let start = Instant::now();
        let batches = shuffled_batches(setup.train.len(), setup.batch_size, rng);
        let (mut ce_total, mut wm_total) = (0.0, 0.0);
        for (i, b) in batches.iter().enumerate() {
            let (x, y) = setup.train.batch(b);
            let tag = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} in epoch {epoch}, batch {i}")),
                other => other,
            };
            ce_total += ce_step(setup.fwd, store, main_opt, &x, &y, rng).map_err(tag)? as f64;
            wm_total += watermark_step(store, setup.twd, wm, wm_opt, rng).map_err(tag)?.0;
        }
        let n = batches.len() as f64;
        let wall_time_s = start.elapsed().as_secs_f64();
        report.epochs.push(EpochRecord {
            epoch,
            mean_ce_loss: ce_total / n,
            mean_wm_loss: wm_total / n,
            accuracy: accuracy(setup.fwd, store, setup.eval)?,
            mean_ssim: mean(&watermark_ssim(setup.twd, store, wm)?),
            wall_time_s,
        });
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ExtractionReport {
    pub per_key_ssim: Vec<f64>,
    pub mean_ssim: f64,
    /// Extracted images clamped to `[0, 1]`.
    #[serde(skip)]
    pub images: Vec<Tensor>,
    pub decoded_bits: Option<Vec<u8>>,
    pub ber: Option<f64>,
    pub files: Vec<PathBuf>,
}

/// Scores extracted images against the secrets and, with `emit_dir`, writes
/// one image per key plus a composite (secrets on top, extractions below).
/// No pass/fail decision is made.
pub fn verify(extracted: &[Tensor], secrets: &[Tensor], emit_dir: Option<&Path>) -> Result<ExtractionReport> {
    if extracted.len() != secrets.len() {
        return Err(Error::invalid(format!("{} extracted images for {} secrets", extracted.len(), secrets.len())));
    }
    if extracted.is_empty() {
        return Err(Error::invalid("nothing to verify"));
    }
    let a = Tensor::stack(extracted)?;
    let b = Tensor::stack(secrets)?;
    let per_key_ssim = ssim_per_image(&a, &b, &SsimParams::default())?;
    let images: Vec<Tensor> = extracted.iter().map(|t| t.map(|v| v.clamp(0.0, 1.0))).collect();
    let mut files = Vec::new();
    if let Some(dir) = emit_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        for (i, img) in images.iter().enumerate() {
            let path = dir.join(format!("key_{i:02}.{}", ext(img)));
            netpbm::write_image(img, &path)?;
            files.push(path);
        }
        let composite = netpbm::vstack(&[netpbm::hstack(secrets)?, netpbm::hstack(&images)?])?;
        let path = dir.join(format!("composite.{}", ext(&composite)));
        netpbm::write_image(&composite, &path)?;
        files.push(path);
    }
    Ok(ExtractionReport {
        mean_ssim: mean(&per_key_ssim),
        per_key_ssim,
        images,
        decoded_bits: None,
        ber: None,
        files,
    })
}

fn ext(img: &Tensor) -> &'static str {
    if img.shape()[0] == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    use super::*;
    use crate::graph::{transpose_model, ModelSpec, DEFAULT_ADDED_DROPOUT};

    fn small_setup(n_keys: usize) -> (ModelSpec, ParameterStore, TransposedGraph, Watermark) {
        let spec = ModelSpec::default_cnn([1, 24, 24], 10);
        let store = spec.init_store(7).unwrap();
        let twd = transpose_model(&spec, &store, DEFAULT_ADDED_DROPOUT, &[]).unwrap();
        let wm = Watermark::with_text_secrets(n_keys, 10, [1, 24, 24], 1).unwrap();
        (spec, store, twd, wm)
    }

    #[test]
    fn watermark_rejects_mixed_shapes() {
        let k = generate_keys(2, 10, -10.0, 10.0, 0).unwrap();
        let s1 = WatermarkSecret::from_text("AB", [1, 24, 24]).unwrap();
        let s2 = WatermarkSecret::from_text("AB", [1, 20, 20]).unwrap();
        assert!(Watermark::from_parts(k.clone(), vec![s1.clone(), s2]).is_err());
        assert!(Watermark::from_parts(k, vec![s1]).is_err());
        assert!(Watermark::new(vec![]).is_err());
        assert!(WatermarkSecret::new(Tensor::full(&[1, 4, 4], 1.5)).is_err());
    }

    #[test]
    fn hardening_raises_ssim_and_respects_budget() {
        let (_, mut store, twd, mut wm) = small_setup(1);
        wm.max_hardening_steps = 150;
        let before = mean(&watermark_ssim(&twd, &store, &wm).unwrap());
        let mut opt = OptimizerState::adam(1e-3).unwrap();
        let mut rng = SplitMix64::seed_from_u64(0);
        let r = harden(&mut store, &twd, &wm, &mut opt, &mut rng).unwrap();
        assert!(r.steps_taken <= 150);
        assert!(r.final_mean_ssim > before + 0.2, "{before} -> {}", r.final_mean_ssim);
        assert!(r.best_ssim_trace.windows(2).all(|w| w[1].1 >= w[0].1));
    }

    #[test]
    fn zero_budget_and_zero_epochs_leave_store_unchanged() {
        let (spec, mut store, twd, mut wm) = small_setup(2);
        let orig = store.clone();
        wm.max_hardening_steps = 0;
        let mut opt = OptimizerState::adam(1e-4).unwrap();
        let mut rng = SplitMix64::seed_from_u64(0);
        let r = harden(&mut store, &twd, &wm, &mut opt, &mut rng).unwrap();
        assert_eq!(r.steps_taken, 0);
        let fwd = ExecutableGraph::build(&spec, &store).unwrap();
        let data = crate::data::make_synthetic(
            &crate::data::SyntheticSpec { n_classes: 10, samples_per_class: 2, dims: [1, 24, 24], seed: 0 },
            crate::data::Split::Train,
        )
        .unwrap();
        let setup = ConstraintSetup { fwd: &fwd, twd: &twd, train: &data, eval: &data, batch_size: 8 };
        let mut opt2 = OptimizerState::adam(1e-4).unwrap();
        let rep = constraint_train(&mut store, &setup, &wm, &mut opt, &mut opt2, 0, &mut rng).unwrap();
        assert!(rep.epochs.is_empty());
        assert!(store.same_values(&orig));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (_, mut store, twd, wm) = small_setup(1);
        let w = store.tensor("l3.weight").unwrap().map(|_| f32::NAN);
        store.set("l3.weight", w).unwrap();
        let mut opt = OptimizerState::adam(1e-4).unwrap();
        let mut rng = SplitMix64::seed_from_u64(0);
        let err = watermark_step(&mut store, &twd, &wm, &mut opt, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn extraction_is_deterministic() {
        let (_, store, twd, wm) = small_setup(3);
        let a = extract(&twd, &store, &wm.key_batch()).unwrap();
        let b = extract(&twd, &store, &wm.key_batch()).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.shape(), &[1, 24, 24]);
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn verify_identical_images_and_emits_files() {
        let wm = Watermark::with_text_secrets(3, 10, [1, 28, 28], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = verify(&wm.secrets(), &wm.secrets(), Some(dir.path())).unwrap();
        assert!((r.mean_ssim - 1.0).abs() < 1e-9);
        assert_eq!(r.files.len(), 4);
        assert!(r.files.iter().all(|f| f.exists()));
        let composite = netpbm::read_image(r.files.last().unwrap()).unwrap();
        assert_eq!(composite.shape(), &[1, 57, 86]);
        assert!(verify(&wm.secrets()[..2], &wm.secrets(), None).is_err());
    }
}
