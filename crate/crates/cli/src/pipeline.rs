//! The experiment pipeline: data, baseline, hardening, constraint training,
//! extraction and attacks. Nothing here touches the filesystem except to
//! read inputs.

use std::collections::BTreeMap;
use std::time::Instant;

use inkwm::attack::{self, AdversaryBudget, AttackTrace, Probe};
use inkwm::data::{self, Dataset, Split, SyntheticSpec};
use inkwm::graph::{capture_frozen_branches, transpose_model, ExecutableGraph, FrozenBranch, ModelSpec, TransposedGraph};
use inkwm::metrics::{accuracy, ber, mse};
use inkwm::optim::OptimizerState;
use inkwm::params::ParameterStore;
use inkwm::payload::{self, Ecc};
use inkwm::train::train_epoch;
use inkwm::watermark::{self, ExtractionReport, LossWeights, Watermark, WatermarkKey, WatermarkSecret, KEY_RANGE};
use inkwm::Tensor;
use rand::{Rng, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

use crate::config::{AttackConfig, DataSource, DatasetConfig, ExperimentConfig, SecretKind, CIFAR_FILES, MNIST_FILES};
use crate::error::{CliError, InPhase, Phase};
use crate::report::*;

/// Seed of the stream named `tag`, derived from the master seed.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    rand::RngCore::next_u64(&mut SplitMix64::seed_from_u64(master ^ h))
}

#[derive(Clone, Debug)]
pub struct Seeds {
    pub master: u64,
    pub init: u64,
    pub data: u64,
    pub keys: u64,
    pub payload: u64,
    pub train: u64,
    pub baseline: u64,
}

impl Seeds {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let m = cfg.seed;
        Seeds {
            master: m,
            init: derive_seed(m, "init"),
            data: derive_seed(m, "data"),
            keys: cfg.watermark.key_seed.unwrap_or_else(|| derive_seed(m, "keys")),
            payload: cfg.watermark.payload_seed.unwrap_or_else(|| derive_seed(m, "payload")),
            train: derive_seed(m, "train"),
            baseline: derive_seed(m, "baseline"),
        }
    }

    pub fn attack(&self, index: usize, explicit: Option<u64>) -> u64 {
        explicit.unwrap_or_else(|| derive_seed(self.master, &format!("attack{index}")))
    }

    pub fn to_map(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("master".into(), self.master),
            ("init".into(), self.init),
            ("data".into(), self.data),
            ("keys".into(), self.keys),
            ("payload".into(), self.payload),
            ("train".into(), self.train),
            ("baseline".into(), self.baseline),
        ])
    }
}

/// A dot-code payload and the bits actually drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Payload {
    pub data_bits: Vec<u8>,
    pub code_bits: Vec<u8>,
    pub ecc: Ecc,
    pub bits_per_image: usize,
}

impl Payload {
    pub fn new(data_bits: Vec<u8>, ecc: Ecc, bits_per_image: usize) -> Self {
        let code_bits = match ecc {
            Ecc::None => data_bits.clone(),
            Ecc::Hamming74 => payload::hamming74_encode(&data_bits).0,
        };
        Payload { data_bits, code_bits, ecc, bits_per_image }
    }

    pub fn images(&self, dims: [usize; 3]) -> inkwm::Result<Vec<Tensor>> {
        payload::encode_chunks(&self.code_bits, self.bits_per_image, dims)
    }

    /// Decodes clamped extractions and scores them.
    pub fn score(&self, images: &[Tensor]) -> inkwm::Result<BerPair> {
        let code = payload::decode_chunks(images, self.bits_per_image, self.code_bits.len())?;
        let raw = ber(&code, &self.code_bits)?;
        let ecc = match self.ecc {
            Ecc::None => None,
            Ecc::Hamming74 => {
                let mut data = payload::hamming74_decode(&code).data;
                data.truncate(self.data_bits.len());
                Some(ber(&data, &self.data_bits)?)
            }
        };
        Ok(BerPair { raw, ecc })
    }

    pub fn summary(&self, ber: BerPair) -> PayloadMetrics {
        PayloadMetrics {
            data_bits: self.data_bits.len(),
            code_bits: self.code_bits.len(),
            ecc: self.ecc,
            bits_per_image: self.bits_per_image,
            images: self.code_bits.len().div_ceil(self.bits_per_image),
            ber,
        }
    }
}

pub fn load_dataset(d: &DatasetConfig, seed: u64) -> inkwm::Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match d.source {
        DataSource::Mnist => {
            let dir = d.data_dir().expect("mnist always has a directory");
            let f = |i: usize| dir.join(MNIST_FILES[i]);
            let mut tr = data::load_idx(f(0), f(1), Split::Train)?;
            let mut te = data::load_idx(f(2), f(3), Split::Test)?;
            tr.source = "mnist".into();
            te.source = "mnist".into();
            (tr, te)
        }
        DataSource::Cifar10 => {
            let dir = d.data_dir().expect("validated");
            let paths: Vec<_> = CIFAR_FILES.iter().map(|f| dir.join(f)).collect();
            (data::load_cifar10(&paths[..5], Split::Train)?, data::load_cifar10(&paths[5..], Split::Test)?)
        }
        DataSource::Synthetic => {
            let spec = |n: usize, s: u64| SyntheticSpec { n_classes: d.classes(), samples_per_class: n, dims: d.dims(), seed: s };
            (
                data::make_synthetic(&spec(d.per_class.unwrap_or(100), seed), Split::Train)?,
                data::make_synthetic(&spec(d.test_per_class.unwrap_or(50), seed), Split::Test)?,
            )
        }
    };
    if d.source != DataSource::Synthetic {
        if d.classes() < train.classes {
            train = train.restrict_classes(d.classes());
            test = test.restrict_classes(d.classes());
        }
        if let Some(k) = d.per_class {
            train = train.subset_per_class(k);
        }
        if let Some(k) = d.test_per_class {
            test = test.subset_per_class(k);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(inkwm::Error::InvalidArgument("dataset is empty after subsetting".into()));
    }
    Ok((train, test))
}

/// Owner keys: from the keys file, else drawn from the key range.
pub fn owner_keys(cfg: &ExperimentConfig, seed: u64) -> inkwm::Result<Vec<WatermarkKey>> {
    let n = cfg.n_keys();
    match &cfg.watermark.keys_file {
        Some(f) => Ok(watermark::load_keys(f)?.into_iter().take(n).collect()),
        None => watermark::generate_keys(n, cfg.classes(), KEY_RANGE.0, KEY_RANGE.1, seed),
    }
}

pub fn payload_of(cfg: &ExperimentConfig, seed: u64) -> inkwm::Result<Option<Payload>> {
    let wm = &cfg.watermark;
    if wm.secret != SecretKind::Dotcode {
        return Ok(None);
    }
    let bits = match (&wm.payload_file, wm.payload_bits) {
        (Some(f), _) => payload::bytes_to_bits(&std::fs::read(f)?),
        (None, Some(n)) => {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            (0..n).map(|_| rng.random_range(0..2u8)).collect()
        }
        (None, None) => return Err(inkwm::Error::InvalidArgument("dot code without a payload".into())),
    };
    if bits.is_empty() {
        return Err(inkwm::Error::InvalidArgument("zero-length payload".into()));
    }
    Ok(Some(Payload::new(bits, wm.ecc, cfg.bits_per_image())))
}

pub fn owner_secrets(cfg: &ExperimentConfig, payload: Option<&Payload>) -> inkwm::Result<Vec<WatermarkSecret>> {
    let dims = cfg.input_dims();
    match cfg.watermark.secret {
        SecretKind::Text => cfg.secret_texts().iter().map(|t| WatermarkSecret::from_text(t, dims)).collect(),
        SecretKind::Files => cfg
            .watermark
            .files
            .iter()
            .flatten()
            .map(|f| {
                let img = data::netpbm::read_image(f)?;
                if img.shape() != dims {
                    return Err(inkwm::Error::Shape {
                        context: format!("secret {}", f.display()),
                        detail: format!("{:?}, model input is {dims:?}", img.shape()),
                    });
                }
                WatermarkSecret::new(img)
            })
            .collect(),
        SecretKind::Dotcode => {
            let p = payload.ok_or_else(|| inkwm::Error::InvalidArgument("dot code without a payload".into()))?;
            p.images(dims)?.into_iter().map(WatermarkSecret::new).collect()
        }
    }
}

pub fn build_watermark(cfg: &ExperimentConfig, keys: Vec<WatermarkKey>, secrets: Vec<WatermarkSecret>) -> inkwm::Result<Watermark> {
    let mut wm = Watermark::from_parts(keys, secrets)?;
    wm.ssim_stop = cfg.watermark.ssim_stop;
    wm.max_hardening_steps = cfg.watermark.max_hardening_steps;
    wm.weights = LossWeights { ssim: cfg.watermark.ssim_weight, mse: cfg.watermark.mse_weight };
    Ok(wm)
}

/// Everything an attack needs besides the model under attack.
pub struct AttackContext<'a> {
    pub spec: &'a ModelSpec,
    pub fwd: &'a ExecutableGraph,
    pub twd: Option<&'a TransposedGraph>,
    pub wm: Option<&'a Watermark>,
    pub payload: Option<&'a Payload>,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    /// An unwatermarked model, for adversaries that imitate one.
    pub reference: &'a ParameterStore,
    pub lr: f64,
    pub hardening_lr: f64,
    pub batch_size: usize,
}

/// One attack's trace plus its serialized summary.
pub struct AttackOutcome {
    pub trace: AttackTrace,
    pub metrics: AttackMetrics,
}

// SSIM is NaN when there is no watermark to measure
fn accuracy_only(fwd: &ExecutableGraph, store: &ParameterStore, test: &Dataset, at: usize) -> inkwm::Result<attack::TracePoint> {
    Ok(attack::TracePoint { at, accuracy: accuracy(fwd, store, test)?, mean_ssim: f64::NAN, per_key_ssim: Vec::new(), images: Vec::new() })
}

/// Runs one attack on a copy of `store`.
pub fn run_attack(ctx: &AttackContext<'_>, store: &ParameterStore, cfg: &AttackConfig, seed: u64) -> inkwm::Result<AttackOutcome> {
    let mut s = store.clone();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let split = |d: inkwm::data::Split| if d == Split::Train { ctx.train } else { ctx.test };
    let mut extra = BTreeMap::new();
    let trace = match (ctx.twd, ctx.wm) {
        (Some(twd), Some(wm)) => {
            let probe = Probe { fwd: ctx.fwd, twd, wm, eval: ctx.test };
            match cfg {
                AttackConfig::FineTune { data, lr_factor, epochs } => {
                    attack::fine_tune(&mut s, &probe, split(*data), ctx.lr, *lr_factor, *epochs, ctx.batch_size, &mut rng)?
                }
                AttackConfig::Prune { levels } => attack::pruning_curve(&s, &probe, levels)?,
                AttackConfig::FinePrune { data, lr_factor, epochs, level } => {
                    attack::fine_prune(&mut s, &probe, split(*data), ctx.lr * lr_factor, *epochs, *level, ctx.batch_size, &mut rng)?
                }
                AttackConfig::Erase { keys, secrets, n_keys, steps, lr, stop_below, .. } => {
                    let adv = attack::adversary_watermark(wm, *keys, *secrets, *n_keys, Some((twd, ctx.reference)), rng.random())?;
                    let mut opt = OptimizerState::adam(lr.unwrap_or(ctx.hardening_lr))?;
                    let budget = AdversaryBudget { stop_below: *stop_below, ..AdversaryBudget::new(*steps) };
                    attack::erase_watermark(&mut s, &probe, &adv, &mut opt, &budget, &mut rng)?
                }
                AttackConfig::Overwrite { texts, steps, lr, .. } => {
                    let dims: [usize; 3] = wm.pairs()[0].1.image().shape().try_into().expect("C×H×W secret");
                    let keys = watermark::generate_keys(texts.len(), twd.key_width(), KEY_RANGE.0, KEY_RANGE.1, rng.random())?;
                    let secrets = texts.iter().map(|t| WatermarkSecret::from_text(t, dims)).collect::<inkwm::Result<Vec<_>>>()?;
                    let mut new_wm = Watermark::from_parts(keys, secrets)?;
                    new_wm.weights = wm.weights;
                    let mut opt = OptimizerState::adam(lr.unwrap_or(ctx.hardening_lr))?;
                    let mut trace = attack::overwrite_watermark(&mut s, &probe, &new_wm, &mut opt, &AdversaryBudget::new(*steps), &mut rng)?;
                    extra.insert("new_watermark_ssim".into(), watermark::mean(&watermark::watermark_ssim(twd, &s, &new_wm)?));
                    trace.attack = "overwrite".into();
                    trace
                }
                AttackConfig::CrossDataset { dataset, epochs, lr } => {
                    let (tr, te) = load_dataset(dataset, rng.random())?;
                    let out = attack::cross_dataset_finetune(&mut s, ctx.spec, twd, wm, &tr, &te, *epochs, lr.unwrap_or(ctx.lr), ctx.batch_size, &mut rng)?;
                    if let Some(v) = out.ssim_without_restore {
                        extra.insert("ssim_without_restore".into(), v);
                    }
                    out.trace
                }
            }
        }
        _ => {
            // no watermark: only accuracy is tracked
            let mut trace = AttackTrace { attack: cfg.kind().into(), points: Vec::new() };
            match cfg {
                AttackConfig::FineTune { data, lr_factor, epochs } => {
                    let mut opt = OptimizerState::adam(ctx.lr * lr_factor)?;
                    trace.points.push(accuracy_only(ctx.fwd, &s, ctx.test, 0)?);
                    for e in 1..=*epochs {
                        train_epoch(ctx.fwd, &mut s, &mut opt, split(*data), ctx.batch_size, &mut rng)?;
                        trace.points.push(accuracy_only(ctx.fwd, &s, ctx.test, e)?);
                    }
                }
                AttackConfig::Prune { levels } => {
                    for &l in levels {
                        let mut p = s.clone();
                        attack::prune(&mut p, l)?;
                        trace.points.push(accuracy_only(ctx.fwd, &p, ctx.test, (l * 100.0).round() as usize)?);
                    }
                }
                AttackConfig::FinePrune { data, lr_factor, epochs, level } => {
                    let mut opt = OptimizerState::adam(ctx.lr * lr_factor)?;
                    trace.points.push(accuracy_only(ctx.fwd, &s, ctx.test, 0)?);
                    for e in 1..=*epochs {
                        train_epoch(ctx.fwd, &mut s, &mut opt, split(*data), ctx.batch_size, &mut rng)?;
                        trace.points.push(accuracy_only(ctx.fwd, &s, ctx.test, e)?);
                    }
                    attack::prune(&mut s, *level)?;
                    trace.points.push(accuracy_only(ctx.fwd, &s, ctx.test, epochs + 1)?);
                }
                other => return Err(inkwm::Error::InvalidArgument(format!("{} needs a watermark", other.kind()))),
            }
            trace
        }
    };
    let points = trace
        .points
        .iter()
        .map(|p| {
            let ber = match ctx.payload {
                Some(pl) if !p.images.is_empty() => Some(pl.score(&p.images)?),
                _ => None,
            };
            Ok(PointMetrics { at: p.at, accuracy: p.accuracy, mean_ssim: Some(p.mean_ssim).filter(|v| !v.is_nan()), per_key_ssim: p.per_key_ssim.clone(), ber })
        })
        .collect::<inkwm::Result<Vec<_>>>()?;
    Ok(AttackOutcome { metrics: AttackMetrics { kind: cfg.kind().into(), config: cfg.clone(), points, extra }, trace })
}

/// A finished run, ready to be written out.
pub struct RunOutcome {
    pub cfg: ExperimentConfig,
    pub seeds: Seeds,
    pub spec: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub store: ParameterStore,
    pub twd: Option<TransposedGraph>,
    pub frozen: Vec<FrozenBranch>,
    pub wm: Option<Watermark>,
    pub payload: Option<Payload>,
    pub baseline: Option<ParameterStore>,
    /// The model before any training.
    pub initial: ParameterStore,
    pub extraction: Option<ExtractionReport>,
    pub attacks: Vec<AttackOutcome>,
    pub metrics: RunMetrics,
    pub timings: Timings,
}

impl RunOutcome {
    pub fn fwd(&self) -> inkwm::Result<ExecutableGraph> {
        ExecutableGraph::build(&self.spec, &self.store)
    }

    pub fn attack_context<'a>(&'a self, fwd: &'a ExecutableGraph) -> AttackContext<'a> {
        AttackContext {
            spec: &self.spec,
            fwd,
            twd: self.twd.as_ref(),
            wm: self.wm.as_ref(),
            payload: self.payload.as_ref(),
            train: &self.train,
            test: &self.test,
            reference: self.baseline.as_ref().unwrap_or(&self.initial),
            lr: self.cfg.training.lr,
            hardening_lr: self.cfg.training.hardening_lr(),
            batch_size: self.cfg.training.batch_size,
        }
    }
}

/// Progress lines go to `log`.
pub fn run_pipeline(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<RunOutcome, CliError> {
    let total = Instant::now();
    let seeds = Seeds::new(cfg);
    let mut timings = Timings::default();
    let t = &cfg.training;

    let clock = Instant::now();
    let (train, test) = load_dataset(&cfg.dataset, seeds.data).during(Phase::Data)?;
    let spec = cfg.spec().during(Phase::Data)?;
    let mut store = spec.init_store(seeds.init).during(Phase::Data)?;
    let initial = store.clone();
    let fwd = ExecutableGraph::build(&spec, &store).during(Phase::Data)?;
    timings.data_s = clock.elapsed().as_secs_f64();
    log(&format!("data: {} train / {} test samples, {} trainable parameters", train.len(), test.len(), store.trainable_count()));

    let payload = payload_of(cfg, seeds.payload).during(Phase::Data)?;
    let wm = if cfg.watermark.enabled {
        let keys = owner_keys(cfg, seeds.keys).during(Phase::Data)?;
        let secrets = owner_secrets(cfg, payload.as_ref()).during(Phase::Data)?;
        Some(build_watermark(cfg, keys, secrets).during(Phase::Data)?)
    } else {
        None
    };

    let (baseline, baseline_metrics) = if t.baseline && cfg.watermark.enabled {
        let mut b = initial.clone();
        let mut opt = OptimizerState::new(t.optimizer, t.lr).during(Phase::Baseline)?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seeds.baseline);
        let mut secs = 0.0;
        let mut accs = Vec::new();
        for e in 1..=t.epochs {
            let c = Instant::now();
            train_epoch(&fwd, &mut b, &mut opt, &train, t.batch_size, &mut rng).during(Phase::Baseline)?;
            secs += c.elapsed().as_secs_f64();
            accs.push(accuracy(&fwd, &b, &test).during(Phase::Baseline)?);
            log(&format!("baseline epoch {e}: accuracy {:.4}", accs[e - 1]));
        }
        timings.baseline_train_s = Some(secs);
        let acc = accs.last().copied().unwrap_or(accuracy(&fwd, &b, &test).during(Phase::Baseline)?);
        (Some(b), Some(BaselineMetrics { epoch_accuracy: accs, accuracy: acc, unwatermarked_ssim: None }))
    } else {
        (None, None)
    };

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seeds.train);
    let mut frozen = Vec::new();
    let mut training = Vec::new();
    let mut hardening = None;
    let twd = match &wm {
        Some(wm) => {
            if !spec.residual_blocks().is_empty() {
                let mut opt = OptimizerState::new(t.optimizer, t.lr).during(Phase::Harden)?;
                frozen = capture_frozen_branches(&fwd, &mut store, &train, cfg.model.warmup_epochs, &mut opt, t.batch_size, &mut rng)
                    .during(Phase::Harden)?;
            }
            let twd = transpose_model(&spec, &store, cfg.model.added_dropout, &frozen).during(Phase::Harden)?;
            let mut opt = OptimizerState::new(t.wm_optimizer, t.hardening_lr()).during(Phase::Harden)?;
            let rep = watermark::harden(&mut store, &twd, wm, &mut opt, &mut rng).during(Phase::Harden)?;
            timings.harden_s = Some(rep.wall_time_s);
            let acc = accuracy(&fwd, &store, &test).during(Phase::Harden)?;
            log(&format!("harden: {} steps, mean SSIM {:.4}, accuracy {acc:.4}", rep.steps_taken, rep.final_mean_ssim));
            hardening = Some(HardeningMetrics {
                steps: rep.steps_taken,
                reached_stop: rep.reached_stop,
                final_mean_ssim: rep.final_mean_ssim,
                per_key_ssim: rep.per_key_ssim,
                accuracy_after: acc,
                trace: rep.best_ssim_trace,
            });

            let setup = watermark::ConstraintSetup { fwd: &fwd, twd: &twd, train: &train, eval: &test, batch_size: t.batch_size };
            let mut main_opt = OptimizerState::new(t.optimizer, t.lr).during(Phase::Train)?;
            let mut wm_opt = OptimizerState::new(t.wm_optimizer, t.wm_lr).during(Phase::Train)?;
            let rep = watermark::constraint_train(&mut store, &setup, wm, &mut main_opt, &mut wm_opt, t.epochs, &mut rng).during(Phase::Train)?;
            for r in &rep.epochs {
                log(&format!("train epoch {}: accuracy {:.4}, mean SSIM {:.4}", r.epoch, r.accuracy, r.mean_ssim));
                timings.train_s += r.wall_time_s;
                training.push(EpochMetrics { epoch: r.epoch, ce_loss: r.mean_ce_loss, wm_loss: Some(r.mean_wm_loss), accuracy: r.accuracy, mean_ssim: Some(r.mean_ssim) });
            }
            Some(twd)
        }
        None => {
            let mut opt = OptimizerState::new(t.optimizer, t.lr).during(Phase::Train)?;
            for e in 1..=t.epochs {
                let c = Instant::now();
                let loss = train_epoch(&fwd, &mut store, &mut opt, &train, t.batch_size, &mut rng).during(Phase::Train)?;
                timings.train_s += c.elapsed().as_secs_f64();
                let acc = accuracy(&fwd, &store, &test).during(Phase::Train)?;
                log(&format!("train epoch {e}: accuracy {acc:.4}"));
                training.push(EpochMetrics { epoch: e, ce_loss: loss, wm_loss: None, accuracy: acc, mean_ssim: None });
            }
            None
        }
    };
    if let (Some(b), Some(tr)) = (timings.baseline_train_s, wm.as_ref().map(|_| timings.train_s)) {
        if b > 0.0 {
            timings.training_overhead_pct = Some((tr - b) / b * 100.0);
        }
    }
    let final_accuracy = match training.last() {
        Some(e) => e.accuracy,
        None => accuracy(&fwd, &store, &test).during(Phase::Train)?,
    };

    let clock = Instant::now();
    let mut extraction = None;
    let mut extraction_metrics = None;
    let mut baseline_metrics = baseline_metrics;
    if let (Some(twd), Some(wm)) = (&twd, &wm) {
        let images = watermark::extract(twd, &store, &wm.key_batch()).during(Phase::Extract)?;
        let rep = watermark::verify(&images, &wm.secrets(), None).during(Phase::Extract)?;
        let err = mse(&Tensor::stack(&images).during(Phase::Extract)?, &wm.secret_batch()).during(Phase::Extract)?;
        let pm = match &payload {
            Some(p) => Some(p.summary(p.score(&rep.images).during(Phase::Extract)?)),
            None => None,
        };
        log(&format!("extract: mean SSIM {:.4}{}", rep.mean_ssim, pm.as_ref().map(|p| format!(", BER {:.4}", p.ber.raw)).unwrap_or_default()));
        extraction_metrics = Some(ExtractionMetrics { per_key_ssim: rep.per_key_ssim.clone(), mean_ssim: rep.mean_ssim, mse: err, payload: pm });
        extraction = Some(rep);
        if let (Some(b), Some(bm)) = (&baseline, baseline_metrics.as_mut()) {
            bm.unwatermarked_ssim = Some(watermark::watermark_ssim(twd, b, wm).during(Phase::Extract)?);
        }
    }
    timings.extract_s = clock.elapsed().as_secs_f64();

    let mut outcome = RunOutcome {
        cfg: cfg.clone(),
        seeds,
        spec: spec.clone(),
        train,
        test,
        store,
        twd,
        frozen,
        wm,
        payload,
        baseline,
        initial,
        extraction,
        attacks: Vec::new(),
        metrics: RunMetrics {
            name: cfg.name.clone(),
            seed: cfg.seed,
            dataset: DatasetSummary { source: String::new(), train_samples: 0, test_samples: 0, classes: cfg.classes(), dims: cfg.input_dims() },
            model: ModelSummary {
                preset: cfg.model.preset.clone(),
                trainable_params: spec.trainable_count(),
                transposed_extra_params: 0,
                added_dropout: cfg.model.added_dropout,
            },
            baseline: baseline_metrics,
            hardening,
            training,
            final_accuracy,
            extraction: extraction_metrics,
            attacks: Vec::new(),
        },
        timings,
    };
    outcome.metrics.dataset.source = outcome.train.source.clone();
    outcome.metrics.dataset.train_samples = outcome.train.len();
    outcome.metrics.dataset.test_samples = outcome.test.len();

    let clock = Instant::now();
    let fwd = outcome.fwd().during(Phase::Attack)?;
    let mut attacks = Vec::new();
    for (i, a) in cfg.attacks.iter().enumerate() {
        let seed = outcome.seeds.attack(i, attack_seed(a));
        let o = run_attack(&outcome.attack_context(&fwd), &outcome.store, a, seed).map_err(|e| CliError::Phase {
            phase: Phase::Attack,
            source: inkwm::Error::InvalidArgument(format!("attack[{i}] ({}): {e}", a.kind())),
        })?;
        if let Some(last) = o.metrics.points.last() {
            log(&format!("attack[{i}] {}: accuracy {:.4}, mean SSIM {:.4}", a.kind(), last.accuracy, last.mean_ssim.unwrap_or(f64::NAN)));
        }
        attacks.push(o);
    }
    outcome.metrics.attacks = attacks.iter().map(|o| o.metrics.clone()).collect();
    outcome.attacks = attacks;
    outcome.timings.attacks_s = clock.elapsed().as_secs_f64();
    outcome.timings.total_s = total.elapsed().as_secs_f64();
    Ok(outcome)
}

fn attack_seed(a: &AttackConfig) -> Option<u64> {
    match a {
        AttackConfig::Erase { seed, .. } | AttackConfig::Overwrite { seed, .. } => *seed,
        _ => None,
    }
}
