//! Subcommand implementations. Each returns what it wrote; printing is left
//! to the binary.

use std::path::{Path, PathBuf};

use inkwm::data::netpbm;
use inkwm::graph::{transpose_model, ExecutableGraph};
use inkwm::params::ParameterStore;
use inkwm::watermark::{self, ExtractionReport, WatermarkSecret};
use inkwm::Tensor;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, Artifacts, ModelCard};
use crate::config::{AttackConfig, ExperimentConfig, Overrides, SecretKind};
use crate::error::{CliError, InPhase, Phase};
use crate::pipeline::{self, AttackContext, Payload, RunOutcome};
use crate::report::{BerPair, RunManifest};

pub fn cmd_run(config: &Path, overrides: &Overrides, log: &mut dyn FnMut(&str)) -> Result<(RunOutcome, RunManifest), CliError> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let outcome = pipeline::run_pipeline(&cfg, log)?;
    let manifest = artifacts::write_run(&outcome, &cfg.out_dir, "run", &[])?;
    Ok((outcome, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub data_bits: usize,
    pub code_bits: usize,
    pub images: usize,
    pub after_training: BerPair,
    pub after_fine_tuning: BerPair,
    pub fine_tuning: AttackConfig,
}

/// A run with a dot-code secret, followed by fine-tuning of the result.
pub fn cmd_capacity(config: &Path, overrides: &Overrides, log: &mut dyn FnMut(&str)) -> Result<(RunOutcome, CapacityReport, RunManifest), CliError> {
    let mut cfg = ExperimentConfig::load(config, overrides)?;
    if cfg.watermark.secret != SecretKind::Dotcode || !cfg.watermark.enabled {
        return Err(CliError::Config("capacity needs watermark.secret = \"dotcode\"".into()));
    }
    let ft = match cfg.attacks.iter().position(|a| matches!(a, AttackConfig::FineTune { .. })) {
        Some(i) => i,
        None => {
            let c = &cfg.capacity;
            cfg.attacks.push(AttackConfig::FineTune { data: c.data, lr_factor: c.lr_factor, epochs: c.epochs });
            cfg.attacks.len() - 1
        }
    };
    let outcome = pipeline::run_pipeline(&cfg, log)?;
    let pm = outcome.metrics.extraction.as_ref().and_then(|e| e.payload.clone()).expect("dot-code runs report a payload");
    let points = &outcome.metrics.attacks[ft].points;
    let last = points.last().and_then(|p| p.ber).expect("fine-tuning traces carry images");
    let report = CapacityReport {
        data_bits: pm.data_bits,
        code_bits: pm.code_bits,
        images: pm.images,
        after_training: pm.ber,
        after_fine_tuning: last,
        fine_tuning: cfg.attacks[ft].clone(),
    };
    let value = serde_json::to_value(&report).expect("reports serialize");
    let manifest = artifacts::write_run(&outcome, &cfg.out_dir, "capacity", &[("capacity.json", value)])?;
    Ok((outcome, report, manifest))
}

/// A checkpoint with its graphs rebuilt from the model card.
pub struct LoadedModel {
    pub card: ModelCard,
    pub card_dir: PathBuf,
    pub store: ParameterStore,
    pub fwd: ExecutableGraph,
    pub twd: inkwm::graph::TransposedGraph,
}

/// `model.ckpt` pairs with `model.json` unless a card is given.
pub fn load_model(checkpoint: &Path, card: Option<&Path>) -> inkwm::Result<LoadedModel> {
    let card_path = card.map(Path::to_path_buf).unwrap_or_else(|| checkpoint.with_extension("json"));
    let card = ModelCard::load(&card_path)?;
    let mut store = card.spec.init_store(0)?;
    inkwm::checkpoint::load_into(&mut store, checkpoint)?;
    let fwd = ExecutableGraph::build(&card.spec, &store)?;
    let twd = transpose_model(&card.spec, &store, card.added_dropout, &card.frozen())?;
    let card_dir = card_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(LoadedModel { card, card_dir, store, fwd, twd })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtractSummary {
    pub report: ExtractionReport,
    pub ber: Option<BerPair>,
}

/// Extracts one image per key. With secrets (given, or listed in the card)
/// the images are also scored.
pub fn cmd_extract(checkpoint: &Path, card: Option<&Path>, keys_file: &Path, secrets: &[PathBuf], out: &Path) -> Result<ExtractSummary, CliError> {
    let m = load_model(checkpoint, card).during(Phase::Extract)?;
    let keys = watermark::load_keys(keys_file).during(Phase::Extract)?;
    if let Some(k) = keys.iter().find(|k| k.width() != m.twd.key_width()) {
        return Err(CliError::Phase {
            phase: Phase::Extract,
            source: inkwm::Error::Shape { context: "watermark keys".into(), detail: format!("width {}, the model has {} outputs", k.width(), m.twd.key_width()) },
        });
    }
    let images = watermark::extract(&m.twd, &m.store, &watermark::keys_tensor(&keys).during(Phase::Extract)?).during(Phase::Extract)?;
    let secret_paths: Vec<PathBuf> = if secrets.is_empty() { m.card.secrets.iter().map(|s| m.card_dir.join(s)).collect() } else { secrets.to_vec() };
    let mut a = Artifacts::create(out)?;
    let (report, ber) = if secret_paths.is_empty() {
        let clamped: Vec<Tensor> = images.iter().map(|t| t.map(|v| v.clamp(0.0, 1.0))).collect();
        (ExtractionReport { images: clamped, ..Default::default() }, None)
    } else {
        let secrets = read_images(&secret_paths).during(Phase::Verify)?;
        let n = secrets.len().min(images.len());
        let rep = watermark::verify(&images[..n], &secrets[..n], None).during(Phase::Verify)?;
        let ber = match m.card.payload().during(Phase::Verify)? {
            Some(p) if n == images.len() && p.code_bits.len().div_ceil(p.bits_per_image) == n => Some(p.score(&rep.images).during(Phase::Verify)?),
            _ => None,
        };
        (rep, ber)
    };
    let mut files = Vec::new();
    for (i, img) in report.images.iter().enumerate() {
        files.push(a.image(&format!("key_{i:02}"), img)?);
    }
    let report = ExtractionReport { files: files.into_iter().map(PathBuf::from).collect(), decoded_bits: None, ber: ber.map(|b| b.raw), ..report };
    let summary = ExtractSummary { report, ber };
    a.json("extraction.json", &summary)?;
    a.finish(RunManifest {
        command: "extract".into(),
        config_sha256: String::new(),
        seeds: Default::default(),
        timings: Default::default(),
        files: Vec::new(),
        summary: [("mean_ssim".to_string(), summary.report.mean_ssim)].into(),
    })?;
    Ok(summary)
}

pub fn read_images(paths: &[PathBuf]) -> inkwm::Result<Vec<Tensor>> {
    paths.iter().map(netpbm::read_image).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub per_key_ssim: Vec<f64>,
    pub mean_ssim: f64,
}

/// Scores extracted image files against secret image files, pairwise.
pub fn cmd_verify(images: &[PathBuf], secrets: &[PathBuf]) -> Result<VerifyReport, CliError> {
    let a = read_images(images).during(Phase::Verify)?;
    let b = read_images(secrets).during(Phase::Verify)?;
    for s in &b {
        WatermarkSecret::new(s.clone()).during(Phase::Verify)?;
    }
    let rep = watermark::verify(&a, &b, None).during(Phase::Verify)?;
    Ok(VerifyReport { per_key_ssim: rep.per_key_ssim, mean_ssim: rep.mean_ssim })
}

/// Runs the configured attacks against a model from an earlier run directory.
pub fn cmd_attack(config: &Path, from: &Path, overrides: &Overrides, log: &mut dyn FnMut(&str)) -> Result<(Vec<crate::report::AttackMetrics>, RunManifest), CliError> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    if cfg.attacks.is_empty() {
        return Err(CliError::Config("no [[attack]] sections".into()));
    }
    let seeds = pipeline::Seeds::new(&cfg);
    let (train, test) = pipeline::load_dataset(&cfg.dataset, seeds.data).during(Phase::Data)?;
    let m = load_model(&from.join("model.ckpt"), None).during(Phase::Data)?;
    if m.card.spec.input_shape != cfg.input_dims() || m.card.spec.output_dim != cfg.classes() {
        return Err(CliError::Config(format!("{} does not match the configured dataset", from.display())));
    }
    let keys = watermark::load_keys(from.join("keys.txt")).during(Phase::Data)?;
    let secrets = read_images(&m.card.secrets.iter().map(|s| m.card_dir.join(s)).collect::<Vec<_>>())
        .during(Phase::Data)?
        .into_iter()
        .map(WatermarkSecret::new)
        .collect::<inkwm::Result<Vec<_>>>()
        .during(Phase::Data)?;
    let wm = pipeline::build_watermark(&cfg, keys, secrets).during(Phase::Data)?;
    let payload: Option<Payload> = m.card.payload().during(Phase::Data)?;
    let baseline_path = from.join("baseline.ckpt");
    let reference = if baseline_path.is_file() {
        load_model(&baseline_path, None).during(Phase::Data)?.store
    } else {
        m.card.spec.init_store(seeds.init).during(Phase::Data)?
    };
    let ctx = AttackContext {
        spec: &m.card.spec,
        fwd: &m.fwd,
        twd: Some(&m.twd),
        wm: Some(&wm),
        payload: payload.as_ref(),
        train: &train,
        test: &test,
        reference: &reference,
        lr: cfg.training.lr,
        hardening_lr: cfg.training.hardening_lr(),
        batch_size: cfg.training.batch_size,
    };
    let start = std::time::Instant::now();
    let mut outcomes = Vec::new();
    for (i, a) in cfg.attacks.iter().enumerate() {
        let seed = seeds.attack(i, None);
        let o = pipeline::run_attack(&ctx, &m.store, a, seed).during(Phase::Attack)?;
        if let Some(p) = o.metrics.points.last() {
            log(&format!("attack[{i}] {}: accuracy {:.4}, mean SSIM {:.4}", a.kind(), p.accuracy, p.mean_ssim.unwrap_or(f64::NAN)));
        }
        outcomes.push(o);
    }
    let metrics: Vec<_> = outcomes.iter().map(|o| o.metrics.clone()).collect();
    let mut a = Artifacts::create(&cfg.out_dir)?;
    a.json("metrics.json", &metrics)?;
    artifacts::write_attacks(&mut a, &outcomes)?;
    let manifest = a.finish(RunManifest {
        command: "attack".into(),
        config_sha256: artifacts::config_hash(&cfg),
        seeds: seeds.to_map(),
        timings: crate::report::Timings { attacks_s: start.elapsed().as_secs_f64(), ..Default::default() },
        files: Vec::new(),
        summary: Default::default(),
    })?;
    Ok((metrics, manifest))
}
