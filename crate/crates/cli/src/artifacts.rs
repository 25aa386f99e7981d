//! Output directory layout and the model card sidecar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use inkwm::data::netpbm;
use inkwm::graph::{FrozenBranch, ModelSpec};
use inkwm::payload::Ecc;
use inkwm::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, InPhase, Phase};
use crate::pipeline::{AttackOutcome, Payload, RunOutcome};
use crate::report::RunManifest;

/// Collects every file written below `root` for the manifest.
pub struct Artifacts {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| io(root, e))?;
        Ok(Artifacts { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        self.files.push(PathBuf::from(rel));
        Ok(p)
    }

    pub fn bytes(&mut self, rel: &str, data: &[u8]) -> Result<(), CliError> {
        let p = self.path(rel)?;
        std::fs::write(&p, data).map_err(|e| io(&p, e))
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Phase { phase: Phase::Output, source: inkwm::Error::InvalidArgument(e.to_string()) })?;
        text.push('\n');
        self.bytes(rel, text.as_bytes())
    }

    /// Writes PGM or PPM; `rel` has no extension.
    pub fn image(&mut self, rel: &str, img: &Tensor) -> Result<String, CliError> {
        let rel = format!("{rel}.{}", if img.shape()[0] == 3 { "ppm" } else { "pgm" });
        let p = self.path(&rel)?;
        netpbm::write_image(img, &p).during(Phase::Output)?;
        Ok(rel)
    }

    pub fn checkpoint(&mut self, rel: &str, store: &inkwm::params::ParameterStore) -> Result<(), CliError> {
        let p = self.path(rel)?;
        inkwm::checkpoint::save(store, &p).during(Phase::Output)
    }

    /// Sorted relative paths of everything written so far, plus `extra`.
    pub fn listing(&self, extra: &[&str]) -> Vec<String> {
        let mut v: Vec<String> = self.files.iter().map(|p| p.to_string_lossy().replace('\\', "/")).collect();
        v.extend(extra.iter().map(|s| s.to_string()));
        v.sort();
        v.dedup();
        v
    }

    /// Writes `manifest.json`, which lists itself.
    pub fn finish(mut self, mut manifest: RunManifest) -> Result<RunManifest, CliError> {
        manifest.files = self.listing(&["manifest.json"]);
        self.json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

fn io(p: &Path, e: std::io::Error) -> CliError {
    CliError::Phase { phase: Phase::Output, source: inkwm::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenCard {
    pub block_id: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadCard {
    /// Data bits as a string of `0` and `1`.
    pub data_bits: String,
    pub ecc: Ecc,
    pub bits_per_image: usize,
}

/// `model.json`: what is needed to rebuild both graphs around a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub spec: ModelSpec,
    pub added_dropout: f64,
    #[serde(default)]
    pub frozen_branches: Vec<FrozenCard>,
    /// Secret images relative to the card.
    #[serde(default)]
    pub secrets: Vec<String>,
    #[serde(default)]
    pub payload: Option<PayloadCard>,
}

impl ModelCard {
    pub fn load(path: &Path) -> inkwm::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| inkwm::Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn frozen(&self) -> Vec<FrozenBranch> {
        self.frozen_branches
            .iter()
            .map(|f| FrozenBranch { block_id: f.block_id.clone(), value: Tensor::from_vec(&f.shape, f.values.clone()) })
            .collect()
    }

    pub fn payload(&self) -> inkwm::Result<Option<Payload>> {
        let Some(p) = &self.payload else { return Ok(None) };
        let bits = p
            .data_bits
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(inkwm::Error::InvalidArgument(format!("payload bit {other:?}"))),
            })
            .collect::<inkwm::Result<Vec<u8>>>()?;
        Ok(Some(Payload::new(bits, p.ecc, p.bits_per_image)))
    }
}

pub fn config_hash(cfg: &crate::config::ExperimentConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("configs serialize");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a full run below `root`, plus any `extras` as JSON files, and
/// returns the manifest.
pub fn write_run(outcome: &RunOutcome, root: &Path, command: &str, extras: &[(&str, serde_json::Value)]) -> Result<RunManifest, CliError> {
    let mut a = Artifacts::create(root)?;
    for (name, value) in extras {
        a.json(name, value)?;
    }
    let toml = toml::to_string(&outcome.cfg).map_err(|e| CliError::Phase { phase: Phase::Output, source: inkwm::Error::InvalidArgument(e.to_string()) })?;
    a.bytes("config.toml", toml.as_bytes())?;
    a.json("metrics.json", &outcome.metrics)?;
    a.checkpoint("model.ckpt", &outcome.store)?;

    let mut secrets = Vec::new();
    if let Some(wm) = &outcome.wm {
        a.bytes("keys.txt", inkwm::watermark::format_keys(&wm.keys()).as_bytes())?;
        for (i, s) in wm.secrets().iter().enumerate() {
            secrets.push(a.image(&format!("secrets/secret_{i:02}"), s)?);
        }
    }
    let card = ModelCard {
        spec: outcome.spec.clone(),
        added_dropout: outcome.cfg.model.added_dropout,
        frozen_branches: outcome
            .frozen
            .iter()
            .map(|f| FrozenCard { block_id: f.block_id.clone(), shape: f.value.shape().to_vec(), values: f.value.data().to_vec() })
            .collect(),
        secrets,
        payload: outcome.payload.as_ref().map(|p| PayloadCard {
            data_bits: p.data_bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect(),
            ecc: p.ecc,
            bits_per_image: p.bits_per_image,
        }),
    };
    a.json("model.json", &card)?;
    if let Some(b) = &outcome.baseline {
        a.checkpoint("baseline.ckpt", b)?;
        a.json("baseline.json", &ModelCard { payload: None, ..card.clone() })?;
    }

    if let (Some(rep), Some(wm)) = (&outcome.extraction, &outcome.wm) {
        for (i, img) in rep.images.iter().enumerate() {
            a.image(&format!("extraction/key_{i:02}"), img)?;
        }
        let composite = netpbm::vstack(&[netpbm::hstack(&wm.secrets()).during(Phase::Output)?, netpbm::hstack(&rep.images).during(Phase::Output)?])
            .during(Phase::Output)?;
        a.image("extraction/composite", &composite)?;
    }
    write_attacks(&mut a, &outcome.attacks)?;

    let mut summary = BTreeMap::from([("final_accuracy".to_string(), outcome.metrics.final_accuracy)]);
    if let Some(e) = &outcome.metrics.extraction {
        summary.insert("mean_ssim".into(), e.mean_ssim);
        if let Some(p) = &e.payload {
            summary.insert("ber_raw".into(), p.ber.raw);
            if let Some(v) = p.ber.ecc {
                summary.insert("ber_ecc".into(), v);
            }
        }
    }
    if let Some(b) = &outcome.metrics.baseline {
        summary.insert("baseline_accuracy".into(), b.accuracy);
    }
    if let Some(h) = &outcome.metrics.hardening {
        summary.insert("hardening_steps".into(), h.steps as f64);
    }
    let manifest = RunManifest {
        command: command.into(),
        config_sha256: config_hash(&outcome.cfg),
        seeds: outcome.seeds.to_map(),
        timings: outcome.timings.clone(),
        files: Vec::new(),
        summary,
    };
    a.finish(manifest)
}

/// One directory per attack: a curve and an image strip (rows are trace
/// points, columns are keys).
pub fn write_attacks(a: &mut Artifacts, attacks: &[AttackOutcome]) -> Result<(), CliError> {
    for (i, o) in attacks.iter().enumerate() {
        let dir = format!("attacks/{i:02}_{}", o.metrics.kind);
        let mut csv = String::from("at,accuracy,mean_ssim,ber_raw,ber_ecc\n");
        for p in &o.metrics.points {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                p.at,
                p.accuracy,
                opt(p.mean_ssim),
                opt(p.ber.map(|b| b.raw)),
                opt(p.ber.and_then(|b| b.ecc))
            ));
        }
        a.bytes(&format!("{dir}/curve.csv"), csv.as_bytes())?;
        let rows: Vec<Tensor> = o
            .trace
            .points
            .iter()
            .filter(|p| !p.images.is_empty())
            .map(|p| netpbm::hstack(&p.images))
            .collect::<inkwm::Result<_>>()
            .during(Phase::Output)?;
        if !rows.is_empty() {
            a.image(&format!("{dir}/strip"), &netpbm::vstack(&rows).during(Phase::Output)?)?;
        }
    }
    Ok(())
}
