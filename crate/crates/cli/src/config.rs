//! TOML experiment configuration.
//!
//! Relative paths inside a config resolve against the directory of the config
//! file. `out_dir` resolves against the working directory.

use std::path::{Path, PathBuf};

use inkwm::attack::{KeySource, SecretSource};
use inkwm::data::Split;
use inkwm::optim::OptimizerKind;
use inkwm::payload::{DotCodeLayout, Ecc};
use inkwm::watermark::{font, DEFAULT_MAX_HARDENING_STEPS, DEFAULT_SSIM_STOP, DEFAULT_TEXTS};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed. Every other seed not given explicitly is derived from it.
    pub seed: u64,
    /// Defaults to `runs/<name>`.
    #[serde(default)]
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub watermark: WatermarkConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default, rename = "attack")]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub capacity: CapacityConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `default_cnn`, `cnn_bn`, `fc_only` or `tiny_residual`.
    pub preset: String,
    /// Conv widths of `default_cnn`.
    #[serde(default)]
    pub channels: Option<[usize; 2]>,
    #[serde(default)]
    pub kernel: Option<usize>,
    #[serde(default = "default_added_dropout")]
    pub added_dropout: f64,
    /// Plain training epochs before residual branches are frozen.
    #[serde(default = "three")]
    pub warmup_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// IDX or CIFAR-10 binary directory. MNIST defaults to `$INKWM_MNIST_DIR`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Training samples kept per class (first in file order).
    #[serde(default)]
    pub per_class: Option<usize>,
    #[serde(default)]
    pub test_per_class: Option<usize>,
    /// Synthetic only.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Synthetic only, `[C, H, W]`.
    #[serde(default)]
    pub dims: Option<[usize; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecretKind {
    #[default]
    Text,
    Files,
    Dotcode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Defaults to 1 for text secrets; implied by the file or payload otherwise.
    #[serde(default)]
    pub n_keys: Option<usize>,
    #[serde(default)]
    pub key_seed: Option<u64>,
    /// Reuse existing keys instead of drawing new ones.
    #[serde(default)]
    pub keys_file: Option<PathBuf>,
    #[serde(default)]
    pub secret: SecretKind,
    #[serde(default)]
    pub texts: Option<Vec<String>>,
    #[serde(default)]
    pub files: Option<Vec<PathBuf>>,
    /// Dot-code payload from a file's bytes...
    #[serde(default)]
    pub payload_file: Option<PathBuf>,
    /// ...or this many random bits.
    #[serde(default)]
    pub payload_bits: Option<usize>,
    #[serde(default)]
    pub payload_seed: Option<u64>,
    #[serde(default)]
    pub bits_per_image: Option<usize>,
    #[serde(default)]
    pub ecc: Ecc,
    #[serde(default = "default_ssim_stop")]
    pub ssim_stop: f64,
    #[serde(default = "default_max_steps")]
    pub max_hardening_steps: usize,
    #[serde(default = "one_f")]
    pub ssim_weight: f64,
    #[serde(default = "one_f")]
    pub mse_weight: f64,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        WatermarkConfig {
            enabled: true,
            n_keys: None,
            key_seed: None,
            keys_file: None,
            secret: SecretKind::Text,
            texts: None,
            files: None,
            payload_file: None,
            payload_bits: None,
            payload_seed: None,
            bits_per_image: None,
            ecc: Ecc::None,
            ssim_stop: DEFAULT_SSIM_STOP,
            max_hardening_steps: DEFAULT_MAX_HARDENING_STEPS,
            ssim_weight: 1.0,
            mse_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "adam")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "adam")]
    pub wm_optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub wm_lr: f64,
    /// Defaults to [`DEFAULT_HARDENING_LR`].
    #[serde(default)]
    pub hardening_lr: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Also train an unwatermarked model from the same initialization.
    #[serde(default = "yes")]
    pub baseline: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: OptimizerKind::Adam,
            lr: default_lr(),
            wm_optimizer: OptimizerKind::Adam,
            wm_lr: default_lr(),
            hardening_lr: None,
            epochs: default_epochs(),
            batch_size: default_batch(),
            baseline: true,
        }
    }
}

impl TrainingConfig {
    pub fn hardening_lr(&self) -> f64 {
        self.hardening_lr.unwrap_or(DEFAULT_HARDENING_LR)
    }
}

/// Every attack runs on its own copy of the watermarked model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackConfig {
    FineTune {
        #[serde(default = "train_split")]
        data: Split,
        /// Multiplies `training.lr`.
        #[serde(default = "one_f")]
        lr_factor: f64,
        #[serde(default = "four")]
        epochs: usize,
    },
    Prune {
        #[serde(default = "default_levels")]
        levels: Vec<f64>,
    },
    FinePrune {
        #[serde(default = "train_split")]
        data: Split,
        #[serde(default = "one_f")]
        lr_factor: f64,
        #[serde(default = "one")]
        epochs: usize,
        level: f64,
    },
    Erase {
        keys: KeySource,
        secrets: SecretSource,
        #[serde(default = "one")]
        n_keys: usize,
        #[serde(default = "default_adv_steps")]
        steps: usize,
        /// Defaults to the hardening rate.
        #[serde(default)]
        lr: Option<f64>,
        #[serde(default)]
        stop_below: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
    Overwrite {
        /// Text of the adversary's secrets, one key each.
        #[serde(default = "default_overwrite_texts")]
        texts: Vec<String>,
        #[serde(default = "default_adv_steps")]
        steps: usize,
        #[serde(default)]
        lr: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
    CrossDataset {
        dataset: DatasetConfig,
        #[serde(default = "four")]
        epochs: usize,
        #[serde(default)]
        lr: Option<f64>,
    },
}

impl AttackConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            AttackConfig::FineTune { .. } => "fine_tune",
            AttackConfig::Prune { .. } => "prune",
            AttackConfig::FinePrune { .. } => "fine_prune",
            AttackConfig::Erase { .. } => "erase",
            AttackConfig::Overwrite { .. } => "overwrite",
            AttackConfig::CrossDataset { .. } => "cross_dataset",
        }
    }
}

/// Fine-tuning applied by the `capacity` command when no attack is listed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    #[serde(default = "tenth")]
    pub lr_factor: f64,
    #[serde(default = "four")]
    pub epochs: usize,
    #[serde(default = "train_split")]
    pub data: Split,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig { lr_factor: tenth(), epochs: four(), data: Split::Train }
    }
}

fn one() -> usize {
    1
}
fn three() -> usize {
    3
}
fn four() -> usize {
    4
}
fn one_f() -> f64 {
    1.0
}
fn tenth() -> f64 {
    0.1
}
fn yes() -> bool {
    true
}
fn adam() -> OptimizerKind {
    OptimizerKind::Adam
}
fn train_split() -> Split {
    Split::Train
}
pub const DEFAULT_HARDENING_LR: f64 = 1e-3;

fn default_lr() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    64
}
fn default_added_dropout() -> f64 {
    inkwm::graph::DEFAULT_ADDED_DROPOUT
}
fn default_ssim_stop() -> f64 {
    DEFAULT_SSIM_STOP
}
fn default_max_steps() -> usize {
    DEFAULT_MAX_HARDENING_STEPS
}
fn default_adv_steps() -> usize {
    25
}
fn default_levels() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}
fn default_overwrite_texts() -> Vec<String> {
    vec!["MINE".into()]
}

/// Command-line overrides, applied before validation.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Total training samples, split evenly over the classes.
    pub subset: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.out_dir.as_os_str().is_empty() {
            cfg.out_dir = Path::new("runs").join(&cfg.name);
        }
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    /// Reads, overrides and validates a config file.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_toml(&text, base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(n) = o.subset {
            let classes = self.dataset.classes.unwrap_or(10).max(1);
            self.dataset.per_class = Some(n.div_ceil(classes));
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix_dataset(&mut self.dataset, &fix);
        let wm = &mut self.watermark;
        wm.keys_file.iter_mut().for_each(fix);
        wm.payload_file.iter_mut().for_each(fix);
        wm.files.iter_mut().flatten().for_each(fix);
        for a in &mut self.attacks {
            if let AttackConfig::CrossDataset { dataset, .. } = a {
                fix_dataset(dataset, &fix);
            }
        }
    }

    /// Sample shape `[C, H, W]` of the configured dataset.
    pub fn input_dims(&self) -> [usize; 3] {
        self.dataset.dims()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.name.trim().is_empty() {
            return bad("name must not be empty".into());
        }
        if inkwm::graph::ModelSpec::preset(&self.model.preset, [1, 28, 28], 10).is_err() {
            return bad(format!("model.preset: unknown preset `{}`", self.model.preset));
        }
        if (self.model.channels.is_some() || self.model.kernel.is_some()) && self.model.preset != "default_cnn" {
            return bad("model.channels and model.kernel only apply to default_cnn".into());
        }
        if let Some(k) = self.model.kernel {
            if k % 2 == 0 {
                return bad(format!("model.kernel must be odd, got {k}"));
            }
        }
        if !(0.0..1.0).contains(&self.model.added_dropout) {
            return bad(format!("model.added_dropout must be in [0, 1), got {}", self.model.added_dropout));
        }
        self.dataset.validate("dataset")?;
        self.spec().map_err(|e| CliError::Config(format!("model: {e}")))?;
        let t = &self.training;
        for (k, v) in [("training.lr", t.lr), ("training.wm_lr", t.wm_lr), ("training.hardening_lr", t.hardening_lr())] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if t.batch_size == 0 {
            return bad("training.batch_size must be positive".into());
        }
        if self.watermark.enabled {
            self.validate_watermark()?;
        } else if self.attacks.iter().any(|a| !matches!(a, AttackConfig::FineTune { .. } | AttackConfig::Prune { .. } | AttackConfig::FinePrune { .. })) {
            return bad("adversarial and cross-dataset attacks need an enabled watermark".into());
        }
        for (i, a) in self.attacks.iter().enumerate() {
            let ctx = format!("attack[{i}] ({})", a.kind());
            match a {
                AttackConfig::FineTune { lr_factor, .. } | AttackConfig::FinePrune { lr_factor, .. } if !(*lr_factor > 0.0) => {
                    return bad(format!("{ctx}: lr_factor must be positive"));
                }
                AttackConfig::Prune { levels } if levels.is_empty() || levels.iter().any(|l| !(0.0..1.0).contains(l)) => {
                    return bad(format!("{ctx}: levels must be non-empty and in [0, 1)"));
                }
                AttackConfig::FinePrune { level, .. } if !(0.0..1.0).contains(level) => {
                    return bad(format!("{ctx}: level must be in [0, 1)"));
                }
                AttackConfig::Erase { n_keys, keys, steps, lr, .. } => {
                    if *n_keys == 0 || *steps == 0 {
                        return bad(format!("{ctx}: n_keys and steps must be positive"));
                    }
                    if *keys == KeySource::Embedded && *n_keys > self.n_keys() {
                        return bad(format!("{ctx}: {n_keys} embedded keys requested, the watermark has {}", self.n_keys()));
                    }
                    check_opt_lr(&ctx, *lr)?;
                }
                AttackConfig::Overwrite { texts, steps, lr, .. } => {
                    if texts.is_empty() || *steps == 0 {
                        return bad(format!("{ctx}: texts and steps must be non-empty"));
                    }
                    for text in texts {
                        font::render_text(text, self.input_dims()).map_err(|e| CliError::Config(format!("{ctx}: {e}")))?;
                    }
                    check_opt_lr(&ctx, *lr)?;
                }
                AttackConfig::CrossDataset { dataset, lr, .. } => {
                    dataset.validate(&format!("{ctx}.dataset"))?;
                    if dataset.dims() != self.input_dims() {
                        return bad(format!("{ctx}: dataset dims {:?} differ from the model input {:?}", dataset.dims(), self.input_dims()));
                    }
                    check_opt_lr(&ctx, *lr)?;
                }
                _ => {}
            }
        }
        if !(self.capacity.lr_factor > 0.0) {
            return bad("capacity.lr_factor must be positive".into());
        }
        Ok(())
    }

    fn validate_watermark(&self) -> Result<(), CliError> {
        let wm = &self.watermark;
        let bad = |m: String| Err(CliError::Config(format!("watermark: {m}")));
        if !(wm.ssim_stop > -1.0 && wm.ssim_stop <= 1.0) {
            return bad(format!("ssim_stop must be in (-1, 1], got {}", wm.ssim_stop));
        }
        if wm.ssim_weight < 0.0 || wm.mse_weight < 0.0 || wm.ssim_weight + wm.mse_weight == 0.0 {
            return bad("loss weights must be non-negative and not both zero".into());
        }
        if wm.n_keys == Some(0) {
            return bad("n_keys must be positive".into());
        }
        let dims = self.input_dims();
        match wm.secret {
            SecretKind::Text => {
                if let Some(texts) = &wm.texts {
                    if texts.is_empty() {
                        return bad("texts must not be empty".into());
                    }
                }
                for t in self.secret_texts() {
                    font::render_text(&t, dims).map_err(|e| CliError::Config(format!("watermark text {t:?}: {e}")))?;
                }
            }
            SecretKind::Files => {
                let files = wm.files.as_deref().unwrap_or_default();
                if files.is_empty() {
                    return bad("secret = \"files\" needs a non-empty files list".into());
                }
                for f in files {
                    require_file(f, "watermark.files")?;
                }
                if wm.n_keys.is_some_and(|n| n != files.len()) {
                    return bad(format!("n_keys = {} but {} secret files", wm.n_keys.unwrap_or(0), files.len()));
                }
            }
            SecretKind::Dotcode => {
                match (&wm.payload_file, wm.payload_bits) {
                    (Some(_), Some(_)) | (None, None) => return bad("dotcode needs exactly one of payload_file and payload_bits".into()),
                    (Some(f), None) => {
                        require_file(f, "watermark.payload_file")?;
                        if std::fs::metadata(f).map(|m| m.len()).unwrap_or(0) == 0 {
                            return bad(format!("payload file {} is empty", f.display()));
                        }
                    }
                    (None, Some(0)) => return bad("payload_bits must be positive".into()),
                    _ => {}
                }
                if wm.bits_per_image == Some(0) {
                    return bad("bits_per_image must be positive".into());
                }
                DotCodeLayout::new(self.bits_per_image(), dims).map_err(|e| CliError::Config(format!("watermark: {e}")))?;
                if let Some(n) = wm.n_keys {
                    if let Some(bits) = self.code_bits_hint() {
                        let need = bits.div_ceil(self.bits_per_image());
                        if n != need {
                            return bad(format!("n_keys = {n} but the payload needs {need} images"));
                        }
                    }
                }
            }
        }
        if let Some(f) = &wm.keys_file {
            require_file(f, "watermark.keys_file")?;
            let keys = inkwm::watermark::load_keys(f).map_err(|e| CliError::Config(format!("watermark.keys_file: {e}")))?;
            let classes = self.classes();
            if let Some(k) = keys.iter().find(|k| k.width() != classes) {
                return bad(format!("keys_file has a key of width {}, the model has {classes} outputs", k.width()));
            }
            if keys.len() < self.n_keys() {
                return bad(format!("keys_file has {} keys, {} needed", keys.len(), self.n_keys()));
            }
        }
        Ok(())
    }

    /// Number of output classes of the main task.
    pub fn classes(&self) -> usize {
        self.dataset.classes()
    }

    pub fn bits_per_image(&self) -> usize {
        self.watermark.bits_per_image.unwrap_or(inkwm::payload::BITS_PER_IMAGE)
    }

    /// Embedded bit count when known without reading the payload file.
    fn code_bits_hint(&self) -> Option<usize> {
        let data = match (&self.watermark.payload_file, self.watermark.payload_bits) {
            (_, Some(b)) => b,
            (Some(f), None) => std::fs::metadata(f).ok()?.len() as usize * 8,
            (None, None) => return None,
        };
        Some(match self.watermark.ecc {
            Ecc::None => data,
            Ecc::Hamming74 => data.div_ceil(4) * 7,
        })
    }

    /// Number of key/secret pairs.
    pub fn n_keys(&self) -> usize {
        let wm = &self.watermark;
        match wm.secret {
            SecretKind::Text => wm.n_keys.unwrap_or(1),
            SecretKind::Files => wm.files.as_ref().map_or(0, Vec::len),
            SecretKind::Dotcode => self.code_bits_hint().map_or(1, |b| b.div_ceil(self.bits_per_image())),
        }
    }

    /// Text of every secret, cycling `texts` (or the defaults) over the keys.
    pub fn secret_texts(&self) -> Vec<String> {
        let pool: Vec<String> = match &self.watermark.texts {
            Some(t) => t.clone(),
            None => DEFAULT_TEXTS.iter().map(|s| s.to_string()).collect(),
        };
        (0..self.n_keys()).map(|i| pool[i % pool.len()].clone()).collect()
    }

    pub fn spec(&self) -> inkwm::Result<inkwm::graph::ModelSpec> {
        let (input, classes) = (self.input_dims(), self.classes());
        let spec = match (self.model.preset.as_str(), self.model.channels, self.model.kernel) {
            ("default_cnn", ch, k) if ch.is_some() || k.is_some() => {
                inkwm::graph::ModelSpec::cnn(input, classes, ch.unwrap_or([16, 32]), k.unwrap_or(5))
            }
            (name, _, _) => inkwm::graph::ModelSpec::preset(name, input, classes)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn fix_dataset(d: &mut DatasetConfig, fix: &impl Fn(&mut PathBuf)) {
    d.dir.iter_mut().for_each(fix);
}

fn check_opt_lr(ctx: &str, lr: Option<f64>) -> Result<(), CliError> {
    match lr {
        Some(v) if !(v > 0.0 && v.is_finite()) => Err(CliError::Config(format!("{ctx}: lr must be positive, got {v}"))),
        _ => Ok(()),
    }
}

fn require_file(p: &Path, what: &str) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what}: {} does not exist", p.display())))
    }
}

pub const MNIST_FILES: [&str; 4] = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
pub const CIFAR_FILES: [&str; 6] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"];

impl DatasetConfig {
    pub fn dims(&self) -> [usize; 3] {
        match self.source {
            DataSource::Mnist => [1, 28, 28],
            DataSource::Cifar10 => [3, 32, 32],
            DataSource::Synthetic => self.dims.unwrap_or([1, 28, 28]),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes.unwrap_or(10)
    }

    /// Data directory, falling back to the MNIST default.
    pub fn data_dir(&self) -> Option<PathBuf> {
        match (&self.dir, self.source) {
            (Some(d), _) => Some(d.clone()),
            (None, DataSource::Mnist) => Some(inkwm::data::mnist_dir()),
            (None, _) => None,
        }
    }

    fn validate(&self, ctx: &str) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(format!("{ctx}: {m}")));
        if self.per_class == Some(0) || self.test_per_class == Some(0) {
            return bad("per_class and test_per_class must be positive".into());
        }
        match self.source {
            DataSource::Synthetic => {
                if self.dir.is_some() {
                    return bad("synthetic data takes no dir".into());
                }
                if self.classes == Some(0) {
                    return bad("classes must be positive".into());
                }
            }
            DataSource::Mnist | DataSource::Cifar10 => {
                if self.dims.is_some() {
                    return bad("dims only apply to synthetic data".into());
                }
                if self.classes.is_some_and(|c| c == 0 || c > 10) {
                    return bad("classes must be in 1..=10".into());
                }
                let Some(dir) = self.data_dir() else {
                    return bad("cifar10 needs dir".into());
                };
                let files: &[&str] = if self.source == DataSource::Mnist { &MNIST_FILES } else { &CIFAR_FILES };
                for f in files {
                    require_file(&dir.join(f), ctx)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
seed = 3
out_dir = "out"
[model]
preset = "default_cnn"
[dataset]
source = "synthetic"
classes = 4
dims = [1, 24, 24]
"#;

    fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        let cfg = ExperimentConfig::from_toml(text, Path::new("/base"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.n_keys(), 1);
        assert_eq!(cfg.training.batch_size, 64);
        assert_eq!(cfg.training.hardening_lr(), DEFAULT_HARDENING_LR);
        assert_eq!(cfg.watermark.max_hardening_steps, 10_000);
        assert_eq!(cfg.secret_texts(), vec!["ABCD"]);
        assert_eq!(cfg.spec().unwrap().output_dim, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse(&format!("{MINIMAL}\n[training]\nlearning_rate = 0.1\n")).unwrap_err();
        assert!(matches!(e, CliError::Config(ref m) if m.contains("learning_rate")), "{e}");
        assert!(parse(&MINIMAL.replace("seed = 3", "seeed = 3")).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        let e = parse(&MINIMAL.replace("seed = 3\n", "")).unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn missing_files_fail_validation() {
        let text = format!("{MINIMAL}\n[watermark]\nkeys_file = \"nope.txt\"\n");
        assert!(parse(&text).unwrap_err().to_string().contains("/base/nope.txt"));
        let text = MINIMAL.replace("source = \"synthetic\"\nclasses = 4\ndims = [1, 24, 24]", "source = \"mnist\"\ndir = \"/definitely/missing\"");
        assert!(parse(&text).is_err());
    }

    #[test]
    fn infeasible_dotcode_layout() {
        let text = format!("{MINIMAL}\n[watermark]\nsecret = \"dotcode\"\npayload_bits = 900\nbits_per_image = 900\n");
        assert!(parse(&text).unwrap_err().to_string().contains("too large"));
        let text = format!("{MINIMAL}\n[watermark]\nsecret = \"dotcode\"\npayload_bits = 0\n");
        assert!(parse(&text).is_err());
    }

    #[test]
    fn dotcode_key_count_follows_payload() {
        let text = format!("{MINIMAL}\n[watermark]\nsecret = \"dotcode\"\npayload_bits = 250\nbits_per_image = 100\necc = \"hamming74\"\n");
        // 250 data bits -> 63 blocks -> 441 code bits -> 5 images
        assert_eq!(parse(&text).unwrap().n_keys(), 5);
    }

    #[test]
    fn attacks_parse_with_defaults() {
        let text = format!(
            "{MINIMAL}\n[[attack]]\nkind = \"prune\"\n\n[[attack]]\nkind = \"fine_tune\"\nlr_factor = 0.1\ndata = \"test\"\n\n[[attack]]\nkind = \"erase\"\nkeys = \"random\"\nsecrets = \"noise\"\n"
        );
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.attacks.len(), 3);
        assert!(matches!(&cfg.attacks[0], AttackConfig::Prune { levels } if levels.len() == 10));
        assert!(matches!(cfg.attacks[1], AttackConfig::FineTune { data: Split::Test, epochs: 4, .. }));
        let bad = format!("{MINIMAL}\n[[attack]]\nkind = \"prune\"\nlevel = 0.5\n");
        assert!(parse(&bad).is_err());
        let bad = format!("{MINIMAL}\n[[attack]]\nkind = \"melt\"\n");
        assert!(parse(&bad).is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = parse(MINIMAL).unwrap();
        cfg.apply(&Overrides { out_dir: Some("x".into()), seed: Some(9), subset: Some(10) });
        assert_eq!((cfg.seed, cfg.out_dir.as_path(), cfg.dataset.per_class), (9, Path::new("x"), Some(3)));
    }

    #[test]
    fn unrenderable_text_is_a_config_error() {
        let text = format!("{MINIMAL}\n[watermark]\ntexts = [\"A@B\"]\n");
        assert!(parse(&text).is_err());
    }
}
