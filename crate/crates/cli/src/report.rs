//! Serialized results. `metrics.json` holds [`RunMetrics`] and carries no
//! timings, so identical configs produce identical files.

use std::collections::BTreeMap;

use inkwm::payload::Ecc;
use serde::{Deserialize, Serialize};

use crate::config::AttackConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub model: ModelSummary,
    pub baseline: Option<BaselineMetrics>,
    pub hardening: Option<HardeningMetrics>,
    pub training: Vec<EpochMetrics>,
    pub final_accuracy: f64,
    pub extraction: Option<ExtractionMetrics>,
    pub attacks: Vec<AttackMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub preset: String,
    pub trainable_params: usize,
    /// Trainable parameters introduced by the transposed model. Always 0.
    pub transposed_extra_params: usize,
    pub added_dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    /// Test accuracy after each epoch.
    pub epoch_accuracy: Vec<f64>,
    pub accuracy: f64,
    /// SSIM of the owner's secrets in what the unwatermarked model extracts.
    pub unwatermarked_ssim: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardeningMetrics {
    pub steps: usize,
    pub reached_stop: bool,
    pub final_mean_ssim: f64,
    pub per_key_ssim: Vec<f64>,
    /// Main-task test accuracy right after hardening.
    pub accuracy_after: f64,
    /// `(step, best mean SSIM so far)`.
    pub trace: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce_loss: f64,
    pub wm_loss: Option<f64>,
    pub accuracy: f64,
    pub mean_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMetrics {
    pub per_key_ssim: Vec<f64>,
    pub mean_ssim: f64,
    pub mse: f64,
    pub payload: Option<PayloadMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadMetrics {
    pub data_bits: usize,
    /// Bits drawn into the images: the data, or its Hamming code.
    pub code_bits: usize,
    pub ecc: Ecc,
    pub bits_per_image: usize,
    pub images: usize,
    pub ber: BerPair,
}

/// `raw` compares the embedded bits, `ecc` the corrected data bits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerPair {
    pub raw: f64,
    pub ecc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub kind: String,
    pub config: AttackConfig,
    pub points: Vec<PointMetrics>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    /// Epoch, step, or pruning level in percent.
    pub at: usize,
    pub accuracy: f64,
    /// Absent when the model carries no watermark.
    pub mean_ssim: Option<f64>,
    pub per_key_ssim: Vec<f64>,
    pub ber: Option<BerPair>,
}

/// Wall-clock seconds per phase. Machine dependent, kept out of the metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub data_s: f64,
    pub baseline_train_s: Option<f64>,
    pub harden_s: Option<f64>,
    pub train_s: f64,
    pub extract_s: f64,
    pub attacks_s: f64,
    pub total_s: f64,
    /// `(train − baseline train) / baseline train`, in percent.
    pub training_overhead_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the resolved config, serialized as JSON.
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub timings: Timings,
    /// Paths relative to the output directory, sorted.
    pub files: Vec<String>,
    pub summary: BTreeMap<String, f64>,
}
