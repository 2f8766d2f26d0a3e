//! Experiment configuration: structured text (TOML) with validation that
//! rejects bad splits, unknown taps, and missing files before any compute
//! starts.

use crate::attack::{AttackConfig, Norm};
use crate::backbone::TrainConfig;
use crate::detectors::DetectorSpec;
use crate::error::{Error, Result};
use crate::linalg::KernelConvention;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable overriding `output_dir`.
pub const OUT_DIR_ENV: &str = "ADVREJ_OUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    IdxPair {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
    },
    SynthBlobs {
        centers: Vec<Vec<f64>>,
        sigma: f64,
        samples_per_class: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Samples for backbone pre-training (the attacker's surrogate also
    /// trains on a slice of this split).
    pub backbone_train: usize,
    pub detector_train: usize,
    pub calibration: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.backbone_train + self.detector_train + self.calibration + self.test
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    50
}

impl BackboneConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
        }
    }
}

/// One defended architecture to build and evaluate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub name: String,
    pub taps: Vec<String>,
    /// One detector spec per tap, same order.
    pub detectors: Vec<DetectorSpec>,
    /// Required when more than one tap is inspected.
    pub combiner: Option<DetectorSpec>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// End-to-end fine-tuning epochs after the stage-wise stacked fit
    /// (all-RBF architectures only; 0 disables).
    #[serde(default)]
    pub joint_finetune_epochs: usize,
    #[serde(default = "default_finetune_lr")]
    pub joint_finetune_lr: f64,
    /// Benchmark reference architecture for the prototype-reduction ratio.
    #[serde(default)]
    pub reference: Option<String>,
}

fn default_folds() -> usize {
    3
}
fn default_finetune_lr() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationConfig {
    #[serde(default = "default_reject_rate")]
    pub target_reject_rate: f64,
}

fn default_reject_rate() -> f64 {
    0.10
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            target_reject_rate: default_reject_rate(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSection {
    pub grid: Vec<f64>,
    #[serde(default = "default_norm")]
    pub norm: Norm,
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    #[serde(default = "default_conv_tol")]
    pub conv_tol: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer_iters: usize,
    #[serde(default = "default_doublings")]
    pub doublings: usize,
    #[serde(default = "default_samples_per_run")]
    pub samples_per_run: usize,
    /// Gamma-smoothing factor for white-box gradients.
    #[serde(default = "default_gamma_scale")]
    pub gamma_scale: f64,
}

fn default_norm() -> Norm {
    Norm::L2
}
fn default_eta0() -> f64 {
    0.01
}
fn default_conv_tol() -> f64 {
    1e-6
}
fn default_max_outer() -> usize {
    1000
}
fn default_doublings() -> usize {
    10
}
fn default_samples_per_run() -> usize {
    200
}
fn default_gamma_scale() -> f64 {
    1.0
}

impl AttackSection {
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: 0.0,
            norm: self.norm,
            eta0: self.eta0,
            conv_tol: self.conv_tol,
            max_outer_iters: self.max_outer_iters,
            doublings: self.doublings,
            box_lo: 0.0,
            box_hi: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlackBoxConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_surrogate_hidden")]
    pub surrogate_hidden: Vec<usize>,
    /// Samples from the backbone-train split used as the attacker's data.
    #[serde(default = "default_surrogate_train")]
    pub surrogate_train: usize,
}

fn default_surrogate_hidden() -> Vec<usize> {
    vec![16, 16]
}
fn default_surrogate_train() -> usize {
    150
}

impl Default for BlackBoxConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            surrogate_hidden: default_surrogate_hidden(),
            surrogate_train: default_surrogate_train(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Timed evaluations for the warm latency protocol; 0 skips latency
    /// measurement keeping benchmark output fully deterministic.
    #[serde(default = "default_latency_evals")]
    pub latency_evals: usize,
}

fn default_true() -> bool {
    true
}
fn default_latency_evals() -> usize {
    1000
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            latency_evals: default_latency_evals(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub kernel_convention: KernelConvention,
    pub dataset: DatasetSpec,
    pub splits: SplitSpec,
    pub backbone: BackboneConfig,
    pub architectures: Vec<ArchitectureConfig>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    pub attack: AttackSection,
    #[serde(default)]
    pub blackbox: BlackBoxConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
}

fn default_runs() -> usize {
    5
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Output directory after the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var(OUT_DIR_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Tap labels the configured backbone exposes.
    pub fn known_taps(&self) -> Vec<String> {
        let mut taps = vec!["input".to_string()];
        for i in 0..self.backbone.hidden.len() {
            taps.push(format!("relu{}", i + 1));
        }
        taps.push("logits".to_string());
        taps
    }

    /// Reject bad splits, unknown taps, empty architectures, and missing
    /// dataset files before any training starts.
    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(Error::config("runs must be at least 1"));
        }
        if self.architectures.is_empty() {
            return Err(Error::config("at least one architecture is required"));
        }
        let mut names = std::collections::BTreeSet::new();
        let known = self.known_taps();
        for arch in &self.architectures {
            if !names.insert(arch.name.clone()) {
                return Err(Error::config(format!("duplicate architecture name `{}`", arch.name)));
            }
            if arch.taps.is_empty() {
                return Err(Error::config(format!("architecture `{}` has no taps", arch.name)));
            }
            if arch.taps.len() != arch.detectors.len() {
                return Err(Error::config(format!(
                    "architecture `{}`: {} taps but {} detector specs",
                    arch.name,
                    arch.taps.len(),
                    arch.detectors.len()
                )));
            }
            for tap in &arch.taps {
                if !known.contains(tap) {
                    return Err(Error::config(format!(
                        "architecture `{}`: unknown tap `{tap}` (known: {})",
                        arch.name,
                        known.join(", ")
                    )));
                }
            }
            if arch.taps.len() > 1 && arch.combiner.is_none() {
                return Err(Error::config(format!(
                    "architecture `{}` inspects {} layers and needs a combiner",
                    arch.name,
                    arch.taps.len()
                )));
            }
            if arch.taps.len() > 1 && arch.folds < 2 {
                return Err(Error::config(format!(
                    "architecture `{}`: stacked fitting needs at least 2 folds",
                    arch.name
                )));
            }
            if let Some(combiner) = &arch.combiner {
                if !combiner.is_differentiable() {
                    return Err(Error::config(format!(
                        "architecture `{}`: combiner must be svm_rbf or rbf_net",
                        arch.name
                    )));
                }
            }
            if arch.joint_finetune_epochs > 0 {
                let all_rbf = arch
                    .detectors
                    .iter()
                    .all(|d| matches!(d, DetectorSpec::RbfNet { .. }))
                    && matches!(arch.combiner, Some(DetectorSpec::RbfNet { .. }));
                if !all_rbf {
                    return Err(Error::config(format!(
                        "architecture `{}`: joint fine-tuning requires rbf_net detectors and combiner",
                        arch.name
                    )));
                }
            }
            if let Some(reference) = &arch.reference {
                if !self.architectures.iter().any(|a| &a.name == reference) {
                    return Err(Error::config(format!(
                        "architecture `{}`: unknown benchmark reference `{reference}`",
                        arch.name
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.calibration.target_reject_rate) {
            return Err(Error::config("target_reject_rate must be in [0, 1]"));
        }
        if self.attack.grid.first() != Some(&0.0)
            || !self.attack.grid.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::config(
                "attack grid must start at 0 and increase strictly",
            ));
        }
        if !(0.0..=1.0).contains(&self.attack.gamma_scale) || self.attack.gamma_scale == 0.0 {
            return Err(Error::config("gamma_scale must be in (0, 1]"));
        }
        match &self.dataset {
            DatasetSpec::IdxPair { images, labels } => {
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(Error::config(format!("dataset file missing: {}", p.display())));
                    }
                }
            }
            DatasetSpec::Csv { path } => {
                if !path.exists() {
                    return Err(Error::config(format!("dataset file missing: {}", path.display())));
                }
            }
            DatasetSpec::SynthBlobs {
                centers,
                sigma,
                samples_per_class,
            } => {
                if centers.len() < 2 || *sigma <= 0.0 || *samples_per_class < 1 {
                    return Err(Error::config("invalid blob parameters"));
                }
                let total = centers.len() * samples_per_class;
                if self.splits.total() > total {
                    return Err(Error::config(format!(
                        "splits need {} samples, blobs generate {total}",
                        self.splits.total()
                    )));
                }
            }
        }
        if self.blackbox.enabled && self.blackbox.surrogate_train > self.splits.backbone_train {
            return Err(Error::config(
                "surrogate_train cannot exceed the backbone_train split",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_toml() -> String {
        r#"
seed = 42
runs = 2
output_dir = "out"

[dataset]
source = "synth_blobs"
centers = [[0.25, 0.25], [0.75, 0.25], [0.5, 0.72]]
sigma = 0.04
samples_per_class = 300

[splits]
backbone_train = 300
detector_train = 300
calibration = 150
test = 150

[backbone]
hidden = [16, 16]
epochs = 40

[[architectures]]
name = "nr"
taps = ["logits"]

[[architectures.detectors]]
kind = "svm_rbf"
c = 1.0

[attack]
grid = [0.0, 0.2, 0.4]
"#
        .to_string()
    }

    #[test]
    fn toy_config_parses_and_validates() {
        let cfg = ExperimentConfig::from_toml(&toy_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.runs, 2);
        assert_eq!(cfg.architectures[0].name, "nr");
        assert_eq!(cfg.known_taps(), vec!["input", "relu1", "relu2", "logits"]);
    }

    #[test]
    fn unknown_tap_is_rejected_before_compute() {
        let bad = toy_toml().replace("taps = [\"logits\"]", "taps = [\"relu9\"]");
        let cfg = ExperimentConfig::from_toml(&bad).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn oversized_splits_are_rejected() {
        let bad = toy_toml().replace("test = 150", "test = 100000");
        let cfg = ExperimentConfig::from_toml(&bad).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_dataset_file_is_rejected() {
        let bad = r#"
seed = 1
output_dir = "out"
[dataset]
source = "idx_pair"
images = "/nonexistent/images"
labels = "/nonexistent/labels"
[splits]
backbone_train = 10
detector_train = 10
calibration = 5
test = 5
[backbone]
hidden = [4]
[[architectures]]
name = "nr"
taps = ["logits"]
[[architectures.detectors]]
kind = "knn"
k = 3
[attack]
grid = [0.0, 0.1]
"#;
        let cfg = ExperimentConfig::from_toml(bad).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn multi_tap_without_combiner_is_rejected() {
        let bad = toy_toml().replace(
            "taps = [\"logits\"]",
            "taps = [\"relu1\", \"logits\"]",
        );
        // still only one detector spec -> also caught, but combiner check
        // fires for the tap/detector count first
        let cfg = ExperimentConfig::from_toml(&bad).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_dir_env_override() {
        let cfg = ExperimentConfig::from_toml(&toy_toml()).unwrap();
        std::env::set_var(OUT_DIR_ENV, "/tmp/advrej-override");
        assert_eq!(cfg.resolved_output_dir(), PathBuf::from("/tmp/advrej-override"));
        std::env::remove_var(OUT_DIR_ENV);
        assert_eq!(cfg.resolved_output_dir(), PathBuf::from("out"));
    }
}
