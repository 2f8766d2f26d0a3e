//! End-to-end experiment orchestration: data, backbone, detectors,
//! calibration, security curves, benchmarks, and a manifest that pins the
//! config hash and seed so every artifact is reproducible bit-exactly.

use crate::attack::SurrogateSpec;
use crate::backbone::{mlp_arch, train_backbone, NetworkModel};
use crate::config::{ArchitectureConfig, DatasetSpec, ExperimentConfig};
use crate::data::{load_csv, load_idx, synth_blobs, BlobSpec, Dataset};
use crate::defended::{
    calibrate_threshold, fit_stacked, load_bundle, save_bundle, Combiner, DefendedClassifier,
    StackedFitConfig,
};
use crate::detectors::fit_detector;
use crate::error::{Error, Result};
use crate::evaluation::{
    benchmark_prototypes, benchmark_to_csv, curves_to_csv, evaluate_curve, BenchmarkEntry,
    CurveSpec, EvalTarget, SecurityCurve, Setting,
};
use crate::rng::{fnv1a_hex, RngSeed};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub version: String,
    pub toolkit_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages_completed: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    pub artifacts: Vec<String>,
}

/// Deterministic train/calibration/test material shared by all stages.
pub struct ExperimentContext {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
    pub seed: RngSeed,
    pub backbone_train: Dataset,
    pub detector_train: Dataset,
    pub calibration: Dataset,
    pub test: Dataset,
    config_hash: String,
}

impl ExperimentContext {
    /// Load config + dataset and carve the disjoint splits. Validation
    /// failures surface before any compute.
    pub fn prepare(config_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(config_path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", config_path.display())))?;
        let cfg = ExperimentConfig::from_toml(&text)?;
        cfg.validate()?;
        let config_hash = fnv1a_hex(text.as_bytes());
        let seed = RngSeed(cfg.seed);
        let out_dir = cfg.resolved_output_dir();

        let mut dataset = match &cfg.dataset {
            DatasetSpec::IdxPair { images, labels } => load_idx(images, labels)?,
            DatasetSpec::Csv { path } => load_csv(path)?,
            DatasetSpec::SynthBlobs {
                centers,
                sigma,
                samples_per_class,
            } => synth_blobs(
                &BlobSpec {
                    centers: centers.clone(),
                    sigma: *sigma,
                    samples_per_class: *samples_per_class,
                },
                seed,
            )?,
        };
        if dataset.len() < cfg.splits.total() {
            return Err(Error::config(format!(
                "splits need {} samples, dataset has {}",
                cfg.splits.total(),
                dataset.len()
            )));
        }
        dataset.shuffle(seed);
        let parts = dataset.split(&[
            cfg.splits.backbone_train,
            cfg.splits.detector_train,
            cfg.splits.calibration,
            cfg.splits.test,
        ])?;
        let mut it = parts.into_iter();
        Ok(Self {
            out_dir,
            seed,
            backbone_train: it.next().unwrap(),
            detector_train: it.next().unwrap(),
            calibration: it.next().unwrap(),
            test: it.next().unwrap(),
            config_hash,
            cfg,
        })
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.out_dir.join("backbone.model")
    }

    pub fn surrogate_path(&self) -> PathBuf {
        self.out_dir.join("surrogate.model")
    }

    pub fn arch_dir(&self, name: &str) -> PathBuf {
        self.out_dir.join(format!("arch_{name}"))
    }

    pub fn bundle_path(&self, name: &str) -> PathBuf {
        self.arch_dir(name).join("bundle.txt")
    }

    /// Train the backbone on its split and persist it.
    pub fn stage_backbone(&self) -> Result<NetworkModel> {
        let arch = mlp_arch(
            self.backbone_train.dim(),
            &self.cfg.backbone.hidden,
            self.backbone_train.class_count,
        );
        let model = train_backbone(
            &self.backbone_train.features,
            &self.backbone_train.labels,
            arch,
            &self.cfg.backbone.train_config(),
            self.seed.derive("backbone"),
        )?;
        std::fs::create_dir_all(&self.out_dir)?;
        crate::backbone::save_model(&model, &self.backbone_path())?;
        Ok(model)
    }

    /// Train the attacker's surrogate on its slice of the backbone split.
    pub fn stage_surrogate(&self) -> Result<NetworkModel> {
        let n = self.cfg.blackbox.surrogate_train;
        let arch = mlp_arch(
            self.backbone_train.dim(),
            &self.cfg.blackbox.surrogate_hidden,
            self.backbone_train.class_count,
        );
        let model = train_backbone(
            &self.backbone_train.features[..n],
            &self.backbone_train.labels[..n],
            arch,
            &self.cfg.backbone.train_config(),
            self.seed.derive("blackbox-surrogate"),
        )?;
        std::fs::create_dir_all(&self.out_dir)?;
        crate::backbone::save_model(&model, &self.surrogate_path())?;
        Ok(model)
    }

    /// Fit one architecture's detectors (stacked when multi-layer), leaving
    /// the threshold at 0 until calibration.
    pub fn fit_architecture(
        &self,
        backbone: &NetworkModel,
        arch: &ArchitectureConfig,
    ) -> Result<DefendedClassifier> {
        let conv = self.cfg.kernel_convention;
        let seed = self.seed.derive(&format!("arch-{}", arch.name));
        let (detectors, combiner) = if arch.taps.len() == 1 {
            let tap = &arch.taps[0];
            let zs: Vec<Vec<f64>> = self
                .detector_train
                .features
                .iter()
                .map(|x| {
                    let t = backbone.forward_with_taps(x)?;
                    Ok(match tap.as_str() {
                        crate::backbone::TAP_INPUT => x.clone(),
                        crate::backbone::TAP_LOGITS => t.logits,
                        _ => t
                            .taps
                            .get(tap)
                            .cloned()
                            .ok_or_else(|| Error::UnknownTap(tap.clone()))?,
                    })
                })
                .collect::<Result<_>>()?;
            let det = fit_detector(
                &arch.detectors[0],
                &zs,
                &self.detector_train.labels,
                self.detector_train.class_count,
                conv,
                seed,
            )?;
            (vec![det], Combiner::Identity)
        } else {
            let combiner_spec = arch
                .combiner
                .as_ref()
                .ok_or_else(|| Error::config("multi-layer architecture needs a combiner"))?;
            let stack_cfg = StackedFitConfig {
                folds: arch.folds,
                joint_finetune_epochs: arch.joint_finetune_epochs,
                joint_finetune_lr: arch.joint_finetune_lr,
                joint_finetune_batch: 128,
            };
            fit_stacked(
                backbone,
                &arch.taps,
                &arch.detectors,
                combiner_spec,
                &self.detector_train.features,
                &self.detector_train.labels,
                &stack_cfg,
                conv,
                seed,
            )?
        };
        DefendedClassifier::new(
            backbone.clone(),
            arch.taps.clone(),
            detectors,
            combiner,
            0.0,
            0.0,
        )
    }

    /// Calibrate the rejection threshold on the clean calibration split and
    /// persist the finished bundle.
    pub fn calibrate_and_save(&self, mut dc: DefendedClassifier, name: &str) -> Result<DefendedClassifier> {
        let cal = calibrate_threshold(
            &dc,
            &self.calibration.features,
            self.cfg.calibration.target_reject_rate,
        )?;
        dc.theta = cal.theta;
        save_bundle(&dc, &self.arch_dir(name))?;
        Ok(dc)
    }

    pub fn load_architecture(&self, name: &str) -> Result<DefendedClassifier> {
        load_bundle(&self.bundle_path(name))
    }

    fn curve_spec(&self, setting: Setting) -> CurveSpec {
        CurveSpec {
            grid: self.cfg.attack.grid.clone(),
            setting,
            runs: self.cfg.runs,
            samples_per_run: self.cfg.attack.samples_per_run,
            attack: self.cfg.attack.attack_config(),
            smoothing: SurrogateSpec {
                gamma_scale: self.cfg.attack.gamma_scale,
            },
        }
    }

    /// Security curve for one target under the given setting.
    pub fn run_curve(
        &self,
        target: EvalTarget,
        setting: Setting,
        surrogate: Option<&NetworkModel>,
    ) -> Result<SecurityCurve> {
        evaluate_curve(
            target,
            &self.test.features,
            &self.test.labels,
            &self.curve_spec(setting),
            surrogate,
            self.seed.derive("curves"),
        )
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }
}

/// Outcome of a full pipeline run.
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
}

/// Full pipeline: backbone, detectors, calibration, curves, benchmark,
/// manifest. Any stage failure still writes the manifest (recording the
/// failed stage) and preserves partial artifacts.
pub fn run_experiment(config_path: &Path) -> Result<ExperimentOutcome> {
    let ctx = ExperimentContext::prepare(config_path)?;
    std::fs::create_dir_all(&ctx.out_dir)?;
    let mut manifest = Manifest {
        version: "1".to_string(),
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: ctx.config_hash().to_string(),
        seed: ctx.cfg.seed,
        ..Manifest::default()
    };

    let outcome = run_stages(&ctx, &mut manifest);
    if let Err(err) = &outcome {
        if let Error::Stage { stage, .. } = err {
            manifest.failed_stage = Some(stage.clone());
        }
    }
    let manifest_path = ctx.out_dir.join("manifest.toml");
    let manifest_text = toml::to_string(&manifest)
        .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest_path, manifest_text)?;
    outcome?;
    Ok(ExperimentOutcome {
        out_dir: ctx.out_dir,
        manifest,
    })
}

fn stage<T>(name: &str, manifest: &mut Manifest, f: impl FnOnce() -> Result<T>) -> Result<T> {
    eprintln!("[stage] {name}");
    let out = f().map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })?;
    manifest.stages_completed.push(name.to_string());
    Ok(out)
}

fn run_stages(ctx: &ExperimentContext, manifest: &mut Manifest) -> Result<()> {
    let backbone = stage("backbone", manifest, || ctx.stage_backbone())?;
    manifest.artifacts.push("backbone.model".to_string());

    let surrogate = if ctx.cfg.blackbox.enabled {
        let m = stage("surrogate", manifest, || ctx.stage_surrogate())?;
        manifest.artifacts.push("surrogate.model".to_string());
        Some(m)
    } else {
        None
    };

    let mut defended: Vec<(String, DefendedClassifier)> = Vec::new();
    for arch in &ctx.cfg.architectures {
        let dc = stage(&format!("detectors:{}", arch.name), manifest, || {
            ctx.fit_architecture(&backbone, arch)
        })?;
        let dc = stage(&format!("calibrate:{}", arch.name), manifest, || {
            ctx.calibrate_and_save(dc, &arch.name)
        })?;
        manifest
            .artifacts
            .push(format!("arch_{}/bundle.txt", arch.name));
        defended.push((arch.name.clone(), dc));
    }

    // white-box curves for the undefended baseline and every architecture
    let white = stage("curves:white_box", manifest, || {
        let mut curves: Vec<(String, SecurityCurve)> = Vec::new();
        curves.push((
            "undefended".to_string(),
            ctx.run_curve(EvalTarget::Undefended(&backbone), Setting::WhiteBox, None)?,
        ));
        for (name, dc) in &defended {
            curves.push((
                name.clone(),
                ctx.run_curve(EvalTarget::Defended(dc), Setting::WhiteBox, None)?,
            ));
        }
        Ok(curves)
    })?;
    let rows: Vec<(String, &SecurityCurve)> =
        white.iter().map(|(n, c)| (n.clone(), c)).collect();
    std::fs::write(ctx.out_dir.join("curves_white_box.csv"), curves_to_csv(&rows))?;
    manifest.artifacts.push("curves_white_box.csv".to_string());

    if let Some(sur) = &surrogate {
        let black = stage("curves:black_box", manifest, || {
            let mut curves: Vec<(String, SecurityCurve)> = Vec::new();
            curves.push((
                "undefended".to_string(),
                ctx.run_curve(EvalTarget::Undefended(&backbone), Setting::BlackBox, Some(sur))?,
            ));
            for (name, dc) in &defended {
                curves.push((
                    name.clone(),
                    ctx.run_curve(EvalTarget::Defended(dc), Setting::BlackBox, Some(sur))?,
                ));
            }
            Ok(curves)
        })?;
        let rows: Vec<(String, &SecurityCurve)> =
            black.iter().map(|(n, c)| (n.clone(), c)).collect();
        std::fs::write(ctx.out_dir.join("curves_black_box.csv"), curves_to_csv(&rows))?;
        manifest.artifacts.push("curves_black_box.csv".to_string());
    }

    if ctx.cfg.benchmark.enabled {
        let report = stage("benchmark", manifest, || {
            let entries: Vec<BenchmarkEntry> = ctx
                .cfg
                .architectures
                .iter()
                .map(|arch| {
                    let dc = defended
                        .iter()
                        .find(|(n, _)| n == &arch.name)
                        .map(|(_, dc)| dc)
                        .expect("architecture fitted");
                    BenchmarkEntry {
                        name: arch.name.clone(),
                        dc,
                        reference: arch.reference.clone(),
                    }
                })
                .collect();
            benchmark_prototypes(
                &entries,
                &ctx.test.features,
                &ctx.test.labels,
                ctx.cfg.benchmark.latency_evals,
            )
        })?;
        std::fs::write(ctx.out_dir.join("benchmark.csv"), benchmark_to_csv(&report))?;
        manifest.artifacts.push("benchmark.csv".to_string());
    }

    Ok(())
}
