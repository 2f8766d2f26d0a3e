use advrej::attack::{
    attack_log_header, attack_log_row, pgd_line_search, AttackConfig, AttackLogRecord, Norm,
    SurrogateSpec,
};
use advrej::backbone::{load_model, save_model_as, ModelFormat};
use advrej::data::load_csv;
use advrej::defended::{calibrate_threshold, load_bundle, save_bundle};
use advrej::error::Error;
use advrej::evaluation::{benchmark_prototypes, benchmark_to_csv, curves_to_csv, BenchmarkEntry, EvalTarget, Setting};
use advrej::experiment::{run_experiment, ExperimentContext};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "advrej",
    version,
    about = "Rejection-based adversarial example detection: train backbones, fit layer detectors \
             (SVM-RBF, k-NN, KDE, prototype-budgeted RBF networks), calibrate rejection, attack, \
             and produce security-evaluation curves and prototype/latency benchmarks."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    WhiteBox,
    BlackBox,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    L2,
    Linf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone network described by the experiment config
    TrainBackbone {
        #[arg(long)]
        config: PathBuf,
        /// Also write the binary model variant next to the text one
        #[arg(long)]
        binary: bool,
    },
    /// Fit the detectors of one architecture (stacked generalization when
    /// it inspects several layers)
    FitDetector {
        #[arg(long)]
        config: PathBuf,
        /// Architecture name from the config
        #[arg(long)]
        arch: String,
    },
    /// Re-calibrate the rejection threshold of a saved architecture bundle
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        arch: String,
        /// Target clean rejection rate (defaults to the config value)
        #[arg(long)]
        target: Option<f64>,
    },
    /// Run the maximum-confidence attack on samples from a labeled CSV
    Attack {
        /// Path to a saved bundle (arch_<name>/bundle.txt)
        #[arg(long)]
        bundle: PathBuf,
        /// Labeled CSV of samples to attack
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = NormArg::L2)]
        norm: NormArg,
        /// Gamma-smoothing factor for gradients, in (0, 1]
        #[arg(long, default_value_t = 1.0)]
        gamma_scale: f64,
        #[arg(long, default_value_t = 1000)]
        max_iters: usize,
        /// Write the per-sample attack run log to this CSV
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Security-evaluation curve for one architecture or `undefended`
    Curve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        arch: String,
        #[arg(long, value_enum, default_value_t = SettingArg::WhiteBox)]
        setting: SettingArg,
        /// Output CSV (default: <output_dir>/curve_<arch>_<setting>.csv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prototype totals, reduction ratios, latency, and clean accuracy for
    /// every architecture in the config
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: backbone, detectors, calibration, curves, benchmark
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut src = std::error::Error::source(&err);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Stage { .. } => 3,
        Error::Config(_)
        | Error::Parameter(_)
        | Error::Parse { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Stratification(_)
        | Error::UnknownTap(_)
        | Error::DimensionMismatch { .. } => 2,
        _ => 3,
    }
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::TrainBackbone { config, binary } => {
            let ctx = ExperimentContext::prepare(&config)?;
            let model = ctx.stage_backbone()?;
            println!("backbone trained: {} -> {}", ctx.backbone_train.len(), ctx.backbone_path().display());
            if binary {
                let bin_path = ctx.backbone_path().with_extension("model.bin");
                save_model_as(&model, &bin_path, ModelFormat::Binary)?;
                println!("binary variant: {}", bin_path.display());
            }
            Ok(())
        }
        Command::FitDetector { config, arch } => {
            let ctx = ExperimentContext::prepare(&config)?;
            let arch_cfg = ctx
                .cfg
                .architectures
                .iter()
                .find(|a| a.name == arch)
                .ok_or_else(|| Error::config(format!("unknown architecture `{arch}`")))?
                .clone();
            let backbone = load_model(&ctx.backbone_path()).map_err(|e| {
                Error::config(format!(
                    "cannot load backbone {} (run `advrej train-backbone` first): {e}",
                    ctx.backbone_path().display()
                ))
            })?;
            let dc = ctx.fit_architecture(&backbone, &arch_cfg)?;
            let dc = ctx.calibrate_and_save(dc, &arch)?;
            println!(
                "architecture `{arch}` fitted: {} prototypes total, theta = {}",
                dc.total_prototypes(),
                dc.theta
            );
            println!("bundle: {}", ctx.bundle_path(&arch).display());
            Ok(())
        }
        Command::Calibrate { config, arch, target } => {
            let ctx = ExperimentContext::prepare(&config)?;
            let mut dc = ctx.load_architecture(&arch)?;
            let rate = target.unwrap_or(ctx.cfg.calibration.target_reject_rate);
            let cal = calibrate_threshold(&dc, &ctx.calibration.features, rate)?;
            dc.theta = cal.theta;
            save_bundle(&dc, &ctx.arch_dir(&arch))?;
            if cal.degenerate {
                eprintln!("warning: degenerate score distribution, theta set below the common value");
            }
            println!(
                "calibrated theta = {} (clean rejection {:.3} at target {rate})",
                cal.theta, cal.achieved_rate
            );
            Ok(())
        }
        Command::Attack {
            bundle,
            data,
            epsilon,
            norm,
            gamma_scale,
            max_iters,
            log,
        } => {
            let dc = load_bundle(&bundle)?;
            let ds = load_csv(&data)?;
            let cfg = AttackConfig {
                epsilon,
                norm: match norm {
                    NormArg::L2 => Norm::L2,
                    NormArg::Linf => Norm::Linf,
                },
                max_outer_iters: max_iters,
                ..AttackConfig::default()
            };
            let smoothing = SurrogateSpec { gamma_scale };
            let results: Vec<AttackLogRecord> = ds
                .features
                .par_iter()
                .zip(ds.labels.par_iter())
                .enumerate()
                .map(|(i, (x, &y))| {
                    let r = pgd_line_search(&dc, x, y, &cfg, &smoothing)?;
                    Ok(AttackLogRecord {
                        sample_id: i,
                        epsilon,
                        iterations: r.iterations,
                        final_objective: r.final_objective(),
                        success: r.success,
                        rejected: r.rejected,
                    })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let succ = results.iter().filter(|r| r.success).count();
            let rej = results.iter().filter(|r| r.rejected).count();
            println!(
                "attacked {} samples at epsilon {epsilon}: {} evasions, {} rejected",
                results.len(),
                succ,
                rej
            );
            if let Some(path) = log {
                let mut out = String::from(attack_log_header());
                out.push('\n');
                for r in &results {
                    out.push_str(&attack_log_row(r));
                    out.push('\n');
                }
                std::fs::write(&path, out)?;
                println!("attack log: {}", path.display());
            }
            Ok(())
        }
        Command::Curve {
            config,
            arch,
            setting,
            out,
        } => {
            let ctx = ExperimentContext::prepare(&config)?;
            let setting = match setting {
                SettingArg::WhiteBox => Setting::WhiteBox,
                SettingArg::BlackBox => Setting::BlackBox,
            };
            let surrogate = match setting {
                Setting::BlackBox => Some(load_model(&ctx.surrogate_path()).map_err(|e| {
                    Error::config(format!(
                        "black-box curves need {} (run `advrej run` or train it): {e}",
                        ctx.surrogate_path().display()
                    ))
                })?),
                Setting::WhiteBox => None,
            };
            let curve = if arch == "undefended" {
                let backbone = load_model(&ctx.backbone_path())?;
                ctx.run_curve(EvalTarget::Undefended(&backbone), setting, surrogate.as_ref())?
            } else {
                let dc = ctx.load_architecture(&arch)?;
                ctx.run_curve(EvalTarget::Defended(&dc), setting, surrogate.as_ref())?
            };
            let path = out.unwrap_or_else(|| {
                ctx.out_dir.join(format!("curve_{arch}_{setting}.csv"))
            });
            std::fs::create_dir_all(path.parent().unwrap_or(&ctx.out_dir))?;
            std::fs::write(&path, curves_to_csv(&[(arch.clone(), &curve)]))?;
            for (i, eps) in curve.epsilons.iter().enumerate() {
                println!(
                    "eps {:5.2}: accuracy {:.3} (rejection {:.3})",
                    eps, curve.accuracy_mean[i], curve.rejection_mean[i]
                );
            }
            println!("curve: {}", path.display());
            Ok(())
        }
        Command::Benchmark { config, out } => {
            let ctx = ExperimentContext::prepare(&config)?;
            let mut bundles = Vec::new();
            for arch in &ctx.cfg.architectures {
                bundles.push((arch.name.clone(), ctx.load_architecture(&arch.name)?, arch.reference.clone()));
            }
            let entries: Vec<BenchmarkEntry> = bundles
                .iter()
                .map(|(name, dc, reference)| BenchmarkEntry {
                    name: name.clone(),
                    dc,
                    reference: reference.clone(),
                })
                .collect();
            let report = benchmark_prototypes(
                &entries,
                &ctx.test.features,
                &ctx.test.labels,
                ctx.cfg.benchmark.latency_evals,
            )?;
            let path = out.unwrap_or_else(|| ctx.out_dir.join("benchmark.csv"));
            std::fs::create_dir_all(path.parent().unwrap_or(&ctx.out_dir))?;
            std::fs::write(&path, benchmark_to_csv(&report))?;
            for row in &report.rows {
                println!(
                    "{:10} {:10} prototypes {:6} total {:6} reduction {:6.1}x latency {:9.1}us acc {:.3}",
                    row.detector,
                    row.component,
                    row.prototypes,
                    row.total,
                    row.reduction,
                    row.latency_us_mean,
                    row.clean_accuracy
                );
            }
            println!("benchmark: {}", path.display());
            Ok(())
        }
        Command::Run { config } => {
            let outcome = run_experiment(&config)?;
            println!("experiment complete: {}", outcome.out_dir.display());
            for a in &outcome.manifest.artifacts {
                println!("  artifact: {a}");
            }
            Ok(())
        }
    }
}
