//! Security-evaluation curves and prototype/latency benchmarks.
//!
//! A curve reports accuracy and rejection rate per perturbation budget,
//! averaged over seeded runs that each draw their own test subset and attack
//! every sample. Under attack a sample counts as correct when it is either
//! assigned its true class or rejected; at epsilon = 0 rejection counts as
//! an error.

use crate::attack::{
    attack_undefended, pgd_line_search, transfer_attack, AttackConfig, SurrogateSpec,
};
use crate::backbone::NetworkModel;
use crate::defended::{omega, DefendedClassifier, RejectionDecision};
use crate::error::{Error, Result};
use crate::rng::RngSeed;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    WhiteBox,
    BlackBox,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Setting::WhiteBox => write!(f, "white_box"),
            Setting::BlackBox => write!(f, "black_box"),
        }
    }
}

/// The classifier a curve is evaluated against.
#[derive(Clone, Copy)]
pub enum EvalTarget<'a> {
    Defended(&'a DefendedClassifier),
    /// Baseline without any rejection mechanism.
    Undefended(&'a NetworkModel),
}

impl EvalTarget<'_> {
    pub fn decide(&self, x: &[f64]) -> Result<RejectionDecision> {
        match self {
            EvalTarget::Defended(dc) => dc.decide(x),
            EvalTarget::Undefended(m) => {
                let logits = m.forward(x)?;
                // a rejector that can never win: theta far below any logit
                omega(&vec![0.0; logits.len()], &logits, f64::MIN / 4.0, 0.0)
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EvalTarget::Defended(dc) => dc.input_dim(),
            EvalTarget::Undefended(m) => m.input_dim(),
        }
    }
}

/// Accuracy of a decision batch at a given budget: under attack
/// (epsilon > 0) rejection counts as correct, on clean data it counts as an
/// error.
pub fn accuracy_under_attack(
    decisions: &[RejectionDecision],
    labels: &[usize],
    epsilon: f64,
) -> f64 {
    let correct = decisions
        .iter()
        .zip(labels)
        .filter(|(d, &y)| {
            if epsilon > 0.0 {
                d.rejected || d.class_label() == Some(y)
            } else {
                d.class_label() == Some(y)
            }
        })
        .count();
    correct as f64 / decisions.len().max(1) as f64
}

pub fn rejection_rate(decisions: &[RejectionDecision]) -> f64 {
    decisions.iter().filter(|d| d.rejected).count() as f64 / decisions.len().max(1) as f64
}

/// Accuracy and rejection rate per perturbation budget, averaged over runs.
#[derive(Debug, Clone)]
pub struct SecurityCurve {
    pub epsilons: Vec<f64>,
    pub accuracy_mean: Vec<f64>,
    pub accuracy_std: Vec<f64>,
    pub rejection_mean: Vec<f64>,
    /// Fraction of samples assigned their true (non-reject) class; equals
    /// accuracy - rejection at every attacked budget by construction.
    pub true_class_mean: Vec<f64>,
    /// Attacks that hit the iteration cap, per budget, summed over runs.
    pub non_converged: Vec<usize>,
    pub runs: usize,
    pub setting: Setting,
}

#[derive(Debug, Clone)]
pub struct CurveSpec {
    /// Strictly increasing, starting at 0.
    pub grid: Vec<f64>,
    pub setting: Setting,
    pub runs: usize,
    pub samples_per_run: usize,
    /// Attack template; the epsilon field is overridden per grid point.
    pub attack: AttackConfig,
    /// Gamma smoothing for white-box gradients.
    pub smoothing: SurrogateSpec,
}

impl CurveSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.first() != Some(&0.0) {
            return Err(Error::parameter("epsilon grid must start at 0"));
        }
        if !self.grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::parameter("epsilon grid must be strictly increasing"));
        }
        if self.runs < 1 {
            return Err(Error::parameter("runs must be at least 1"));
        }
        if self.samples_per_run < 1 {
            return Err(Error::parameter("samples_per_run must be at least 1"));
        }
        Ok(())
    }
}

/// Evaluate a security curve. White-box attacks run against the target
/// itself; black-box attacks are crafted on `surrogate_model` (required for
/// that setting) and evaluated on the target. Per-sample attacks run
/// concurrently; aggregation is a deterministic in-order reduction.
pub fn evaluate_curve(
    target: EvalTarget,
    test_inputs: &[Vec<f64>],
    test_labels: &[usize],
    spec: &CurveSpec,
    surrogate_model: Option<&NetworkModel>,
    seed: RngSeed,
) -> Result<SecurityCurve> {
    spec.validate()?;
    if test_inputs.len() != test_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: test_inputs.len(),
            got: test_labels.len(),
        });
    }
    if test_inputs.is_empty() {
        return Err(Error::parameter("test set is empty"));
    }
    if spec.setting == Setting::BlackBox && surrogate_model.is_none() {
        return Err(Error::config(
            "black-box curves need a surrogate network (the attacker's own model)",
        ));
    }

    let n_eps = spec.grid.len();
    let mut acc_runs: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.runs); n_eps];
    let mut rej_runs: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.runs); n_eps];
    let mut true_runs: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.runs); n_eps];
    let mut non_converged = vec![0usize; n_eps];

    for run in 0..spec.runs {
        let mut rng = seed.stream_indexed("curve-run", run);
        let take = spec.samples_per_run.min(test_inputs.len());
        let idxs: Vec<usize> = sample(&mut rng, test_inputs.len(), take).into_vec();
        let xs: Vec<&Vec<f64>> = idxs.iter().map(|&i| &test_inputs[i]).collect();
        let ys: Vec<usize> = idxs.iter().map(|&i| test_labels[i]).collect();

        for (ei, &eps) in spec.grid.iter().enumerate() {
            let (decisions, caps): (Vec<RejectionDecision>, usize) = if eps == 0.0 {
                let d = xs
                    .par_iter()
                    .map(|x| target.decide(x))
                    .collect::<Result<Vec<_>>>()?;
                (d, 0)
            } else {
                let mut cfg = spec.attack.clone();
                cfg.epsilon = eps;
                let results: Vec<(RejectionDecision, bool)> = xs
                    .par_iter()
                    .zip(ys.par_iter())
                    .map(|(x, &y)| {
                        let r = match (spec.setting, &target) {
                            (Setting::WhiteBox, EvalTarget::Defended(dc)) => {
                                pgd_line_search(dc, x, y, &cfg, &spec.smoothing)?
                            }
                            (Setting::WhiteBox, EvalTarget::Undefended(m)) => {
                                attack_undefended(m, x, y, &cfg)?
                            }
                            (Setting::BlackBox, EvalTarget::Defended(dc)) => {
                                transfer_attack(dc, surrogate_model.unwrap(), x, y, &cfg)?
                            }
                            (Setting::BlackBox, EvalTarget::Undefended(m)) => {
                                // craft on the surrogate, evaluate on the
                                // undefended target
                                let sur = surrogate_model.unwrap();
                                let mut r = attack_undefended(sur, x, y, &cfg)?;
                                r.success = m.predict(&r.x_star)? != y;
                                r
                            }
                        };
                        // the sample is still evaluated at its final point
                        // even when the attack hit the iteration cap
                        let d = target.decide(&r.x_star)?;
                        Ok((d, !r.converged))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let caps = results.iter().filter(|(_, hit)| *hit).count();
                (results.into_iter().map(|(d, _)| d).collect(), caps)
            };
            non_converged[ei] += caps;
            acc_runs[ei].push(accuracy_under_attack(&decisions, &ys, eps));
            rej_runs[ei].push(rejection_rate(&decisions));
            let true_frac = decisions
                .iter()
                .zip(&ys)
                .filter(|(d, &y)| d.class_label() == Some(y))
                .count() as f64
                / decisions.len() as f64;
            true_runs[ei].push(true_frac);
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    Ok(SecurityCurve {
        epsilons: spec.grid.clone(),
        accuracy_mean: acc_runs.iter().map(|v| mean(v)).collect(),
        accuracy_std: acc_runs.iter().map(|v| std(v)).collect(),
        rejection_mean: rej_runs.iter().map(|v| mean(v)).collect(),
        true_class_mean: true_runs.iter().map(|v| mean(v)).collect(),
        non_converged,
        runs: spec.runs,
        setting: spec.setting,
    })
}

/// Curve CSV with the documented column order.
pub fn curves_to_csv(curves: &[(String, &SecurityCurve)]) -> String {
    let mut out = String::from("setting,detector,epsilon,accuracy_mean,accuracy_std,rejection_mean\n");
    for (name, curve) in curves {
        for (i, eps) in curve.epsilons.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                curve.setting,
                name,
                eps,
                curve.accuracy_mean[i],
                curve.accuracy_std[i],
                curve.rejection_mean[i]
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// prototype / latency benchmarks
// ---------------------------------------------------------------------------

/// One architecture entered into the benchmark, optionally measured against
/// a reference architecture for the prototype-reduction ratio.
pub struct BenchmarkEntry<'a> {
    pub name: String,
    pub dc: &'a DefendedClassifier,
    pub reference: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkRow {
    pub detector: String,
    pub component: String,
    pub prototypes: usize,
    pub total: usize,
    pub reduction: f64,
    pub latency_us_mean: f64,
    pub latency_us_std: f64,
    pub clean_accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    pub fn total_for(&self, detector: &str) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.detector == detector)
            .map(|r| r.total)
    }

    pub fn latency_for(&self, detector: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.detector == detector)
            .map(|r| r.latency_us_mean)
    }
}

/// Prototype reduction ratio: reference total over candidate total.
pub fn reduction_ratio(reference_total: usize, candidate_total: usize) -> f64 {
    reference_total as f64 / candidate_total.max(1) as f64
}

/// Warm per-sample latency of `f` in microseconds: `groups` groups of
/// `evals_per_group` calls; the mean is the median of the group means
/// (median-of-means), the std is over group means. Single-threaded.
pub fn measure_latency_us<F: FnMut(usize)>(
    mut f: F,
    groups: usize,
    evals_per_group: usize,
    warmup: usize,
) -> (f64, f64) {
    for i in 0..warmup {
        f(i);
    }
    let mut means = Vec::with_capacity(groups);
    let mut call = 0usize;
    for _ in 0..groups {
        let t0 = Instant::now();
        for _ in 0..evals_per_group {
            f(call);
            call += 1;
        }
        let total_us = t0.elapsed().as_secs_f64() * 1e6;
        means.push(total_us / evals_per_group as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = means[means.len() / 2];
    let mu = means.iter().sum::<f64>() / means.len() as f64;
    let std = (means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / means.len() as f64).sqrt();
    (median, std)
}

/// Prototype totals, reduction ratios vs the named reference, warm mean
/// per-sample inference latency, and clean accuracy for each architecture.
/// `latency_evals` is the total number of timed evaluations (>= 1000 for
/// the standard protocol); pass 0 to skip latency measurement (the latency
/// columns then hold 0, keeping the rest of the report deterministic).
pub fn benchmark_prototypes(
    entries: &[BenchmarkEntry],
    test_inputs: &[Vec<f64>],
    test_labels: &[usize],
    latency_evals: usize,
) -> Result<BenchmarkReport> {
    if test_inputs.is_empty() {
        return Err(Error::parameter("benchmark test set is empty"));
    }
    let totals: std::collections::BTreeMap<String, usize> = entries
        .iter()
        .map(|e| (e.name.clone(), e.dc.total_prototypes()))
        .collect();

    let mut rows = Vec::new();
    for entry in entries {
        let total = entry.dc.total_prototypes();
        let reduction = match &entry.reference {
            Some(ref_name) => {
                let ref_total = totals.get(ref_name).copied().ok_or_else(|| {
                    Error::config(format!("unknown benchmark reference `{ref_name}`"))
                })?;
                reduction_ratio(ref_total, total)
            }
            None => 1.0,
        };
        let decisions: Vec<RejectionDecision> = test_inputs
            .par_iter()
            .map(|x| entry.dc.decide(x))
            .collect::<Result<Vec<_>>>()?;
        let clean_accuracy = accuracy_under_attack(&decisions, test_labels, 0.0);

        let (lat_mean, lat_std) = if latency_evals == 0 {
            (0.0, 0.0)
        } else {
            let groups = 10;
            let per_group = (latency_evals / groups).max(1);
            measure_latency_us(
                |i| {
                    let x = &test_inputs[i % test_inputs.len()];
                    let _ = entry.dc.decide(x);
                },
                groups,
                per_group,
                100,
            )
        };

        for (component, prototypes) in entry.dc.component_prototypes() {
            rows.push(BenchmarkRow {
                detector: entry.name.clone(),
                component,
                prototypes,
                total,
                reduction,
                latency_us_mean: lat_mean,
                latency_us_std: lat_std,
                clean_accuracy,
            });
        }
    }
    Ok(BenchmarkReport { rows })
}

/// Benchmark CSV with the documented column order.
pub fn benchmark_to_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from(
        "detector,component,prototypes,total,reduction,latency_us_mean,latency_us_std,clean_accuracy\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.detector,
            r.component,
            r.prototypes,
            r.total,
            r.reduction,
            r.latency_us_mean,
            r.latency_us_std,
            r.clean_accuracy
        ));
    }
    out
}

/// Ordinary least squares `y = a + b x` returning `(intercept, slope, r2)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let p = intercept + slope * x;
            (y - p) * (y - p)
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (intercept, slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dec(label: Option<usize>, c: usize) -> RejectionDecision {
        match label {
            Some(l) => {
                let mut scores = vec![0.0; c + 1];
                scores[l + 1] = 1.0;
                RejectionDecision {
                    extended_scores: scores,
                    predicted: l + 1,
                    rejected: false,
                }
            }
            None => RejectionDecision {
                extended_scores: vec![1.0; c + 1],
                predicted: 0,
                rejected: true,
            },
        }
    }

    #[test]
    fn accuracy_rules_flip_on_rejection() {
        let all_rejected: Vec<_> = (0..4).map(|_| dec(None, 2)).collect();
        let labels = vec![0, 1, 0, 1];
        assert_eq!(accuracy_under_attack(&all_rejected, &labels, 0.5), 1.0);
        assert_eq!(accuracy_under_attack(&all_rejected, &labels, 0.0), 0.0);

        // half rejected, half wrong class, under attack
        let mixed = vec![dec(None, 2), dec(None, 2), dec(Some(1), 2), dec(Some(1), 2)];
        let labels = vec![0, 0, 0, 0];
        assert_eq!(accuracy_under_attack(&mixed, &labels, 1.0), 0.5);
        assert_eq!(rejection_rate(&mixed), 0.5);
    }

    #[test]
    fn accuracy_minus_rejection_is_true_class_fraction() {
        let decisions = vec![
            dec(None, 2),
            dec(Some(0), 2),
            dec(Some(1), 2),
            dec(Some(0), 2),
        ];
        let labels = vec![1, 0, 0, 0];
        let acc = accuracy_under_attack(&decisions, &labels, 2.0);
        let rej = rejection_rate(&decisions);
        let true_frac = decisions
            .iter()
            .zip(&labels)
            .filter(|(d, &y)| d.class_label() == Some(y))
            .count() as f64
            / 4.0;
        assert_eq!(acc - rej, true_frac);
    }

    #[test]
    fn reduction_ratio_arithmetic_matches_reference_tables() {
        // reference totals from the full-scale comparison this harness
        // mirrors at desk scale
        assert!((reduction_ratio(736, 10) - 73.6).abs() < 1e-12);
        let dnr = reduction_ratio(11527, 560);
        assert!((dnr - 20.583_928_571_428_572).abs() < 1e-9);
        assert!(dnr > 20.0);
        assert_eq!(reduction_ratio(42, 42), 1.0);
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = vec![10.0, 100.0, 1000.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 + 0.25 * x).collect();
        let (a, b, r2) = linear_fit(&xs, &ys);
        assert!((a - 3.0).abs() < 1e-9);
        assert!((b - 0.25).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn curve_spec_grid_validation() {
        let spec = CurveSpec {
            grid: vec![0.5, 1.0],
            setting: Setting::WhiteBox,
            runs: 1,
            samples_per_run: 10,
            attack: AttackConfig::default(),
            smoothing: SurrogateSpec::default(),
        };
        assert!(spec.validate().is_err());
        let spec2 = CurveSpec {
            grid: vec![0.0, 0.5, 0.5],
            ..spec
        };
        assert!(spec2.validate().is_err());
    }
}
