//! Defense-aware maximum-confidence evasion.
//!
//! The attack minimizes `Omega(x') = s_y(x') - max_{j not in {0, y}} s_j(x')`
//! over the extended scores of the defended model (reject class at index 0),
//! subject to an lp-ball around the clean input intersected with the box.
//! `Omega < 0` exactly when some competing non-reject class outscores the
//! true one; landing in the reject region does not count as evasion.
//!
//! The optimizer is projected gradient descent with an exponential line
//! search: each outer iteration tries step sizes `2^k * eta0`, keeps the
//! candidate with the lowest objective, and stops once the accepted step no
//! longer changes the objective by more than the convergence tolerance.
//! Objective values and the final success check always come from the true
//! model; gradients may come from a bandwidth-widened surrogate (gamma
//! smoothing) to escape flat reject plateaus.

use crate::backbone::{NetworkModel, TAP_LOGITS};
use crate::defended::DefendedClassifier;
use crate::error::{Error, Result};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Perturbation budget in input units.
    pub epsilon: f64,
    pub norm: Norm,
    /// Initial line-search step.
    pub eta0: f64,
    /// Convergence tolerance on the objective change.
    pub conv_tol: f64,
    pub max_outer_iters: usize,
    /// Number of step sizes tried per iteration (eta0 doubled k times).
    pub doublings: usize,
    pub box_lo: f64,
    pub box_hi: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            norm: Norm::L2,
            eta0: 0.01,
            conv_tol: 1e-6,
            max_outer_iters: 1000,
            doublings: 10,
            box_lo: 0.0,
            box_hi: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn l2(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::parameter("epsilon must be non-negative"));
        }
        if self.eta0 <= 0.0 {
            return Err(Error::parameter("eta0 must be positive"));
        }
        if self.conv_tol <= 0.0 {
            return Err(Error::parameter("conv_tol must be positive"));
        }
        if self.doublings < 1 || self.max_outer_iters < 1 {
            return Err(Error::parameter("doublings and max_outer_iters must be at least 1"));
        }
        if self.box_lo >= self.box_hi {
            return Err(Error::parameter("box_lo must be below box_hi"));
        }
        Ok(())
    }
}

/// Gamma-smoothing surrogate specification: gradients are computed on a
/// model whose kernel bandwidths are widened by this factor. Objective
/// values and success are always evaluated on the true model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub gamma_scale: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self { gamma_scale: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_star: Vec<f64>,
    /// Objective per accepted outer iteration, starting at the clean input;
    /// non-increasing by construction.
    pub omega_trace: Vec<f64>,
    /// Final decision is a non-reject class different from the true one.
    pub success: bool,
    /// Final decision landed in the reject class.
    pub rejected: bool,
    pub iterations: usize,
    /// False when the iteration cap was reached before the tolerance.
    pub converged: bool,
}

impl AttackResult {
    pub fn final_objective(&self) -> f64 {
        *self.omega_trace.last().unwrap()
    }
}

/// Euclidean projection onto the lp ball around `x0` intersected with the
/// box. Ball then box, iterated twice; idempotent on the feasible set.
pub fn project(x: &[f64], x0: &[f64], cfg: &AttackConfig) -> Vec<f64> {
    let mut out = x.to_vec();
    for _ in 0..2 {
        match cfg.norm {
            Norm::L2 => {
                let mut d2 = 0.0;
                for (a, b) in out.iter().zip(x0) {
                    let d = a - b;
                    d2 += d * d;
                }
                let dist = d2.sqrt();
                if dist > cfg.epsilon {
                    let scale = if dist > 0.0 { cfg.epsilon / dist } else { 0.0 };
                    for (a, b) in out.iter_mut().zip(x0) {
                        *a = b + (*a - b) * scale;
                    }
                }
            }
            Norm::Linf => {
                for (a, b) in out.iter_mut().zip(x0) {
                    *a = a.clamp(b - cfg.epsilon, b + cfg.epsilon);
                }
            }
        }
        for a in out.iter_mut() {
            *a = a.clamp(cfg.box_lo, cfg.box_hi);
        }
    }
    out
}

/// Feasibility check used by callers and tests.
pub fn is_feasible(x: &[f64], x0: &[f64], cfg: &AttackConfig, slack: f64) -> bool {
    let in_box = x.iter().all(|&v| v >= cfg.box_lo - slack && v <= cfg.box_hi + slack);
    let within = match cfg.norm {
        Norm::L2 => {
            let d2: f64 = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() <= cfg.epsilon + slack
        }
        Norm::Linf => x
            .iter()
            .zip(x0)
            .all(|(a, b)| (a - b).abs() <= cfg.epsilon + slack),
    };
    in_box && within
}

/// Maximum-confidence objective on the defended model's extended scores.
pub fn attack_objective(dc: &DefendedClassifier, x: &[f64], y: usize) -> Result<f64> {
    let scores = dc.extended_scores(x)?;
    objective_from_extended(&scores, y)
}

/// `Omega = s_y - max_{j not in {0, y}} s_j` over extended scores
/// (index 0 = reject, classes at 1..=c, dataset label y maps to index y+1).
pub fn objective_from_extended(extended: &[f64], y: usize) -> Result<f64> {
    let c = extended.len() - 1;
    if c < 2 {
        return Err(Error::parameter(
            "maximum-confidence evasion needs at least 2 classes (no competing class)",
        ));
    }
    if y >= c {
        return Err(Error::parameter(format!("true class {y} out of range for {c} classes")));
    }
    let sy = extended[y + 1];
    let competitor = best_competitor(extended, y);
    Ok(sy - extended[competitor])
}

/// Extended-score index of the best non-reject competitor.
pub(crate) fn best_competitor(extended: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in extended.iter().enumerate().skip(1) {
        if j == y + 1 {
            continue;
        }
        if best == usize::MAX || v > extended[best] {
            best = j;
        }
    }
    best
}

/// Gradient of the objective with respect to the input, computed on the
/// gamma-smoothing surrogate. The competitor is re-selected from the true
/// model's current scores on every call.
pub fn objective_gradient(
    dc: &DefendedClassifier,
    surrogate: &DefendedClassifier,
    x: &[f64],
    y: usize,
) -> Result<Vec<f64>> {
    if !dc.is_differentiable() {
        return Err(Error::NotDifferentiable(
            "white-box gradients need smooth detectors (svm_rbf or rbf_net) on every tap".into(),
        ));
    }
    let extended = dc.extended_scores(x)?;
    let c = extended.len() - 1;
    if c < 2 {
        return Err(Error::parameter("no competing class"));
    }
    let jstar = best_competitor(&extended, y);
    let mut u = vec![0.0; c];
    u[y] = 1.0;
    u[jstar - 1] -= 1.0;
    surrogate.combined_grad(x, &u)
}

/// Scalar objective for the projected-gradient core.
pub trait EvasionObjective {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

struct DefendedObjective<'a> {
    dc: &'a DefendedClassifier,
    surrogate: &'a DefendedClassifier,
    y: usize,
}

impl EvasionObjective for DefendedObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        attack_objective(self.dc, x, self.y)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        objective_gradient(self.dc, self.surrogate, x, self.y)
    }
}

struct UndefendedObjective<'a> {
    model: &'a NetworkModel,
    y: usize,
}

impl UndefendedObjective<'_> {
    fn margin(&self, logits: &[f64]) -> (f64, usize) {
        let mut best = usize::MAX;
        for (j, &v) in logits.iter().enumerate() {
            if j == self.y {
                continue;
            }
            if best == usize::MAX || v > logits[best] {
                best = j;
            }
        }
        (logits[self.y] - logits[best], best)
    }
}

impl EvasionObjective for UndefendedObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let logits = self.model.forward(x)?;
        Ok(self.margin(&logits).0)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logits = self.model.forward(x)?;
        let (_, jstar) = self.margin(&logits);
        let mut u = vec![0.0; logits.len()];
        u[self.y] = 1.0;
        u[jstar] = -1.0;
        let mut upstream = BTreeMap::new();
        upstream.insert(TAP_LOGITS.to_string(), u);
        self.model.input_vjp(x, &upstream)
    }
}

/// Projected gradient descent with exponential line search over any scalar
/// objective. Per outer iteration every step size `2^k * eta0`
/// (k = 0..doublings-1) is projected and evaluated; the best candidate is
/// accepted only if it strictly improves, so the accepted trace is
/// non-increasing.
pub fn pgd_minimize(
    objective: &dyn EvasionObjective,
    x0: &[f64],
    cfg: &AttackConfig,
) -> Result<(Vec<f64>, Vec<f64>, usize, bool)> {
    cfg.validate()?;
    let mut current = project(x0, x0, cfg);
    let mut current_val = objective.value(&current)?;
    let mut trace = vec![current_val];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_outer_iters {
        iterations += 1;
        let grad = objective.gradient(&current)?;
        if grad.iter().all(|&g| g == 0.0) {
            converged = true;
            break;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut eta = cfg.eta0;
        for _ in 0..cfg.doublings {
            let cand: Vec<f64> = current
                .iter()
                .zip(&grad)
                .map(|(xi, gi)| xi - eta * gi)
                .collect();
            let cand = project(&cand, x0, cfg);
            let val = objective.value(&cand)?;
            if val.is_finite() && best.as_ref().map_or(true, |(bv, _)| val < *bv) {
                best = Some((val, cand));
            }
            eta *= 2.0;
        }
        match best {
            Some((val, cand)) if val < current_val => {
                let delta = current_val - val;
                current = cand;
                current_val = val;
                trace.push(val);
                if delta <= cfg.conv_tol {
                    converged = true;
                    break;
                }
            }
            _ => {
                // no step size improves: stationary for this search
                converged = true;
                break;
            }
        }
    }
    Ok((current, trace, iterations, converged))
}

/// White-box maximum-confidence attack against a defended classifier.
pub fn pgd_line_search(
    dc: &DefendedClassifier,
    x0: &[f64],
    y: usize,
    cfg: &AttackConfig,
    surrogate: &SurrogateSpec,
) -> Result<AttackResult> {
    if dc.class_count() < 2 {
        return Err(Error::parameter("no competing class"));
    }
    let scaled;
    let surrogate_dc = if (surrogate.gamma_scale - 1.0).abs() < 1e-15 {
        dc
    } else {
        scaled = dc.with_scaled_bandwidths(surrogate.gamma_scale)?;
        &scaled
    };
    let obj = DefendedObjective {
        dc,
        surrogate: surrogate_dc,
        y,
    };
    let (x_star, omega_trace, iterations, converged) = pgd_minimize(&obj, x0, cfg)?;
    let decision = dc.decide(&x_star)?;
    let success = !decision.rejected && decision.class_label() != Some(y);
    Ok(AttackResult {
        x_star,
        omega_trace,
        success,
        rejected: decision.rejected,
        iterations,
        converged,
    })
}

/// White-box attack against an undefended network (logit margin objective).
pub fn attack_undefended(
    model: &NetworkModel,
    x0: &[f64],
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if model.class_count() < 2 {
        return Err(Error::parameter("no competing class"));
    }
    let obj = UndefendedObjective { model, y };
    let (x_star, omega_trace, iterations, converged) = pgd_minimize(&obj, x0, cfg)?;
    let predicted = model.predict(&x_star)?;
    Ok(AttackResult {
        success: predicted != y,
        rejected: false,
        x_star,
        omega_trace,
        iterations,
        converged,
    })
}

/// Black-box transfer attack: optimize against an undefended surrogate
/// network, evaluate success on the defended target.
pub fn transfer_attack(
    target: &DefendedClassifier,
    surrogate_model: &NetworkModel,
    x0: &[f64],
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if surrogate_model.input_dim() != target.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: target.input_dim(),
            got: surrogate_model.input_dim(),
        });
    }
    let obj = UndefendedObjective {
        model: surrogate_model,
        y,
    };
    let (x_star, omega_trace, iterations, converged) = pgd_minimize(&obj, x0, cfg)?;
    let decision = target.decide(&x_star)?;
    let success = !decision.rejected && decision.class_label() != Some(y);
    Ok(AttackResult {
        x_star,
        omega_trace,
        success,
        rejected: decision.rejected,
        iterations,
        converged,
    })
}

/// One row of the attack run log (CSV: sample id, epsilon, iterations,
/// final objective, success, rejected).
#[derive(Debug, Clone)]
pub struct AttackLogRecord {
    pub sample_id: usize,
    pub epsilon: f64,
    pub iterations: usize,
    pub final_objective: f64,
    pub success: bool,
    pub rejected: bool,
}

pub fn attack_log_header() -> &'static str {
    "sample_id,epsilon,iterations,final_objective,success,rejected"
}

pub fn attack_log_row(r: &AttackLogRecord) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.sample_id, r.epsilon, r.iterations, r.final_objective, r.success, r.rejected
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn objective_known_cases() {
        // extended scores [theta, s_1, s_2]; dataset label 0 is index 1
        let omega = objective_from_extended(&[0.5, 0.9, 0.1], 0).unwrap();
        assert_relative_eq!(omega, 0.8);
        // reject outscores everyone, but rejection is not evasion
        let omega = objective_from_extended(&[0.95, 0.40, 0.30], 0).unwrap();
        assert_relative_eq!(omega, 0.1);
        assert!(omega > 0.0);
        // single class has no competitor
        assert!(objective_from_extended(&[0.5, 0.9], 0).is_err());
    }

    #[test]
    fn objective_ignores_reject_score_and_sub_max_competitors() {
        let y = 1usize;
        let a = objective_from_extended(&[0.0, 0.3, 0.9, 0.5], y).unwrap();
        let b = objective_from_extended(&[9.9, 0.3, 0.9, 0.5], y).unwrap();
        assert_eq!(a, b);
        // raising a competitor that stays below the max changes nothing
        let c = objective_from_extended(&[9.9, 0.49, 0.9, 0.5], y).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn l2_projection_closed_form() {
        let cfg = AttackConfig {
            epsilon: 5.0,
            norm: Norm::L2,
            box_lo: -100.0,
            box_hi: 100.0,
            ..AttackConfig::default()
        };
        let p = project(&[6.0, 8.0], &[0.0, 0.0], &cfg);
        assert_relative_eq!(p[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(p[1], 4.0, epsilon = 1e-12);
        // feasible points are unchanged
        let q = project(&[1.0, 1.0], &[0.0, 0.0], &cfg);
        assert_eq!(q, vec![1.0, 1.0]);
    }

    #[test]
    fn linf_projection_clips_per_coordinate() {
        let cfg = AttackConfig {
            epsilon: 0.1,
            norm: Norm::Linf,
            ..AttackConfig::default()
        };
        let x0 = vec![0.5; 4];
        let p = project(&[0.9, 0.9, 0.9, 0.9], &x0, &cfg);
        assert!(p.iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn projection_is_idempotent_and_feasible() {
        for norm in [Norm::L2, Norm::Linf] {
            let cfg = AttackConfig {
                epsilon: 0.35,
                norm,
                ..AttackConfig::default()
            };
            let x0 = vec![0.2, 0.9, 0.5];
            for i in 0..50 {
                let x: Vec<f64> = (0..3)
                    .map(|j| 2.0 * ((i * 3 + j) as f64 * 0.71).sin())
                    .collect();
                let p1 = project(&x, &x0, &cfg);
                let p2 = project(&p1, &x0, &cfg);
                assert!(is_feasible(&p1, &x0, &cfg, 1e-12));
                for (a, b) in p1.iter().zip(&p2) {
                    assert!((a - b).abs() < 1e-12, "projection must be idempotent");
                }
            }
        }
    }

    struct Quadratic;

    impl EvasionObjective for Quadratic {
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok((x[0] - 2.0) * (x[0] - 2.0))
        }
        fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![2.0 * (x[0] - 2.0)])
        }
    }

    #[test]
    fn pgd_converges_on_1d_quadratic() {
        let cfg = AttackConfig {
            epsilon: 5.0,
            eta0: 0.01,
            max_outer_iters: 200,
            box_lo: -10.0,
            box_hi: 10.0,
            ..AttackConfig::default()
        };
        let (x, trace, iters, converged) = pgd_minimize(&Quadratic, &[0.0], &cfg).unwrap();
        assert!(converged);
        assert!(iters <= 200);
        assert!((x[0] - 2.0).abs() < 1e-2, "x = {}", x[0]);
        // trace is non-increasing
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn epsilon_zero_returns_the_clean_input() {
        let cfg = AttackConfig {
            epsilon: 0.0,
            box_lo: -10.0,
            box_hi: 10.0,
            ..AttackConfig::default()
        };
        let (x, trace, _, converged) = pgd_minimize(&Quadratic, &[0.5], &cfg).unwrap();
        assert_eq!(x, vec![0.5]);
        assert_eq!(trace.len(), 1);
        assert!(converged);
    }

    #[test]
    fn gradient_norm_is_tiny_at_constructed_plateau_and_grows_when_smoothed() {
        use crate::defended::{Combiner, DefendedClassifier};
        use crate::detectors::{DetectorModel, RbfNetModel};
        use crate::backbone::{mlp_arch, train_backbone, TrainConfig};
        use crate::linalg::{dot, DenseMatrix, KernelConvention};
        use crate::rng::RngSeed;
        use rand::Rng;

        // hand-built sharp RBF detector on the input tap
        let net = RbfNetModel::new(
            DenseMatrix::from_rows(&[vec![0.2, 0.2], vec![0.8, 0.2], vec![0.5, 0.8]]).unwrap(),
            vec![80.0; 3],
            DenseMatrix::new(3, 3, vec![
                3.0, 0.0, 0.0,
                0.0, 3.0, 0.0,
                0.0, 0.0, 3.0,
            ]).unwrap(),
            vec![0.0; 3],
            KernelConvention::Multiplier,
        )
        .unwrap();
        let seed = RngSeed(99);
        let mut rng = seed.stream("bb");
        let xs: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let ys: Vec<usize> = xs.iter().map(|x| (x[0] > 0.5) as usize + (x[1] > 0.5) as usize).collect();
        let backbone = train_backbone(
            &xs,
            &ys,
            mlp_arch(2, &[8], 3),
            &TrainConfig { epochs: 3, ..TrainConfig::default() },
            seed,
        )
        .unwrap();
        let dc = DefendedClassifier::new(
            backbone,
            vec!["input".to_string()],
            vec![DetectorModel::RbfNet(net)],
            Combiner::Identity,
            0.5,
            0.0,
        )
        .unwrap();
        let smooth = dc.with_scaled_bandwidths(0.1).unwrap();
        // a point between the prototypes, deep in the flat region
        let x = vec![0.5, 0.45];
        let g_true = objective_gradient(&dc, &dc, &x, 0).unwrap();
        let g_smooth = objective_gradient(&dc, &smooth, &x, 0).unwrap();
        let n_true = dot(&g_true, &g_true).sqrt();
        let n_smooth = dot(&g_smooth, &g_smooth).sqrt();
        assert!(n_true < 1e-2, "plateau gradient should be tiny, got {n_true}");
        assert!(n_smooth > n_true, "smoothing must raise the gradient: {n_smooth} vs {n_true}");
    }
}
