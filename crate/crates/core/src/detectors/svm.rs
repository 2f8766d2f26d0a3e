//! One-vs-all soft-margin SVMs with RBF kernel, trained by sequential
//! minimal optimization.
//!
//! The solver is the standard two-variable decomposition with second-order
//! working-set selection and an incrementally maintained gradient; it stops
//! when the maximal KKT violation drops below the tolerance. Support vectors
//! are exactly the training points with a positive multiplier in at least
//! one of the per-class problems.

use crate::error::{Error, Result};
use crate::linalg::{squared_euclidean_unchecked, DenseMatrix, KernelConvention};
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmRbfModel {
    support_vectors: DenseMatrix,
    /// c x n_sv signed dual coefficients (y_i alpha_i per one-vs-all problem).
    dual_coefs: DenseMatrix,
    bias: Vec<f64>,
    gamma: f64,
    c_param: f64,
    convention: KernelConvention,
}

/// Per-class solver diagnostics from a fit.
#[derive(Debug, Clone)]
pub struct SvmFitReport {
    /// Dual objective value (minimization form) per one-vs-all problem.
    pub objectives: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl SvmRbfModel {
    pub fn support_vectors(&self) -> &DenseMatrix {
        &self.support_vectors
    }

    pub fn support_vector_count(&self) -> usize {
        self.support_vectors.rows()
    }

    pub fn class_count(&self) -> usize {
        self.dual_coefs.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.support_vectors.cols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn c_param(&self) -> f64 {
        self.c_param
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn dual_coefs(&self) -> &DenseMatrix {
        &self.dual_coefs
    }

    pub fn convention(&self) -> KernelConvention {
        self.convention
    }

    pub fn from_parts(
        support_vectors: DenseMatrix,
        dual_coefs: DenseMatrix,
        bias: Vec<f64>,
        gamma: f64,
        c_param: f64,
        convention: KernelConvention,
    ) -> Result<Self> {
        if dual_coefs.cols() != support_vectors.rows() {
            return Err(Error::DimensionMismatch {
                expected: support_vectors.rows(),
                got: dual_coefs.cols(),
            });
        }
        if bias.len() != dual_coefs.rows() {
            return Err(Error::DimensionMismatch {
                expected: dual_coefs.rows(),
                got: bias.len(),
            });
        }
        if gamma <= 0.0 || c_param <= 0.0 {
            return Err(Error::parameter("gamma and C must be positive"));
        }
        Ok(Self {
            support_vectors,
            dual_coefs,
            bias,
            gamma,
            c_param,
            convention,
        })
    }

    /// Gamma-smoothing surrogate: kernels widened by `scale`.
    pub fn with_scaled_bandwidths(&self, scale: f64) -> Result<Self> {
        if scale <= 0.0 || scale > 1.0 {
            return Err(Error::parameter(format!(
                "bandwidth scale must be in (0, 1], got {scale}"
            )));
        }
        let mut out = self.clone();
        out.gamma = match self.convention {
            KernelConvention::Multiplier => self.gamma * scale,
            KernelConvention::InverseBandwidth => self.gamma / scale,
        };
        Ok(out)
    }

    /// Per-class decision values.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        let kvec: Vec<f64> = self
            .support_vectors
            .iter_rows()
            .map(|sv| {
                self.convention
                    .kernel_of_d2(squared_euclidean_unchecked(z, sv), self.gamma)
            })
            .collect();
        let mut s = self.dual_coefs.matvec(&kvec);
        for (si, bi) in s.iter_mut().zip(&self.bias) {
            *si += bi;
        }
        Ok(s)
    }

    /// Exact gradient of `<upstream, score(z)>` with respect to `z`.
    pub fn grad_input(&self, z: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        if upstream.len() != self.class_count() {
            return Err(Error::DimensionMismatch {
                expected: self.class_count(),
                got: upstream.len(),
            });
        }
        // per-sv coefficient: sum_c u_c coef[c][j]
        let coef = self.dual_coefs.matvec_t(upstream);
        let rho = match self.convention {
            KernelConvention::Multiplier => 2.0 * self.gamma,
            KernelConvention::InverseBandwidth => 2.0 / self.gamma,
        };
        let mut grad = vec![0.0; z.len()];
        for (sv, cj) in self.support_vectors.iter_rows().zip(&coef) {
            if *cj == 0.0 {
                continue;
            }
            let k = self
                .convention
                .kernel_of_d2(squared_euclidean_unchecked(z, sv), self.gamma);
            let c = cj * k * rho;
            for ((g, si), zi) in grad.iter_mut().zip(sv).zip(z) {
                *g += c * (si - zi);
            }
        }
        Ok(grad)
    }
}

/// Solution of one binary soft-margin problem.
#[derive(Debug, Clone)]
pub struct BinarySvmSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    /// Dual objective `1/2 a^T Q a - e^T a` at the solution.
    pub objective: f64,
    pub iterations: usize,
}

/// Dense kernel matrix over a training set.
pub fn gram_matrix(points: &[Vec<f64>], gamma: f64, conv: KernelConvention) -> DenseMatrix {
    let n = points.len();
    let mut gram = DenseMatrix::zeros(n, n);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| conv.kernel_of_d2(squared_euclidean_unchecked(&points[i], &points[j]), gamma))
                .collect()
        })
        .collect();
    for (i, row) in rows.into_iter().enumerate() {
        gram.row_mut(i).copy_from_slice(&row);
    }
    gram
}

/// SMO for `min 1/2 a^T Q a - e^T a` s.t. `0 <= a <= C`, `y^T a = 0`, with
/// `Q_ij = y_i y_j K_ij`. `tol` bounds the final KKT violation.
pub fn solve_binary_smo(
    gram: &DenseMatrix,
    y: &[f64],
    c: f64,
    tol: f64,
    max_iter: usize,
) -> Result<BinarySvmSolution> {
    let n = y.len();
    if gram.rows() != n || gram.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: gram.rows(),
        });
    }
    if c <= 0.0 {
        return Err(Error::parameter("C must be positive"));
    }
    if !(y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0)) {
        return Err(Error::DegenerateLabels(
            "binary problem needs both positive and negative labels".into(),
        ));
    }
    const TAU: f64 = 1e-12;

    let mut alpha = vec![0.0f64; n];
    // gradient of the dual objective: G_i = sum_j Q_ij a_j - 1; starts at -1
    let mut grad = vec![-1.0f64; n];
    let q = |i: usize, j: usize| y[i] * y[j] * gram.get(i, j);

    let mut iterations = 0;
    loop {
        // working set selection: first order for i, second order for j
        let mut i = usize::MAX;
        let mut g_max = f64::NEG_INFINITY;
        let mut g_min = f64::INFINITY;
        for t in 0..n {
            let in_up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
            if in_up {
                let v = -y[t] * grad[t];
                if v > g_max {
                    g_max = v;
                    i = t;
                }
            }
            let in_low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
            if in_low {
                let v = -y[t] * grad[t];
                if v < g_min {
                    g_min = v;
                }
            }
        }
        if g_max - g_min <= tol || i == usize::MAX {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::training(format!(
                "SMO did not converge after {max_iter} iterations (KKT violation {:.3e} > {tol:.3e})",
                g_max - g_min
            )));
        }

        let mut j = usize::MAX;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            let in_low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
            if !in_low {
                continue;
            }
            let nu_t = -y[t] * grad[t];
            let b_it = g_max - nu_t;
            if b_it <= 0.0 {
                continue;
            }
            let a_it = (q(i, i) + q(t, t) - 2.0 * y[i] * y[t] * q(i, t)).max(TAU);
            let obj = -(b_it * b_it) / a_it;
            if obj < obj_min {
                obj_min = obj;
                j = t;
            }
        }
        if j == usize::MAX {
            break;
        }

        // two-variable analytic update
        let old_ai = alpha[i];
        let old_aj = alpha[j];
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let dai = alpha[i] - old_ai;
        let daj = alpha[j] - old_aj;
        if dai != 0.0 || daj != 0.0 {
            let yi = y[i];
            let yj = y[j];
            let row_i = gram.row(i);
            let row_j = gram.row(j);
            for t in 0..n {
                grad[t] += y[t] * (yi * row_i[t] * dai + yj * row_j[t] * daj);
            }
        }
        iterations += 1;
    }

    // bias from free support vectors, else midpoint of the bound interval
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    for t in 0..n {
        if alpha[t] > 0.0 && alpha[t] < c {
            free_sum += -y[t] * grad[t];
            free_count += 1;
        }
    }
    let bias = if free_count > 0 {
        free_sum / free_count as f64
    } else {
        let mut ub = f64::INFINITY;
        let mut lb = f64::NEG_INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            let in_up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
            let in_low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
            if in_up {
                lb = lb.max(v);
            }
            if in_low {
                ub = ub.min(v);
            }
        }
        (lb + ub) / 2.0
    };

    // objective: 1/2 (a^T G - e^T a) since G = Qa - e
    let objective = 0.5
        * alpha
            .iter()
            .zip(&grad)
            .map(|(a, g)| a * g)
            .sum::<f64>()
        - 0.5 * alpha.iter().sum::<f64>();

    Ok(BinarySvmSolution {
        alpha,
        bias,
        objective,
        iterations,
    })
}

/// Fit a multiclass SVM-RBF detector as `class_count` one-vs-all binary
/// problems sharing one kernel matrix.
pub fn fit_svm_rbf(
    zs: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    c: f64,
    gamma: f64,
    convention: KernelConvention,
) -> Result<SvmRbfModel> {
    fit_svm_rbf_with_report(zs, labels, class_count, c, gamma, convention).map(|(m, _)| m)
}

pub fn fit_svm_rbf_with_report(
    zs: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    c: f64,
    gamma: f64,
    convention: KernelConvention,
) -> Result<(SvmRbfModel, SvmFitReport)> {
    if zs.is_empty() {
        return Err(Error::parameter("training set is empty"));
    }
    if zs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: zs.len(),
            got: labels.len(),
        });
    }
    if gamma <= 0.0 || c <= 0.0 {
        return Err(Error::parameter("gamma and C must be positive"));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::DegenerateLabels(format!(
            "need at least 2 classes, found {}",
            distinct.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
        return Err(Error::parameter(format!(
            "label {bad} out of range for {class_count} classes"
        )));
    }

    let n = zs.len();
    let gram = gram_matrix(zs, gamma, convention);
    let tol = 1e-3;
    let max_iter = (200 * n).max(200_000);

    let solutions: Vec<Result<BinarySvmSolution>> = (0..class_count)
        .into_par_iter()
        .map(|cls| {
            if !distinct.contains(&cls) {
                return Err(Error::DegenerateLabels(format!(
                    "class {cls} has no training points"
                )));
            }
            let y: Vec<f64> = labels
                .iter()
                .map(|&l| if l == cls { 1.0 } else { -1.0 })
                .collect();
            solve_binary_smo(&gram, &y, c, tol, max_iter)
        })
        .collect();

    let mut per_class = Vec::with_capacity(class_count);
    let mut objectives = Vec::with_capacity(class_count);
    let mut iterations = Vec::with_capacity(class_count);
    for sol in solutions {
        let sol = sol?;
        objectives.push(sol.objective);
        iterations.push(sol.iterations);
        per_class.push(sol);
    }

    const SV_EPS: f64 = 1e-12;
    let sv_indices: Vec<usize> = (0..n)
        .filter(|&i| per_class.iter().any(|s| s.alpha[i] > SV_EPS))
        .collect();
    let sv_rows: Vec<Vec<f64>> = sv_indices.iter().map(|&i| zs[i].clone()).collect();
    let support_vectors = DenseMatrix::from_rows(&sv_rows)?;
    let mut dual_coefs = DenseMatrix::zeros(class_count, sv_indices.len());
    for (cls, sol) in per_class.iter().enumerate() {
        for (svi, &i) in sv_indices.iter().enumerate() {
            if sol.alpha[i] > SV_EPS {
                let yi = if labels[i] == cls { 1.0 } else { -1.0 };
                dual_coefs.set(cls, svi, yi * sol.alpha[i]);
            }
        }
    }
    let bias: Vec<f64> = per_class.iter().map(|s| s.bias).collect();

    Ok((
        SvmRbfModel {
            support_vectors,
            dual_coefs,
            bias,
            gamma,
            c_param: c,
            convention,
        },
        SvmFitReport {
            objectives,
            iterations,
        },
    ))
}

/// Median pairwise squared distance heuristic for choosing gamma: the
/// bandwidth that puts the kernel at `exp(-1)` for a typical pair.
pub fn median_heuristic_gamma(
    zs: &[Vec<f64>],
    convention: KernelConvention,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    use rand::Rng;
    let n = zs.len();
    let samples = 500.min(n * n);
    let mut d2s: Vec<f64> = (0..samples)
        .map(|_| {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            squared_euclidean_unchecked(&zs[i], &zs[j])
        })
        .filter(|&d| d > 0.0)
        .collect();
    if d2s.is_empty() {
        return 1.0;
    }
    d2s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = d2s[d2s.len() / 2];
    match convention {
        KernelConvention::Multiplier => 1.0 / med,
        KernelConvention::InverseBandwidth => med,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_difference_gradient, gradient_relative_error};
    use crate::rng::RngSeed;
    use rand::Rng;

    /// Independent oracle: projected gradient descent on the same dual,
    /// with projection onto the box-hyperplane intersection by bisection.
    pub(super) fn dual_oracle(gram: &DenseMatrix, y: &[f64], c: f64) -> (Vec<f64>, f64) {
        let n = y.len();
        let q = |i: usize, j: usize| y[i] * y[j] * gram.get(i, j);
        // Lipschitz bound: row-sum norm of Q
        let mut l = 0.0f64;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| q(i, j).abs()).sum();
            l = l.max(row);
        }
        let step = 1.0 / l.max(1e-9);

        let project = |v: &[f64]| -> Vec<f64> {
            // find lambda such that y^T clip(v - lambda y) = 0
            let eval = |lam: f64| -> f64 {
                v.iter()
                    .zip(y)
                    .map(|(vi, yi)| yi * (vi - lam * yi).clamp(0.0, c))
                    .sum()
            };
            let mut lo = -1e6;
            let mut hi = 1e6;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if eval(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let lam = 0.5 * (lo + hi);
            v.iter()
                .zip(y)
                .map(|(vi, yi)| (vi - lam * yi).clamp(0.0, c))
                .collect()
        };

        let objective = |a: &[f64]| -> f64 {
            let mut obj = 0.0;
            for i in 0..n {
                for j in 0..n {
                    obj += 0.5 * a[i] * a[j] * q(i, j);
                }
                obj -= a[i];
            }
            obj
        };

        let mut a = project(&vec![0.0; n]);
        let mut prev = objective(&a);
        for _ in 0..400_000 {
            let mut v = a.clone();
            for i in 0..n {
                let g: f64 = (0..n).map(|j| q(i, j) * a[j]).sum::<f64>() - 1.0;
                v[i] -= step * g;
            }
            a = project(&v);
            let cur = objective(&a);
            if (prev - cur).abs() < 1e-14 {
                break;
            }
            prev = cur;
        }
        (a, prev)
    }

    fn spread_pairs() -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            vec![
                vec![0.0, 0.0],
                vec![0.2, 0.1],
                vec![3.0, 3.0],
                vec![3.2, 2.9],
            ],
            vec![0, 0, 1, 1],
        )
    }

    #[test]
    fn smo_matches_dual_oracle_on_four_points() {
        let (zs, labels) = spread_pairs();
        let gram = gram_matrix(&zs, 1.0, KernelConvention::Multiplier);
        let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let sol = solve_binary_smo(&gram, &y, 1.0, 1e-6, 100_000).unwrap();
        let (_, oracle_obj) = dual_oracle(&gram, &y, 1.0);
        assert!(
            (sol.objective - oracle_obj).abs() < 1e-6,
            "smo {} vs oracle {oracle_obj}",
            sol.objective
        );
    }

    #[test]
    fn smo_satisfies_kkt_within_tolerance() {
        let seed = RngSeed(19);
        let mut rng = seed.stream("svm-kkt");
        let zs: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let labels: Vec<usize> = zs.iter().map(|z| (z[0] + z[1] > 0.0) as usize).collect();
        let gram = gram_matrix(&zs, 0.7, KernelConvention::Multiplier);
        let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let c = 2.0;
        let tol = 1e-3;
        let sol = solve_binary_smo(&gram, &y, c, tol, 200_000).unwrap();
        // recompute the KKT violation from scratch
        let n = y.len();
        let mut g_max = f64::NEG_INFINITY;
        let mut g_min = f64::INFINITY;
        for t in 0..n {
            let gt: f64 = (0..n)
                .map(|j| y[t] * y[j] * gram.get(t, j) * sol.alpha[j])
                .sum::<f64>()
                - 1.0;
            let v = -y[t] * gt;
            let in_up = (y[t] > 0.0 && sol.alpha[t] < c) || (y[t] < 0.0 && sol.alpha[t] > 0.0);
            let in_low = (y[t] > 0.0 && sol.alpha[t] > 0.0) || (y[t] < 0.0 && sol.alpha[t] < c);
            if in_up {
                g_max = g_max.max(v);
            }
            if in_low {
                g_min = g_min.min(v);
            }
        }
        assert!(g_max - g_min <= tol * 1.01, "violation {}", g_max - g_min);
        // equality constraint holds
        let dot: f64 = sol.alpha.iter().zip(&y).map(|(a, yi)| a * yi).sum();
        assert!(dot.abs() < 1e-9);
        // bounds hold
        assert!(sol.alpha.iter().all(|&a| (-1e-12..=c + 1e-12).contains(&a)));
    }

    #[test]
    fn all_points_same_class_is_degenerate() {
        let zs = vec![vec![0.0], vec![1.0]];
        let labels = vec![1, 1];
        assert!(matches!(
            fit_svm_rbf(&zs, &labels, 2, 1.0, 1.0, KernelConvention::Multiplier),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn multiclass_fit_separates_three_blobs() {
        let seed = RngSeed(5);
        let mut rng = seed.stream("svm-blobs");
        let centers = [[0.0, 0.0], [1.0, 0.0], [0.5, 0.9]];
        let mut zs = Vec::new();
        let mut labels = Vec::new();
        for (ci, c) in centers.iter().enumerate() {
            for _ in 0..30 {
                zs.push(vec![
                    c[0] + 0.08 * rng.random_range(-1.0..1.0),
                    c[1] + 0.08 * rng.random_range(-1.0..1.0),
                ]);
                labels.push(ci);
            }
        }
        let (model, report) =
            fit_svm_rbf_with_report(&zs, &labels, 3, 1.0, 1.0, KernelConvention::Multiplier).unwrap();
        let correct = zs
            .iter()
            .zip(&labels)
            .filter(|(z, &y)| crate::linalg::argmax(&model.score(z).unwrap()) == y)
            .count();
        assert!(correct >= 88, "train accuracy {correct}/90");
        assert!(model.support_vector_count() >= 10);
        assert_eq!(report.objectives.len(), 3);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let (zs, labels) = spread_pairs();
        let model = fit_svm_rbf(&zs, &labels, 2, 1.0, 0.8, KernelConvention::Multiplier).unwrap();
        let u = vec![1.3, -0.6];
        for i in 0..10 {
            let z = vec![(i as f64 * 0.7).sin() * 2.0, (i as f64 * 0.3).cos() * 2.0];
            let analytic = model.grad_input(&z, &u).unwrap();
            let numeric = finite_difference_gradient(
                |p| {
                    let s = model.score(p).unwrap();
                    u[0] * s[0] + u[1] * s[1]
                },
                &z,
                1e-6,
            )
            .unwrap();
            let err = gradient_relative_error(&analytic, &numeric);
            assert!(err < 1e-6, "point {i}: rel err {err}");
        }
    }

    #[test]
    fn scaled_bandwidths_raise_far_gradient_magnitude() {
        let (zs, labels) = spread_pairs();
        let model = fit_svm_rbf(&zs, &labels, 2, 1.0, 5.0, KernelConvention::Multiplier).unwrap();
        let far = vec![8.0, -6.0];
        let u = vec![1.0, -1.0];
        let g1 = model.grad_input(&far, &u).unwrap();
        let g2 = model
            .with_scaled_bandwidths(0.1)
            .unwrap()
            .grad_input(&far, &u)
            .unwrap();
        let n1: f64 = g1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n2: f64 = g2.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n2 > n1, "smoothed gradient {n2} should exceed {n1}");
    }
}
