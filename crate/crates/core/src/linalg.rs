//! Dense row-major matrices, kernel evaluations, and the finite-difference
//! oracle used to verify every analytic gradient in the toolkit.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense matrix with row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    /// Build from row-major values, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::parameter(format!("non-finite matrix entry {v}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.cols)
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|r| dot(r, x)).collect()
    }

    /// `self^T * x` for a column vector `x` of length `rows`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xi) in self.iter_rows().zip(x) {
            axpy(xi, r, &mut out);
        }
        out
    }
}

/// Which way the RBF kernel consumes its bandwidth parameter.
///
/// `InverseBandwidth` computes `exp(-d^2 / gamma)`; `Multiplier` computes
/// `exp(-gamma * d^2)`, the convention of common SVM implementations. The
/// default is `Multiplier`: reference hyperparameter tables in the 1e-3..1e-2
/// range are only sensible under it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelConvention {
    InverseBandwidth,
    #[default]
    Multiplier,
}

impl KernelConvention {
    /// Kernel value for a squared distance `d2` and bandwidth `gamma`.
    #[inline]
    pub fn kernel_of_d2(&self, d2: f64, gamma: f64) -> f64 {
        match self {
            KernelConvention::InverseBandwidth => (-d2 / gamma).exp(),
            KernelConvention::Multiplier => (-gamma * d2).exp(),
        }
    }

    /// d(kernel)/d(d2), used by analytic gradients.
    #[inline]
    pub fn dkernel_dd2(&self, d2: f64, gamma: f64) -> f64 {
        match self {
            KernelConvention::InverseBandwidth => -(-d2 / gamma).exp() / gamma,
            KernelConvention::Multiplier => -gamma * (-gamma * d2).exp(),
        }
    }
}

impl std::fmt::Display for KernelConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelConvention::InverseBandwidth => write!(f, "inverse_bandwidth"),
            KernelConvention::Multiplier => write!(f, "multiplier"),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Squared Euclidean distance between two vectors of equal dimension.
pub fn squared_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(squared_euclidean_unchecked(a, b))
}

#[inline]
pub(crate) fn squared_euclidean_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Gaussian RBF kernel between two vectors under the given convention.
pub fn rbf_kernel(a: &[f64], b: &[f64], gamma: f64, conv: KernelConvention) -> Result<f64> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::parameter(format!("gamma must be positive, got {gamma}")));
    }
    let d2 = squared_euclidean(a, b)?;
    Ok(conv.kernel_of_d2(d2, gamma))
}

/// Central-difference gradient of a scalar field, the verification oracle
/// for every analytic gradient in the toolkit.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::parameter(format!("step size must be positive, got {h}")));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let fp = f(&probe);
        probe[j] = x[j] - h;
        let fm = f(&probe);
        probe[j] = x[j];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite field value near coordinate {j} (f+ = {fp}, f- = {fm})"
            )));
        }
        grad[j] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate, `||a - b|| / max(||a||, ||b||, tiny)`.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = dot(analytic, analytic).sqrt();
    let nb = dot(numeric, numeric).sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// log(sum(exp(v))) without overflow.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Index of the maximum element; first index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
