//! Per-class Gaussian kernel density detector.
//!
//! Scores are per-class log-densities passed through an affine map fitted on
//! the training data so each class score lands in [0, 1] on-manifold and
//! decays to 0 as the query leaves the data.

use crate::error::{Error, Result};
use crate::linalg::{logsumexp, squared_euclidean_unchecked, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    bandwidth: f64,
    per_class_points: Vec<DenseMatrix>,
    /// Per-class (min, max) of the log-density over that class's fit points.
    norm: Vec<(f64, f64)>,
}

impl KdeModel {
    pub fn fit(zs: &[Vec<f64>], labels: &[usize], class_count: usize, bandwidth: f64) -> Result<Self> {
        if bandwidth <= 0.0 || !bandwidth.is_finite() {
            return Err(Error::parameter("bandwidth must be positive"));
        }
        if zs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: zs.len(),
                got: labels.len(),
            });
        }
        let mut per_class_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); class_count];
        for (z, &y) in zs.iter().zip(labels) {
            if y >= class_count {
                return Err(Error::parameter(format!(
                    "label {y} out of range for {class_count} classes"
                )));
            }
            per_class_rows[y].push(z.clone());
        }
        if let Some(empty) = per_class_rows.iter().position(|r| r.is_empty()) {
            return Err(Error::DegenerateLabels(format!(
                "class {empty} has no fit points"
            )));
        }
        let per_class_points: Vec<DenseMatrix> = per_class_rows
            .iter()
            .map(|rows| DenseMatrix::from_rows(rows))
            .collect::<Result<_>>()?;

        let mut model = Self {
            bandwidth,
            per_class_points,
            norm: vec![(0.0, 1.0); class_count],
        };
        for c in 0..class_count {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for z in per_class_rows[c].iter() {
                let lp = model.log_density(c, z);
                lo = lo.min(lp);
                hi = hi.max(lp);
            }
            model.norm[c] = (lo, hi);
        }
        Ok(model)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn class_count(&self) -> usize {
        self.per_class_points.len()
    }

    pub fn input_dim(&self) -> usize {
        self.per_class_points[0].cols()
    }

    pub fn stored_count(&self) -> usize {
        self.per_class_points.iter().map(|m| m.rows()).sum()
    }

    pub fn per_class_points(&self) -> &[DenseMatrix] {
        &self.per_class_points
    }

    pub fn norm(&self) -> &[(f64, f64)] {
        &self.norm
    }

    pub(crate) fn from_parts(
        bandwidth: f64,
        per_class_points: Vec<DenseMatrix>,
        norm: Vec<(f64, f64)>,
    ) -> Self {
        Self {
            bandwidth,
            per_class_points,
            norm,
        }
    }

    /// Unnormalized Gaussian log-density of class `c` at `z` (additive
    /// constants dropped; the affine normalization absorbs them).
    fn log_density(&self, c: usize, z: &[f64]) -> f64 {
        let pts = &self.per_class_points[c];
        let h2 = 2.0 * self.bandwidth * self.bandwidth;
        let terms: Vec<f64> = pts
            .iter_rows()
            .map(|p| -squared_euclidean_unchecked(z, p) / h2)
            .collect();
        logsumexp(&terms) - (pts.rows() as f64).ln()
    }

    /// Per-class normalized scores in [0, 1].
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        Ok((0..self.class_count())
            .map(|c| {
                let lp = self.log_density(c, z);
                let (lo, hi) = self.norm[c];
                if hi - lo < 1e-12 {
                    // degenerate fit range (e.g. one point per class):
                    // fall back to the density ratio against the peak
                    (lp - hi).exp().clamp(0.0, 1.0)
                } else {
                    ((lp - lo) / (hi - lo)).clamp(0.0, 1.0)
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_per_class_peaks_at_its_point() {
        let zs = vec![vec![0.0, 0.0], vec![5.0, 5.0]];
        let labels = vec![0, 1];
        let m = KdeModel::fit(&zs, &labels, 2, 1.0).unwrap();
        let s = m.score(&[0.0, 0.0]).unwrap();
        assert!(s[0] > s[1], "class-0 score strictly maximal: {s:?}");
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scores_decay_far_from_data() {
        let zs: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i % 5) as f64 * 0.1, (i / 5) as f64 * 0.1])
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let m = KdeModel::fit(&zs, &labels, 2, 0.5).unwrap();
        let far = m.score(&[100.0, 100.0]).unwrap();
        assert!(far.iter().all(|&v| v == 0.0), "{far:?}");
    }

    #[test]
    fn empty_class_is_degenerate() {
        let zs = vec![vec![0.0], vec![1.0]];
        let labels = vec![0, 0];
        assert!(matches!(
            KdeModel::fit(&zs, &labels, 2, 1.0),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn scores_are_in_unit_interval_on_fit_points() {
        let zs: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.61).cos()])
            .collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let m = KdeModel::fit(&zs, &labels, 3, 0.3).unwrap();
        for z in &zs {
            for v in m.score(z).unwrap() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
