//! k-nearest-neighbour layer detector: per-class neighbour fractions.

use crate::error::{Error, Result};
use crate::linalg::{squared_euclidean_unchecked, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    k: usize,
    stored_points: DenseMatrix,
    stored_labels: Vec<usize>,
    class_count: usize,
}

impl KnnModel {
    pub fn fit(zs: &[Vec<f64>], labels: &[usize], class_count: usize, k: usize) -> Result<Self> {
        if zs.is_empty() {
            return Err(Error::parameter("training set is empty"));
        }
        if zs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: zs.len(),
                got: labels.len(),
            });
        }
        if k < 1 || k > zs.len() {
            return Err(Error::parameter(format!(
                "k = {k} must be in 1..={}",
                zs.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::parameter(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            k,
            stored_points: DenseMatrix::from_rows(zs)?,
            stored_labels: labels.to_vec(),
            class_count,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn stored_count(&self) -> usize {
        self.stored_points.rows()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.stored_points.cols()
    }

    pub fn stored_points(&self) -> &DenseMatrix {
        &self.stored_points
    }

    pub fn stored_labels(&self) -> &[usize] {
        &self.stored_labels
    }

    /// Fraction of the k nearest stored points belonging to each class.
    /// Distance ties break toward the lower stored index, keeping scoring
    /// deterministic.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        let mut dists: Vec<(f64, usize)> = self
            .stored_points
            .iter_rows()
            .enumerate()
            .map(|(i, p)| (squared_euclidean_unchecked(z, p), i))
            .collect();
        dists.select_nth_unstable_by(self.k - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        let mut counts = vec![0usize; self.class_count];
        for (_, idx) in &dists[..self.k] {
            counts[self.stored_labels[*idx]] += 1;
        }
        Ok(counts
            .into_iter()
            .map(|c| c as f64 / self.k as f64)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_nn_on_a_stored_point_is_one_hot() {
        let zs = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        let labels = vec![0, 2, 1];
        let m = KnnModel::fit(&zs, &labels, 3, 1).unwrap();
        assert_eq!(m.score(&[1.0, 1.0]).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn fractions_sum_to_one() {
        let zs: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let m = KnnModel::fit(&zs, &labels, 3, 4).unwrap();
        let s = m.score(&[4.2]).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_must_not_exceed_stored_count() {
        let zs = vec![vec![0.0]];
        assert!(KnnModel::fit(&zs, &[0], 1, 2).is_err());
    }
}
