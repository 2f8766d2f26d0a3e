//! Seeded Lloyd iteration for prototype initialization.

use crate::linalg::squared_euclidean_unchecked;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

/// `k` centroids of `points`, deterministic given the RNG state. Empty
/// clusters keep their previous center.
pub fn kmeans(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng, max_iters: usize) -> Vec<Vec<f64>> {
    assert!(k >= 1 && k <= points.len());
    let dim = points[0].len();
    let picks = sample(rng, points.len(), k);
    let mut centers: Vec<Vec<f64>> = picks.iter().map(|i| points[i].to_vec()).collect();
    let mut assign = vec![0usize; points.len()];

    for _ in 0..max_iters {
        let mut changed = false;
        for (pi, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let d = squared_euclidean_unchecked(p, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if assign[pi] != best {
                assign[pi] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (pi, p) in points.iter().enumerate() {
            let c = assign[pi];
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(*p) {
                *s += v;
            }
        }
        for (ci, center) in centers.iter_mut().enumerate() {
            if counts[ci] > 0 {
                for (c, s) in center.iter_mut().zip(&sums[ci]) {
                    *c = s / counts[ci] as f64;
                }
            }
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;

    #[test]
    fn recovers_two_separated_clusters() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let t = i as f64 * 0.01;
            pts.push(vec![t, t]);
            pts.push(vec![10.0 + t, 10.0 + t]);
        }
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let mut rng = RngSeed(1).stream("kmeans-test");
        let mut centers = kmeans(&refs, 2, &mut rng, 50);
        centers.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!((centers[0][0] - 0.095).abs() < 0.05);
        assert!((centers[1][0] - 10.095).abs() < 0.05);
    }

    #[test]
    fn deterministic_given_seed() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let a = kmeans(&refs, 5, &mut RngSeed(9).stream("s"), 50);
        let b = kmeans(&refs, 5, &mut RngSeed(9).stream("s"), 50);
        assert_eq!(a, b);
    }
}
