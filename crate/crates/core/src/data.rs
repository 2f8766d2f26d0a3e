//! Dataset ingestion: IDX image/label pairs, labeled CSV, and synthetic
//! Gaussian blobs.

use crate::error::{Error, Result};
use crate::fileio::ByteParser;
use crate::rng::RngSeed;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Labeled dataset with features flattened row-major into [0, 1]-scaled
/// vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map(|f| f.len()).unwrap_or(0)
    }

    /// Seeded in-place shuffle keeping features and labels aligned.
    pub fn shuffle(&mut self, seed: RngSeed) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seed.stream("dataset-shuffle"));
        self.features = order.iter().map(|&i| self.features[i].clone()).collect();
        self.labels = order.iter().map(|&i| self.labels[i]).collect();
    }

    /// Split off disjoint consecutive chunks of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<Dataset>> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(Error::config(format!(
                "splits require {total} samples, dataset has {}",
                self.len()
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(Dataset {
                features: self.features[start..start + s].to_vec(),
                labels: self.labels[start..start + s].to_vec(),
                class_count: self.class_count,
            });
            start += s;
        }
        Ok(out)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parse a canonical IDX image/label file pair (big-endian headers, magic
/// 0x803 for images and 0x801 for labels), flatten images row-major, and
/// scale pixels into [0, 1] by dividing by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let mut ip = ByteParser::new(&img_bytes);
    let magic = ip.read_u32_be("image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            0,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = ip.read_u32_be("image count")? as usize;
    let rows = ip.read_u32_be("rows")? as usize;
    let cols = ip.read_u32_be("cols")? as usize;
    let dim = rows * cols;
    let payload = ip.take(count * dim, "image payload")?;

    let mut lp = ByteParser::new(&lbl_bytes);
    let magic = lp.read_u32_be("label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            0,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let lbl_count = lp.read_u32_be("label count")? as usize;
    if lbl_count != count {
        return Err(Error::parse(
            4,
            format!("label count {lbl_count} does not match image count {count}"),
        ));
    }
    let lbl_payload = lp.take(count, "label payload")?;

    let features: Vec<Vec<f64>> = payload
        .chunks_exact(dim)
        .map(|px| px.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = lbl_payload.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        features,
        labels,
        class_count,
    })
}

/// Labeled CSV: header mandatory, one row per sample, label in the last
/// column.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(0, "empty CSV file (header is mandatory)"))?;
    let dim = header.split(',').count().saturating_sub(1);
    if dim == 0 {
        return Err(Error::parse(0, "CSV needs at least one feature column plus the label"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut offset = header.len() + 1;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            offset += line.len() + 1;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::parse(
                offset,
                format!("line {}: expected {} columns, found {}", lineno + 1, dim + 1, fields.len()),
            ));
        }
        let row: Vec<f64> = fields[..dim]
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(offset, format!("invalid feature `{s}`")))
            })
            .collect::<Result<_>>()?;
        let label: usize = fields[dim]
            .trim()
            .parse()
            .map_err(|_| Error::parse(offset, format!("invalid label `{}`", fields[dim])))?;
        features.push(row);
        labels.push(label);
        offset += line.len() + 1;
    }
    if features.is_empty() {
        return Err(Error::parse(offset, "CSV has a header but no data rows"));
    }
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        features,
        labels,
        class_count,
    })
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for j in 0..ds.dim() {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for (x, y) in ds.features.iter().zip(&ds.labels) {
        for v in x {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{y}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parameters for isotropic Gaussian clusters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobSpec {
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub samples_per_class: usize,
}

impl BlobSpec {
    /// Three well-separated classes in the unit square, the standard toy
    /// layout (pairwise center distances at least 10 sigma).
    pub fn toy_triangle() -> Self {
        Self {
            centers: vec![vec![0.25, 0.25], vec![0.75, 0.25], vec![0.5, 0.72]],
            sigma: 0.04,
            samples_per_class: 100,
        }
    }
}

/// Sample isotropic Gaussian clusters; deterministic given the seed.
pub fn synth_blobs(spec: &BlobSpec, seed: RngSeed) -> Result<Dataset> {
    if spec.centers.len() < 2 {
        return Err(Error::parameter("blob generation needs at least 2 classes"));
    }
    if spec.sigma <= 0.0 {
        return Err(Error::parameter("sigma must be positive"));
    }
    if spec.samples_per_class < 1 {
        return Err(Error::parameter("samples_per_class must be at least 1"));
    }
    let dim = spec.centers[0].len();
    if spec.centers.iter().any(|c| c.len() != dim) {
        return Err(Error::parameter("all centers must share one dimension"));
    }
    let mut rng = seed.stream("blobs");
    let mut features = Vec::with_capacity(spec.centers.len() * spec.samples_per_class);
    let mut labels = Vec::with_capacity(features.capacity());
    for (ci, center) in spec.centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|&m| m + spec.sigma * standard_normal(&mut rng))
                .collect();
            features.push(x);
            labels.push(ci);
        }
    }
    Ok(Dataset {
        features,
        labels,
        class_count: spec.centers.len(),
    })
}

/// Box-Muller standard normal draw.
fn standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture(count: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(count as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..count * rows * cols {
            img.push((i % 256) as u8);
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&(count as u32).to_be_bytes());
        for i in 0..count {
            lbl.push((i % 10) as u8);
        }
        (img, lbl)
    }

    #[test]
    fn idx_round_trip_with_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = idx_fixture(50, 2, 3);
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 50);
        assert_eq!(ds.dim(), 6);
        assert_eq!(ds.features[42 / 6][42 % 6], 42.0 / 255.0);
        // pixel byte 255 maps exactly to 1.0
        let idx255 = 255;
        assert_eq!(ds.features[idx255 / 6][idx255 % 6], 1.0);
    }

    #[test]
    fn idx_magic_mismatch_and_truncation_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lbl) = idx_fixture(3, 2, 2);
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        img[3] = 0x09; // corrupt magic
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Parse { .. })));

        let (img, lbl) = idx_fixture(3, 2, 2);
        std::fs::write(&ip, &img[..img.len() - 2]).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        let err = load_idx(&ip, &lp);
        match err {
            Err(Error::Parse { offset, .. }) => assert!(offset >= 16),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mut lbl) = idx_fixture(3, 2, 2);
        lbl[7] = 9; // label count now 9, images 3
        lbl.extend(std::iter::repeat(0u8).take(6));
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            features: vec![vec![0.25, 0.5], vec![1.0, 0.125]],
            labels: vec![1, 0],
            class_count: 2,
        };
        let p = dir.path().join("d.csv");
        save_csv(&ds, &p).unwrap();
        let loaded = load_csv(&p).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn csv_requires_header_and_consistent_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "a,b,label\n1.0,2.0,0\n3.0,1\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn blobs_are_deterministic_and_separable() {
        let spec = BlobSpec::toy_triangle();
        let a = synth_blobs(&spec, RngSeed(1)).unwrap();
        let b = synth_blobs(&spec, RngSeed(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 300);
        // pairwise center distances at least 10 sigma
        for (i, ci) in spec.centers.iter().enumerate() {
            for cj in spec.centers.iter().skip(i + 1) {
                let d: f64 = ci
                    .iter()
                    .zip(cj)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 10.0 * spec.sigma);
            }
        }
    }

    #[test]
    fn single_sample_per_class_gives_c_samples() {
        let spec = BlobSpec {
            samples_per_class: 1,
            ..BlobSpec::toy_triangle()
        };
        let ds = synth_blobs(&spec, RngSeed(2)).unwrap();
        assert_eq!(ds.len(), 3);
    }

    #[test]
    fn split_sizes_are_enforced() {
        let ds = synth_blobs(&BlobSpec::toy_triangle(), RngSeed(3)).unwrap();
        let parts = ds.split(&[100, 50, 50]).unwrap();
        assert_eq!(parts[0].len(), 100);
        assert_eq!(parts[2].len(), 50);
        assert!(ds.split(&[200, 200]).is_err());
    }
}
