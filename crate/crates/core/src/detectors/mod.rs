//! Layer detectors: map a tapped representation to a per-class score vector.
//!
//! Four variants are supported. The RBF network is the prototype-budgeted
//! one; SVM-RBF, k-NN, and KDE are the instance-based references whose
//! prototype counts are determined by the data. Smooth variants (RBF net,
//! SVM-RBF) expose exact input gradients for the white-box attack chain;
//! k-NN and KDE take part in clean evaluation and black-box curves only.

mod kde;
mod kmeans;
mod knn;
mod rbf_net;
mod svm;

pub use kde::KdeModel;
pub use knn::KnnModel;
pub use rbf_net::{fit_rbf_net, RbfNetModel, RbfTrainConfig};
pub use svm::{
    fit_svm_rbf, fit_svm_rbf_with_report, gram_matrix, median_heuristic_gamma, solve_binary_smo,
    BinarySvmSolution, SvmFitReport, SvmRbfModel,
};

pub(crate) use rbf_net::ce_upstream;

use crate::error::{Error, Result};
use crate::fileio::{fmt_f64_row, parse_f64, parse_f64_row, parse_usize, LineParser};
use crate::linalg::{squared_euclidean_unchecked, DenseMatrix, KernelConvention};
use crate::rng::RngSeed;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A fitted layer detector.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectorModel {
    RbfNet(RbfNetModel),
    SvmRbf(SvmRbfModel),
    Knn(KnnModel),
    Kde(KdeModel),
}

impl DetectorModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            DetectorModel::RbfNet(_) => "rbf_net",
            DetectorModel::SvmRbf(_) => "svm_rbf",
            DetectorModel::Knn(_) => "knn",
            DetectorModel::Kde(_) => "kde",
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            DetectorModel::RbfNet(m) => m.class_count(),
            DetectorModel::SvmRbf(m) => m.class_count(),
            DetectorModel::Knn(m) => m.class_count(),
            DetectorModel::Kde(m) => m.class_count(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            DetectorModel::RbfNet(m) => m.input_dim(),
            DetectorModel::SvmRbf(m) => m.input_dim(),
            DetectorModel::Knn(m) => m.input_dim(),
            DetectorModel::Kde(m) => m.input_dim(),
        }
    }

    /// Per-class on-manifold score vector for a layer representation.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            DetectorModel::RbfNet(m) => m.score(z),
            DetectorModel::SvmRbf(m) => m.score(z),
            DetectorModel::Knn(m) => m.score(z),
            DetectorModel::Kde(m) => m.score(z),
        }
    }

    /// Exact analytic gradient of `<upstream, score(z)>` w.r.t. `z`; only
    /// the smooth variants support it.
    pub fn grad_input(&self, z: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        match self {
            DetectorModel::RbfNet(m) => m.grad_input(z, upstream),
            DetectorModel::SvmRbf(m) => m.grad_input(z, upstream),
            DetectorModel::Knn(_) => Err(Error::NotDifferentiable(
                "k-NN detector: white-box gradients need a smooth detector (svm_rbf or rbf_net); \
                 k-NN is for clean evaluation and black-box curves"
                    .into(),
            )),
            DetectorModel::Kde(_) => Err(Error::NotDifferentiable(
                "KDE detector: clamped score normalization is not differentiable at attack time; \
                 use svm_rbf or rbf_net for white-box gradients"
                    .into(),
            )),
        }
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(self, DetectorModel::RbfNet(_) | DetectorModel::SvmRbf(_))
    }

    /// Reference prototypes the detector compares a query against: the fixed
    /// budget for RBF nets, support vectors for SVMs, stored points for k-NN
    /// and KDE.
    pub fn prototype_count(&self) -> usize {
        match self {
            DetectorModel::RbfNet(m) => m.prototype_count(),
            DetectorModel::SvmRbf(m) => m.support_vector_count(),
            DetectorModel::Knn(m) => m.stored_count(),
            DetectorModel::Kde(m) => m.stored_count(),
        }
    }

    /// Gamma-smoothing surrogate with widened kernels.
    pub fn with_scaled_bandwidths(&self, scale: f64) -> Result<DetectorModel> {
        match self {
            DetectorModel::RbfNet(m) => Ok(DetectorModel::RbfNet(m.with_scaled_bandwidths(scale)?)),
            DetectorModel::SvmRbf(m) => Ok(DetectorModel::SvmRbf(m.with_scaled_bandwidths(scale)?)),
            other => Err(Error::NotDifferentiable(format!(
                "{} detector has no smooth surrogate",
                other.kind_name()
            ))),
        }
    }
}

/// Fit plan for one detector, as written in experiment configurations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorSpec {
    RbfNet {
        prototypes: usize,
        #[serde(default = "default_rbf_epochs")]
        epochs: usize,
        #[serde(default = "default_rbf_lr")]
        learning_rate: f64,
        #[serde(default = "default_rbf_batch")]
        batch_size: usize,
    },
    SvmRbf {
        #[serde(default = "default_svm_c")]
        c: f64,
        /// Explicit bandwidth; when absent the median pairwise-distance
        /// heuristic chooses one from the fit data.
        gamma: Option<f64>,
    },
    Knn {
        k: usize,
    },
    Kde {
        bandwidth: Option<f64>,
    },
}

fn default_rbf_epochs() -> usize {
    250
}
fn default_rbf_lr() -> f64 {
    1e-3
}
fn default_rbf_batch() -> usize {
    128
}
fn default_svm_c() -> f64 {
    1.0
}

impl DetectorSpec {
    pub fn rbf_net(prototypes: usize) -> Self {
        DetectorSpec::RbfNet {
            prototypes,
            epochs: default_rbf_epochs(),
            learning_rate: default_rbf_lr(),
            batch_size: default_rbf_batch(),
        }
    }

    pub fn svm_rbf(c: f64, gamma: Option<f64>) -> Self {
        DetectorSpec::SvmRbf { c, gamma }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            DetectorSpec::RbfNet { .. } => "rbf_net",
            DetectorSpec::SvmRbf { .. } => "svm_rbf",
            DetectorSpec::Knn { .. } => "knn",
            DetectorSpec::Kde { .. } => "kde",
        }
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(self, DetectorSpec::RbfNet { .. } | DetectorSpec::SvmRbf { .. })
    }
}

/// Fit a detector of the given kind on `(z, label)` pairs.
pub fn fit_detector(
    spec: &DetectorSpec,
    zs: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    convention: KernelConvention,
    seed: RngSeed,
) -> Result<DetectorModel> {
    match spec {
        DetectorSpec::RbfNet {
            prototypes,
            epochs,
            learning_rate,
            batch_size,
        } => {
            let cfg = RbfTrainConfig {
                epochs: *epochs,
                learning_rate: *learning_rate,
                batch_size: *batch_size,
            };
            fit_rbf_net(zs, labels, class_count, *prototypes, &cfg, convention, seed)
                .map(DetectorModel::RbfNet)
        }
        DetectorSpec::SvmRbf { c, gamma } => {
            let gamma = gamma.unwrap_or_else(|| {
                median_heuristic_gamma(zs, convention, &mut seed.stream("svm-gamma"))
            });
            fit_svm_rbf(zs, labels, class_count, *c, gamma, convention).map(DetectorModel::SvmRbf)
        }
        DetectorSpec::Knn { k } => {
            KnnModel::fit(zs, labels, class_count, *k).map(DetectorModel::Knn)
        }
        DetectorSpec::Kde { bandwidth } => {
            let h = bandwidth.unwrap_or_else(|| median_kde_bandwidth(zs, seed));
            KdeModel::fit(zs, labels, class_count, h).map(DetectorModel::Kde)
        }
    }
}

fn median_kde_bandwidth(zs: &[Vec<f64>], seed: RngSeed) -> f64 {
    use rand::Rng;
    let mut rng = seed.stream("kde-bandwidth");
    let n = zs.len();
    let mut d2s: Vec<f64> = (0..500.min(n * n))
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
    (d2s[d2s.len() / 2].sqrt() / 2.0).max(1e-6)
}

// ---------------------------------------------------------------------------
// detector files: versioned text, variant tag + hyperparameters + row-major
// prototype/support-vector payloads
// ---------------------------------------------------------------------------

const HEADER: &str = "advrej-detector";
const VERSION: &str = "v1";

pub fn save_detector(model: &DetectorModel, path: &Path) -> Result<()> {
    std::fs::write(path, detector_to_text(model))?;
    Ok(())
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    let text = std::fs::read_to_string(path)?;
    detector_from_text(&text)
}

fn write_matrix(out: &mut String, name: &str, m: &DenseMatrix) {
    out.push_str(&format!("{name} {} {}\n", m.rows(), m.cols()));
    for r in m.iter_rows() {
        out.push_str(&fmt_f64_row(r));
        out.push('\n');
    }
}

pub(crate) fn detector_to_text(model: &DetectorModel) -> String {
    let mut out = String::new();
    out.push_str(&format!("{HEADER} {VERSION}\n"));
    out.push_str(&format!("variant {}\n", model.kind_name()));
    out.push_str(&format!("classes {}\n", model.class_count()));
    out.push_str(&format!("dim {}\n", model.input_dim()));
    match model {
        DetectorModel::RbfNet(m) => {
            out.push_str(&format!("convention {}\n", m.convention()));
            write_matrix(&mut out, "prototypes", m.prototypes());
            out.push_str(&format!("bandwidths {}\n", m.prototype_count()));
            out.push_str(&fmt_f64_row(&m.bandwidths()));
            out.push('\n');
            write_matrix(&mut out, "weights", m.out_weights());
            out.push_str(&format!("bias {}\n", m.out_bias().len()));
            out.push_str(&fmt_f64_row(m.out_bias()));
            out.push('\n');
        }
        DetectorModel::SvmRbf(m) => {
            out.push_str(&format!("convention {}\n", m.convention()));
            out.push_str(&format!("gamma {}\n", m.gamma()));
            out.push_str(&format!("c {}\n", m.c_param()));
            write_matrix(&mut out, "support_vectors", m.support_vectors());
            write_matrix(&mut out, "dual_coefs", m.dual_coefs());
            out.push_str(&format!("bias {}\n", m.bias().len()));
            out.push_str(&fmt_f64_row(m.bias()));
            out.push('\n');
        }
        DetectorModel::Knn(m) => {
            out.push_str(&format!("k {}\n", m.k()));
            write_matrix(&mut out, "points", m.stored_points());
            out.push_str(&format!("labels {}\n", m.stored_labels().len()));
            let labels: Vec<String> = m.stored_labels().iter().map(|l| l.to_string()).collect();
            out.push_str(&labels.join(" "));
            out.push('\n');
        }
        DetectorModel::Kde(m) => {
            out.push_str(&format!("bandwidth {}\n", m.bandwidth()));
            out.push_str(&format!("norm {}\n", m.class_count()));
            for (lo, hi) in m.norm() {
                out.push_str(&fmt_f64_row(&[*lo, *hi]));
                out.push('\n');
            }
            for (c, pts) in m.per_class_points().iter().enumerate() {
                write_matrix(&mut out, &format!("class_points_{c}"), pts);
            }
        }
    }
    out
}

fn read_matrix(p: &mut LineParser, name: &str) -> Result<DenseMatrix> {
    let (at, f) = p.expect_fields(name)?;
    let rows = parse_usize(at, f.get(1).copied().unwrap_or(""), "rows")?;
    let cols = parse_usize(at, f.get(2).copied().unwrap_or(""), "cols")?;
    let mut vals = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let (at, line) = p.expect_line("matrix row")?;
        vals.extend(parse_f64_row(at, line, cols, "value")?);
    }
    DenseMatrix::new(rows, cols, vals)
}

fn read_scalar_line(p: &mut LineParser, name: &str) -> Result<f64> {
    let (at, f) = p.expect_fields(name)?;
    parse_f64(at, f.get(1).copied().unwrap_or(""), name)
}

pub(crate) fn detector_from_text(text: &str) -> Result<DetectorModel> {
    let mut p = LineParser::new(text);
    let (at, line) = p.expect_line("header")?;
    let mut fields = line.split_whitespace();
    if fields.next() != Some(HEADER) {
        return Err(Error::parse(at, format!("expected `{HEADER}` header")));
    }
    let version = fields.next().unwrap_or("");
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version.to_string(),
            supported: VERSION.to_string(),
        });
    }
    let (at, f) = p.expect_fields("variant")?;
    let variant = *f.get(1).ok_or_else(|| Error::parse(at, "missing variant"))?;
    let (at, f) = p.expect_fields("classes")?;
    let classes = parse_usize(at, f.get(1).copied().unwrap_or(""), "classes")?;
    let (at, f) = p.expect_fields("dim")?;
    let _dim = parse_usize(at, f.get(1).copied().unwrap_or(""), "dim")?;

    let read_convention = |p: &mut LineParser| -> Result<KernelConvention> {
        let (at, f) = p.expect_fields("convention")?;
        match f.get(1).copied() {
            Some("multiplier") => Ok(KernelConvention::Multiplier),
            Some("inverse_bandwidth") => Ok(KernelConvention::InverseBandwidth),
            other => Err(Error::parse(at, format!("unknown convention {other:?}"))),
        }
    };

    match variant {
        "rbf_net" => {
            let conv = read_convention(&mut p)?;
            let prototypes = read_matrix(&mut p, "prototypes")?;
            let (at, f) = p.expect_fields("bandwidths")?;
            let n = parse_usize(at, f.get(1).copied().unwrap_or(""), "bandwidth count")?;
            let (at, line) = p.expect_line("bandwidths")?;
            let bandwidths = parse_f64_row(at, line, n, "bandwidth")?;
            let weights = read_matrix(&mut p, "weights")?;
            let (at, f) = p.expect_fields("bias")?;
            let n = parse_usize(at, f.get(1).copied().unwrap_or(""), "bias length")?;
            let (at, line) = p.expect_line("bias")?;
            let bias = parse_f64_row(at, line, n, "bias")?;
            Ok(DetectorModel::RbfNet(RbfNetModel::new(
                prototypes, bandwidths, weights, bias, conv,
            )?))
        }
        "svm_rbf" => {
            let conv = read_convention(&mut p)?;
            let gamma = read_scalar_line(&mut p, "gamma")?;
            let c = read_scalar_line(&mut p, "c")?;
            let support_vectors = read_matrix(&mut p, "support_vectors")?;
            let dual_coefs = read_matrix(&mut p, "dual_coefs")?;
            let (at, f) = p.expect_fields("bias")?;
            let n = parse_usize(at, f.get(1).copied().unwrap_or(""), "bias length")?;
            let (at, line) = p.expect_line("bias")?;
            let bias = parse_f64_row(at, line, n, "bias")?;
            Ok(DetectorModel::SvmRbf(SvmRbfModel::from_parts(
                support_vectors,
                dual_coefs,
                bias,
                gamma,
                c,
                conv,
            )?))
        }
        "knn" => {
            let (at, f) = p.expect_fields("k")?;
            let k = parse_usize(at, f.get(1).copied().unwrap_or(""), "k")?;
            let points = read_matrix(&mut p, "points")?;
            let (at, f) = p.expect_fields("labels")?;
            let n = parse_usize(at, f.get(1).copied().unwrap_or(""), "label count")?;
            let (at, line) = p.expect_line("labels")?;
            let labels: Vec<usize> = line
                .split_whitespace()
                .map(|s| parse_usize(at, s, "label"))
                .collect::<Result<_>>()?;
            if labels.len() != n {
                return Err(Error::parse(at, format!("expected {n} labels, found {}", labels.len())));
            }
            let rows: Vec<Vec<f64>> = points.iter_rows().map(|r| r.to_vec()).collect();
            Ok(DetectorModel::Knn(KnnModel::fit(&rows, &labels, classes, k)?))
        }
        "kde" => {
            let bandwidth = read_scalar_line(&mut p, "bandwidth")?;
            let (at, f) = p.expect_fields("norm")?;
            let n = parse_usize(at, f.get(1).copied().unwrap_or(""), "norm count")?;
            let mut norm = Vec::with_capacity(n);
            for _ in 0..n {
                let (at, line) = p.expect_line("norm row")?;
                let row = parse_f64_row(at, line, 2, "norm")?;
                norm.push((row[0], row[1]));
            }
            let mut per_class = Vec::with_capacity(classes);
            for c in 0..classes {
                per_class.push(read_matrix(&mut p, &format!("class_points_{c}"))?);
            }
            Ok(DetectorModel::Kde(KdeModel::from_parts(bandwidth, per_class, norm)))
        }
        other => Err(Error::parse(at, format!("unknown detector variant `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blob_data(seed: RngSeed) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seed.stream("blobs");
        let centers = [[0.0, 0.0], [1.0, 0.2], [0.4, 1.0]];
        let mut zs = Vec::new();
        let mut labels = Vec::new();
        for (ci, c) in centers.iter().enumerate() {
            for _ in 0..25 {
                zs.push(vec![
                    c[0] + 0.07 * rng.random_range(-1.0..1.0),
                    c[1] + 0.07 * rng.random_range(-1.0..1.0),
                ]);
                labels.push(ci);
            }
        }
        (zs, labels)
    }

    #[test]
    fn detector_files_round_trip_all_variants() {
        let seed = RngSeed(13);
        let (zs, labels) = blob_data(seed);
        let dir = tempfile::tempdir().unwrap();
        let specs = vec![
            DetectorSpec::rbf_net(3),
            DetectorSpec::svm_rbf(1.0, Some(1.0)),
            DetectorSpec::Knn { k: 3 },
            DetectorSpec::Kde { bandwidth: Some(0.2) },
        ];
        for (i, spec) in specs.iter().enumerate() {
            let mut s = spec.clone();
            if let DetectorSpec::RbfNet { epochs, .. } = &mut s {
                *epochs = 20;
            }
            let m = fit_detector(&s, &zs, &labels, 3, KernelConvention::Multiplier, seed).unwrap();
            let path = dir.path().join(format!("det{i}.txt"));
            save_detector(&m, &path).unwrap();
            let loaded = load_detector(&path).unwrap();
            for z in zs.iter().take(10) {
                let a = m.score(z).unwrap();
                let b = loaded.score(z).unwrap();
                assert_eq!(a, b, "variant {} score identical after round trip", m.kind_name());
            }
            assert_eq!(m.prototype_count(), loaded.prototype_count());
        }
    }

    #[test]
    fn knn_and_kde_refuse_gradients() {
        let seed = RngSeed(13);
        let (zs, labels) = blob_data(seed);
        let knn = fit_detector(
            &DetectorSpec::Knn { k: 3 },
            &zs,
            &labels,
            3,
            KernelConvention::Multiplier,
            seed,
        )
        .unwrap();
        assert!(matches!(
            knn.grad_input(&zs[0], &[1.0, 0.0, 0.0]),
            Err(Error::NotDifferentiable(_))
        ));
        let kde = fit_detector(
            &DetectorSpec::Kde { bandwidth: None },
            &zs,
            &labels,
            3,
            KernelConvention::Multiplier,
            seed,
        )
        .unwrap();
        assert!(matches!(
            kde.grad_input(&zs[0], &[1.0, 0.0, 0.0]),
            Err(Error::NotDifferentiable(_))
        ));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        assert!(matches!(
            detector_from_text("advrej-detector v7\nvariant knn\n"),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn rbf_net_uses_fewer_prototypes_than_svm_on_blobs() {
        let seed = RngSeed(29);
        let (zs, labels) = blob_data(seed);
        let mut rbf_spec = DetectorSpec::rbf_net(3);
        if let DetectorSpec::RbfNet { batch_size, .. } = &mut rbf_spec {
            *batch_size = 32;
        }
        let rbf = fit_detector(&rbf_spec, &zs, &labels, 3, KernelConvention::Multiplier, seed).unwrap();
        let svm = fit_detector(
            &DetectorSpec::svm_rbf(1.0, Some(1.0)),
            &zs,
            &labels,
            3,
            KernelConvention::Multiplier,
            seed,
        )
        .unwrap();
        assert_eq!(rbf.prototype_count(), 3);
        assert!(svm.prototype_count() >= 10);
        // both classify the blobs well
        for m in [&rbf, &svm] {
            let correct = zs
                .iter()
                .zip(&labels)
                .filter(|(z, &y)| crate::linalg::argmax(&m.score(z).unwrap()) == y)
                .count();
            assert!(correct as f64 / zs.len() as f64 >= 0.95, "{}", m.kind_name());
        }
    }
}
