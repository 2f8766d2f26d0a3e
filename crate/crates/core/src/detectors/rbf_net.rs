//! Size-constrained RBF network detectors.
//!
//! The network holds a fixed budget of `r` prototypes, a per-prototype
//! bandwidth, and a linear read-out to `c` class scores. Prototypes,
//! bandwidths, and read-out weights are all trained jointly by Adam on
//! softmax cross-entropy, so unlike instance-based detectors the number of
//! reference points compared per query is a structural constant chosen up
//! front. Bandwidth positivity is enforced by optimizing `log gamma`.

use crate::detectors::kmeans::kmeans;
use crate::error::{Error, Result};
use crate::linalg::{softmax, squared_euclidean_unchecked, DenseMatrix, KernelConvention};
use crate::rng::RngSeed;
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RbfNetModel {
    /// r x d prototype matrix.
    prototypes: DenseMatrix,
    /// Per-prototype log bandwidth.
    log_gamma: Vec<f64>,
    /// c x r read-out weights.
    out_weights: DenseMatrix,
    out_bias: Vec<f64>,
    convention: KernelConvention,
}

impl RbfNetModel {
    pub fn new(
        prototypes: DenseMatrix,
        bandwidths: Vec<f64>,
        out_weights: DenseMatrix,
        out_bias: Vec<f64>,
        convention: KernelConvention,
    ) -> Result<Self> {
        let r = prototypes.rows();
        if r < 1 {
            return Err(Error::parameter("prototype budget must be at least 1"));
        }
        if bandwidths.len() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: bandwidths.len(),
            });
        }
        if bandwidths.iter().any(|&g| g <= 0.0 || !g.is_finite()) {
            return Err(Error::parameter("bandwidths must be positive"));
        }
        if out_weights.cols() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: out_weights.cols(),
            });
        }
        if out_bias.len() != out_weights.rows() {
            return Err(Error::DimensionMismatch {
                expected: out_weights.rows(),
                got: out_bias.len(),
            });
        }
        Ok(Self {
            prototypes,
            log_gamma: bandwidths.iter().map(|g| g.ln()).collect(),
            out_weights,
            out_bias,
            convention,
        })
    }

    pub fn prototype_count(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn class_count(&self) -> usize {
        self.out_weights.rows()
    }

    pub fn prototypes(&self) -> &DenseMatrix {
        &self.prototypes
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        self.log_gamma.iter().map(|lg| lg.exp()).collect()
    }

    pub fn out_weights(&self) -> &DenseMatrix {
        &self.out_weights
    }

    pub fn out_bias(&self) -> &[f64] {
        &self.out_bias
    }

    pub fn convention(&self) -> KernelConvention {
        self.convention
    }

    /// Copy with every bandwidth scaled so that kernels widen by `scale`
    /// (gamma smoothing: the effective multiplier gamma becomes
    /// `scale * gamma`).
    pub fn with_scaled_bandwidths(&self, scale: f64) -> Result<Self> {
        if scale <= 0.0 || scale > 1.0 {
            return Err(Error::parameter(format!(
                "bandwidth scale must be in (0, 1], got {scale}"
            )));
        }
        let mut out = self.clone();
        let shift = match self.convention {
            // multiplier: gamma' = scale * gamma widens the kernel
            KernelConvention::Multiplier => scale.ln(),
            // inverse: gamma' = gamma / scale widens the kernel
            KernelConvention::InverseBandwidth => -scale.ln(),
        };
        for lg in out.log_gamma.iter_mut() {
            *lg += shift;
        }
        Ok(out)
    }

    fn kernels(&self, z: &[f64]) -> Vec<f64> {
        self.prototypes
            .iter_rows()
            .zip(&self.log_gamma)
            .map(|(p, lg)| {
                let d2 = squared_euclidean_unchecked(z, p);
                self.convention.kernel_of_d2(d2, lg.exp())
            })
            .collect()
    }

    /// Per-class score vector `W k(z) + b`.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        let k = self.kernels(z);
        let mut s = self.out_weights.matvec(&k);
        for (si, bi) in s.iter_mut().zip(&self.out_bias) {
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
        // gk_i = (W^T u)_i, then dK_i/dz = rho_i K_i (p_i - z)
        let gk = self.out_weights.matvec_t(upstream);
        let mut grad = vec![0.0; z.len()];
        for ((p, lg), gki) in self.prototypes.iter_rows().zip(&self.log_gamma).zip(&gk) {
            if *gki == 0.0 {
                continue;
            }
            let gamma = lg.exp();
            let d2 = squared_euclidean_unchecked(z, p);
            let k = self.convention.kernel_of_d2(d2, gamma);
            let rho = match self.convention {
                KernelConvention::Multiplier => 2.0 * gamma,
                KernelConvention::InverseBandwidth => 2.0 / gamma,
            };
            let coeff = gki * k * rho;
            for ((g, pi), zi) in grad.iter_mut().zip(p).zip(z) {
                *g += coeff * (pi - zi);
            }
        }
        Ok(grad)
    }
}

// ---------------------------------------------------------------------------
// batch training machinery (shared by fit_rbf_net and the joint fine-tuning
// pass over stacked architectures)
// ---------------------------------------------------------------------------

pub(crate) struct RbfBatchTrace {
    /// B x r squared distances.
    pub d2: DenseMatrix,
    /// B x r kernel activations.
    pub k: DenseMatrix,
    /// B x c scores.
    pub scores: DenseMatrix,
}

pub(crate) struct RbfGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub p: Vec<f64>,
    pub log_gamma: Vec<f64>,
}

pub(crate) struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64, t: u64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let bc1 = 1.0 - B1.powi(t as i32);
        let bc2 = 1.0 - B2.powi(t as i32);
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

pub(crate) struct RbfAdamStates {
    w: AdamState,
    b: AdamState,
    p: AdamState,
    g: AdamState,
    pub t: u64,
}

impl RbfNetModel {
    pub(crate) fn adam_states(&self) -> RbfAdamStates {
        RbfAdamStates {
            w: AdamState::new(self.out_weights.values().len()),
            b: AdamState::new(self.out_bias.len()),
            p: AdamState::new(self.prototypes.values().len()),
            g: AdamState::new(self.log_gamma.len()),
            t: 0,
        }
    }

    pub(crate) fn forward_batch(&self, zs: &[&[f64]]) -> RbfBatchTrace {
        let bsz = zs.len();
        let r = self.prototype_count();
        let c = self.class_count();
        let mut d2 = DenseMatrix::zeros(bsz, r);
        let mut k = DenseMatrix::zeros(bsz, r);
        let mut scores = DenseMatrix::zeros(bsz, c);
        for (bi, z) in zs.iter().enumerate() {
            let d2row = d2.row_mut(bi);
            for (i, p) in self.prototypes.iter_rows().enumerate() {
                d2row[i] = squared_euclidean_unchecked(z, p);
            }
        }
        for bi in 0..bsz {
            let krow = k.row_mut(bi);
            let d2row = d2.row(bi);
            for i in 0..r {
                krow[i] = self.convention.kernel_of_d2(d2row[i], self.log_gamma[i].exp());
            }
            let srow = scores.row_mut(bi);
            for ci in 0..c {
                srow[ci] = self.out_bias[ci]
                    + krow
                        .iter()
                        .zip(self.out_weights.row(ci))
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
        }
        RbfBatchTrace { d2, k, scores }
    }

    /// Backward pass for an upstream cotangent over the batch scores.
    /// Optionally also returns the gradient with respect to the inputs
    /// (needed when this network consumes the output of another one).
    pub(crate) fn backward_batch(
        &self,
        zs: &[&[f64]],
        trace: &RbfBatchTrace,
        upstream: &DenseMatrix,
        want_input_grads: bool,
    ) -> (RbfGrads, Option<DenseMatrix>) {
        let bsz = zs.len();
        let r = self.prototype_count();
        let c = self.class_count();
        let d = self.input_dim();
        let gammas: Vec<f64> = self.log_gamma.iter().map(|lg| lg.exp()).collect();
        let rho: Vec<f64> = gammas
            .iter()
            .map(|&g| match self.convention {
                KernelConvention::Multiplier => 2.0 * g,
                KernelConvention::InverseBandwidth => 2.0 / g,
            })
            .collect();
        // d(log K)/d(log gamma) factor: kappa_i * d2
        let kappa: Vec<f64> = gammas
            .iter()
            .map(|&g| match self.convention {
                KernelConvention::Multiplier => -g,
                KernelConvention::InverseBandwidth => 1.0 / g,
            })
            .collect();

        let mut gw = vec![0.0; c * r];
        let mut gb = vec![0.0; c];
        let mut glg = vec![0.0; r];
        // col_coeff[i] = sum_b C[b][i], zsum[i] = sum_b C[b][i] * z_b
        let mut col_coeff = vec![0.0; r];
        let mut zsum = vec![0.0; r * d];
        let mut input_grads = want_input_grads.then(|| DenseMatrix::zeros(bsz, d));

        let mut gk = vec![0.0; r];
        for bi in 0..bsz {
            let u = upstream.row(bi);
            let krow = trace.k.row(bi);
            let d2row = trace.d2.row(bi);
            // gW += u^T k, gb += u
            for ci in 0..c {
                let uc = u[ci];
                if uc != 0.0 {
                    for (gwi, ki) in gw[ci * r..(ci + 1) * r].iter_mut().zip(krow) {
                        *gwi += uc * ki;
                    }
                }
                gb[ci] += uc;
            }
            // gk = W^T u
            for v in gk.iter_mut() {
                *v = 0.0;
            }
            for ci in 0..c {
                let uc = u[ci];
                if uc != 0.0 {
                    for (gki, wi) in gk.iter_mut().zip(self.out_weights.row(ci)) {
                        *gki += uc * wi;
                    }
                }
            }
            let z = zs[bi];
            let mut zcoef = 0.0;
            let mut zvec: Option<&mut [f64]> = input_grads.as_mut().map(|m| m.row_mut(bi));
            for i in 0..r {
                let coeff = gk[i] * krow[i];
                if coeff == 0.0 {
                    continue;
                }
                glg[i] += coeff * kappa[i] * d2row[i];
                col_coeff[i] += coeff;
                let rc = coeff * rho[i];
                for (zs_i, zi) in zsum[i * d..(i + 1) * d].iter_mut().zip(z) {
                    *zs_i += coeff * zi;
                }
                if let Some(zv) = zvec.as_deref_mut() {
                    // dK/dz = rho K (p - z)
                    let prow = self.prototypes.row(i);
                    for ((g, pi), zi) in zv.iter_mut().zip(prow).zip(z) {
                        *g += rc * (pi - zi);
                    }
                    zcoef += 0.0;
                }
            }
            let _ = zcoef;
        }
        // gP_i = rho_i * (zsum_i - col_coeff_i * p_i)
        let mut gp = vec![0.0; r * d];
        for i in 0..r {
            let prow = self.prototypes.row(i);
            for ((gpe, zse), pe) in gp[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&zsum[i * d..(i + 1) * d])
                .zip(prow)
            {
                *gpe = rho[i] * (zse - col_coeff[i] * pe);
            }
        }
        (
            RbfGrads {
                w: gw,
                b: gb,
                p: gp,
                log_gamma: glg,
            },
            input_grads,
        )
    }

    pub(crate) fn apply_step(&mut self, st: &mut RbfAdamStates, grads: &RbfGrads, lr: f64) {
        st.t += 1;
        let t = st.t;
        st.w.step(self.out_weights.values_mut(), &grads.w, lr, t);
        st.b.step(&mut self.out_bias, &grads.b, lr, t);
        st.p.step(self.prototypes.values_mut(), &grads.p, lr, t);
        st.g.step(&mut self.log_gamma, &grads.log_gamma, lr, t);
    }
}

/// Cross-entropy cotangent `softmax(s) - onehot(y)` scaled by `1/B` for a
/// batch of score rows.
pub(crate) fn ce_upstream(scores: &DenseMatrix, labels: &[usize]) -> (DenseMatrix, f64) {
    let bsz = scores.rows();
    let mut up = DenseMatrix::zeros(bsz, scores.cols());
    let mut loss = 0.0;
    for bi in 0..bsz {
        let p = softmax(scores.row(bi));
        loss -= p[labels[bi]].max(1e-300).ln();
        let row = up.row_mut(bi);
        for (ri, pi) in row.iter_mut().zip(&p) {
            *ri = pi / bsz as f64;
        }
        row[labels[bi]] -= 1.0 / bsz as f64;
    }
    (up, loss / bsz as f64)
}

#[derive(Debug, Clone)]
pub struct RbfTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for RbfTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            learning_rate: 1e-3,
            batch_size: 128,
        }
    }
}

/// Distribute a prototype budget evenly across the classes present in
/// `labels`, handing the remainder to the largest classes, and place the
/// initial prototypes at per-class k-means centroids.
fn init_prototypes(
    zs: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    r: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<DenseMatrix> {
    let mut counts = vec![0usize; class_count];
    for &y in labels {
        counts[y] += 1;
    }
    let present: Vec<usize> = (0..class_count).filter(|&c| counts[c] > 0).collect();
    let mut budget = vec![0usize; class_count];
    for &c in &present {
        budget[c] = r / present.len();
    }
    let mut by_size: Vec<usize> = present.clone();
    by_size.sort_by_key(|&c| (std::cmp::Reverse(counts[c]), c));
    let mut rem = r - (r / present.len()) * present.len();
    let mut i = 0;
    while rem > 0 {
        budget[by_size[i % by_size.len()]] += 1;
        rem -= 1;
        i += 1;
    }
    // classes smaller than their budget hand the spare slots to others
    let mut spare = 0;
    for &c in &present {
        if budget[c] > counts[c] {
            spare += budget[c] - counts[c];
            budget[c] = counts[c];
        }
    }
    while spare > 0 {
        let mut moved = false;
        for &c in &by_size {
            if spare > 0 && budget[c] < counts[c] {
                budget[c] += 1;
                spare -= 1;
                moved = true;
            }
        }
        if !moved {
            return Err(Error::parameter(format!(
                "prototype budget {r} exceeds the {} training points",
                zs.len()
            )));
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(r);
    for &c in &present {
        if budget[c] == 0 {
            continue;
        }
        let pts: Vec<&[f64]> = labels
            .iter()
            .zip(zs)
            .filter(|(&y, _)| y == c)
            .map(|(_, z)| z.as_slice())
            .collect();
        rows.extend(kmeans(&pts, budget[c], rng, 50));
    }
    DenseMatrix::from_rows(&rows)
}

/// Fit an RBF-network detector with exactly `r` prototypes by joint gradient
/// descent (Adam) on prototypes, log-bandwidths, and the linear read-out.
pub fn fit_rbf_net(
    zs: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    r: usize,
    cfg: &RbfTrainConfig,
    convention: KernelConvention,
    seed: RngSeed,
) -> Result<RbfNetModel> {
    if r < 1 {
        return Err(Error::parameter("prototype budget must be at least 1"));
    }
    if zs.is_empty() {
        return Err(Error::parameter("training set is empty"));
    }
    if zs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: zs.len(),
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
        return Err(Error::parameter(format!(
            "label {bad} out of range for {class_count} classes"
        )));
    }
    if cfg.epochs < 1 || cfg.batch_size < 1 || cfg.learning_rate <= 0.0 {
        return Err(Error::parameter("invalid training configuration"));
    }
    let dim = zs[0].len();

    let mut init_rng = seed.stream("rbf-init");
    let prototypes = init_prototypes(zs, labels, class_count, r, &mut init_rng)?;
    let r_eff = prototypes.rows();

    // bandwidth init: kernel value 0.5 at the median nearest-prototype distance
    let mut nearest: Vec<f64> = zs
        .iter()
        .map(|z| {
            prototypes
                .iter_rows()
                .map(|p| squared_euclidean_unchecked(z, p))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nearest.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let dmed = nearest[nearest.len() / 2].max(1e-12);
    let gamma0 = match convention {
        KernelConvention::Multiplier => std::f64::consts::LN_2 / dmed,
        KernelConvention::InverseBandwidth => dmed / std::f64::consts::LN_2,
    };

    // small uniform read-out init; the symmetric zero point slows the first
    // epochs noticeably on localized kernels
    let scale = 0.1 / (r_eff as f64).sqrt();
    let wvals: Vec<f64> = (0..class_count * r_eff)
        .map(|_| init_rng.random_range(-scale..scale))
        .collect();
    let mut model = RbfNetModel::new(
        prototypes,
        vec![gamma0; r_eff],
        DenseMatrix::new(class_count, r_eff, wvals)?,
        vec![0.0; class_count],
        convention,
    )?;

    let mut states = model.adam_states();
    let mut order: Vec<usize> = (0..zs.len()).collect();
    let mut shuffle_rng = seed.stream("rbf-shuffle");
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let bz: Vec<&[f64]> = batch.iter().map(|&i| zs[i].as_slice()).collect();
            let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let trace = model.forward_batch(&bz);
            let (upstream, loss) = ce_upstream(&trace.scores, &by);
            epoch_loss += loss;
            batches += 1.0;
            let (grads, _) = model.backward_batch(&bz, &trace, &upstream, false);
            model.apply_step(&mut states, &grads, cfg.learning_rate);
        }
        if !(epoch_loss / batches).is_finite() {
            return Err(Error::training(format!(
                "rbf-net loss diverged at epoch {epoch}"
            )));
        }
    }
    debug_assert_eq!(model.input_dim(), dim);
    Ok(model)
}
