//! Feed-forward classifier networks with activation taps.
//!
//! A [`NetworkModel`] is a stack of dense and ReLU layers ending in
//! pre-softmax logits. Chosen layers carry tap labels so that downstream
//! detectors can inspect the internal representation of an input, and
//! [`NetworkModel::input_vjp`] pulls cotangents registered on any tap (or on
//! the logits) back to an exact input gradient for the attack chain.

use crate::error::{Error, Result};
use crate::fileio::{fmt_f64_row, parse_f64_row, parse_usize, ByteParser, LineParser};
use crate::linalg::{argmax, axpy, softmax, DenseMatrix};
use crate::rng::RngSeed;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Reserved tap name for the raw input vector.
pub const TAP_INPUT: &str = "input";
/// Reserved tap name for the pre-softmax output.
pub const TAP_LOGITS: &str = "logits";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Relu,
    Softmax,
}

impl LayerKind {
    fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Softmax => "softmax",
        }
    }

    fn from_str(s: &str) -> Option<Self> {
        match s {
            "dense" => Some(LayerKind::Dense),
            "relu" => Some(LayerKind::Relu),
            "softmax" => Some(LayerKind::Softmax),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub tap_id: Option<String>,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
            tap_id: None,
        }
    }

    pub fn relu(dim: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            in_dim: dim,
            out_dim: dim,
            tap_id: None,
        }
    }

    pub fn with_tap(mut self, id: impl Into<String>) -> Self {
        self.tap_id = Some(id.into());
        self
    }
}

/// Standard multilayer-perceptron architecture: for each hidden size a dense
/// layer followed by a tapped ReLU (`relu1`, `relu2`, ...), then the output
/// dense layer producing logits.
pub fn mlp_arch(input_dim: usize, hidden: &[usize], class_count: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = input_dim;
    for (i, &h) in hidden.iter().enumerate() {
        specs.push(LayerSpec::dense(prev, h));
        specs.push(LayerSpec::relu(h).with_tap(format!("relu{}", i + 1)));
        prev = h;
    }
    specs.push(LayerSpec::dense(prev, class_count));
    specs
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 128,
            epochs: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::parameter("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::parameter("momentum must be in [0, 1)"));
        }
        if self.batch_size < 1 {
            return Err(Error::parameter("batch_size must be at least 1"));
        }
        if self.epochs < 1 {
            return Err(Error::parameter("epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Trained feed-forward classifier. Immutable after training; `forward` and
/// `input_vjp` are safe to call from many threads.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    specs: Vec<LayerSpec>,
    /// Weight matrix (out_dim x in_dim) and bias per dense layer, indexed in
    /// dense-layer order.
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
    input_dim: usize,
    class_count: usize,
}

/// Per-layer activations recorded during a forward pass.
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    /// Tap label -> activation at that tap.
    pub taps: BTreeMap<String, Vec<f64>>,
}

impl NetworkModel {
    pub fn new(specs: Vec<LayerSpec>, weights: Vec<DenseMatrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        validate_arch(&specs)?;
        let dense_count = specs.iter().filter(|s| s.kind == LayerKind::Dense).count();
        if weights.len() != dense_count || biases.len() != dense_count {
            return Err(Error::parameter(format!(
                "expected {dense_count} weight/bias pairs, got {}/{}",
                weights.len(),
                biases.len()
            )));
        }
        let mut wi = 0;
        for spec in &specs {
            if spec.kind == LayerKind::Dense {
                let w = &weights[wi];
                if w.rows() != spec.out_dim || w.cols() != spec.in_dim {
                    return Err(Error::parameter(format!(
                        "dense layer {wi} weight shape {}x{} does not match spec {}x{}",
                        w.rows(),
                        w.cols(),
                        spec.out_dim,
                        spec.in_dim
                    )));
                }
                if biases[wi].len() != spec.out_dim {
                    return Err(Error::parameter(format!(
                        "dense layer {wi} bias length {} does not match out_dim {}",
                        biases[wi].len(),
                        spec.out_dim
                    )));
                }
                wi += 1;
            }
        }
        let input_dim = specs.first().map(|s| s.in_dim).unwrap_or(0);
        let class_count = logits_dim(&specs);
        Ok(Self {
            specs,
            weights,
            biases,
            input_dim,
            class_count,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Declared tap labels in layer order.
    pub fn tap_ids(&self) -> Vec<&str> {
        self.specs
            .iter()
            .filter_map(|s| s.tap_id.as_deref())
            .collect()
    }

    /// Dimension of the representation at a tap; resolves the reserved
    /// `input` and `logits` names too.
    pub fn tap_dim(&self, tap: &str) -> Result<usize> {
        match tap {
            TAP_INPUT => Ok(self.input_dim),
            TAP_LOGITS => Ok(self.class_count),
            _ => self
                .specs
                .iter()
                .find(|s| s.tap_id.as_deref() == Some(tap))
                .map(|s| s.out_dim)
                .ok_or_else(|| Error::UnknownTap(tap.to_string())),
        }
    }

    /// Forward pass returning pre-softmax logits plus every declared tap.
    pub fn forward_with_taps(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut taps = BTreeMap::new();
        let mut act = x.to_vec();
        let mut wi = 0;
        for spec in &self.specs {
            match spec.kind {
                LayerKind::Dense => {
                    let mut out = self.weights[wi].matvec(&act);
                    axpy(1.0, &self.biases[wi], &mut out);
                    act = out;
                    wi += 1;
                }
                LayerKind::Relu => {
                    for v in act.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                // terminal marker only; logits are the pre-softmax scores
                LayerKind::Softmax => break,
            }
            if let Some(id) = &spec.tap_id {
                taps.insert(id.clone(), act.clone());
            }
        }
        Ok(ForwardTrace { logits: act, taps })
    }

    /// Logits only.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_with_taps(x)?.logits)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Exact reverse-mode input gradient of `sum_k <upstream_k, z_k>` where
    /// each cotangent is registered on a tap label, on `logits`, or on
    /// `input`. The ReLU subgradient at 0 is 0.
    pub fn input_vjp(&self, x: &[f64], upstream: &BTreeMap<String, Vec<f64>>) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        for key in upstream.keys() {
            if key != TAP_INPUT && key != TAP_LOGITS {
                self.tap_dim(key)?;
            }
        }
        // forward, recording the output of every layer
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.specs.len());
        let mut act = x.to_vec();
        let mut wi = 0;
        for spec in &self.specs {
            match spec.kind {
                LayerKind::Dense => {
                    let mut out = self.weights[wi].matvec(&act);
                    axpy(1.0, &self.biases[wi], &mut out);
                    act = out;
                    wi += 1;
                }
                LayerKind::Relu => {
                    for v in act.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                LayerKind::Softmax => break,
            }
            acts.push(act.clone());
        }

        let add_cot = |cot: &mut Vec<f64>, up: &Vec<f64>, dim: usize| -> Result<()> {
            if up.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: up.len(),
                });
            }
            axpy(1.0, up, cot);
            Ok(())
        };

        let mut cot = vec![0.0; self.class_count];
        if let Some(up) = upstream.get(TAP_LOGITS) {
            add_cot(&mut cot, up, self.class_count)?;
        }
        let mut wi = self.weights.len();
        for (li, spec) in self.specs.iter().enumerate().rev() {
            if spec.kind == LayerKind::Softmax {
                continue;
            }
            if let Some(id) = &spec.tap_id {
                if let Some(up) = upstream.get(id) {
                    add_cot(&mut cot, up, spec.out_dim)?;
                }
            }
            match spec.kind {
                LayerKind::Dense => {
                    wi -= 1;
                    cot = self.weights[wi].matvec_t(&cot);
                }
                LayerKind::Relu => {
                    let out = &acts[li];
                    for (c, &o) in cot.iter_mut().zip(out) {
                        if o <= 0.0 {
                            *c = 0.0;
                        }
                    }
                }
                LayerKind::Softmax => unreachable!(),
            }
        }
        if let Some(up) = upstream.get(TAP_INPUT) {
            add_cot(&mut cot, up, self.input_dim)?;
        }
        Ok(cot)
    }
}

fn logits_dim(specs: &[LayerSpec]) -> usize {
    specs
        .iter()
        .rev()
        .find(|s| s.kind != LayerKind::Softmax)
        .map(|s| s.out_dim)
        .unwrap_or(0)
}

fn validate_arch(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::parameter("architecture has no layers"));
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[1].kind == LayerKind::Softmax && i + 2 != specs.len() {
            return Err(Error::parameter("softmax must be the terminal layer"));
        }
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::parameter(format!(
                "layer {} out_dim {} does not match layer {} in_dim {}",
                i,
                pair[0].out_dim,
                i + 1,
                pair[1].in_dim
            )));
        }
    }
    if specs[0].kind == LayerKind::Softmax {
        return Err(Error::parameter("softmax cannot be the first layer"));
    }
    for spec in specs {
        if matches!(spec.kind, LayerKind::Relu | LayerKind::Softmax) && spec.in_dim != spec.out_dim
        {
            return Err(Error::parameter(format!(
                "{} layer must preserve dimension",
                spec.kind.as_str()
            )));
        }
        if spec.tap_id.as_deref() == Some(TAP_INPUT) || spec.tap_id.as_deref() == Some(TAP_LOGITS) {
            return Err(Error::parameter(format!(
                "tap id `{}` is reserved",
                spec.tap_id.as_deref().unwrap()
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for spec in specs {
        if let Some(id) = &spec.tap_id {
            if !seen.insert(id.clone()) {
                return Err(Error::parameter(format!("duplicate tap id `{id}`")));
            }
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy over a slice of (input, label) pairs.
fn mean_loss(model: &NetworkModel, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let logits = model.forward(x)?;
        let p = softmax(&logits);
        total -= p[y].max(1e-300).ln();
    }
    Ok(total / inputs.len() as f64)
}

/// Train a backbone with minibatch SGD plus momentum on softmax
/// cross-entropy. Reproducible given the seed: weight initialization and the
/// per-epoch shuffle each draw from named sub-streams.
pub fn train_backbone(
    inputs: &[Vec<f64>],
    labels: &[usize],
    arch: Vec<LayerSpec>,
    cfg: &TrainConfig,
    seed: RngSeed,
) -> Result<NetworkModel> {
    cfg.validate()?;
    validate_arch(&arch)?;
    if inputs.is_empty() {
        return Err(Error::parameter("training set is empty"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: labels.len(),
        });
    }
    let class_count = logits_dim(&arch);
    if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
        return Err(Error::parameter(format!(
            "label {bad} out of range for {class_count} classes"
        )));
    }

    // uniform init scaled by fan-in
    let mut init_rng = seed.stream("backbone-init");
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for spec in &arch {
        if spec.kind == LayerKind::Dense {
            let lim = 1.0 / (spec.in_dim as f64).sqrt();
            let vals: Vec<f64> = (0..spec.out_dim * spec.in_dim)
                .map(|_| init_rng.random_range(-lim..lim))
                .collect();
            weights.push(DenseMatrix::new(spec.out_dim, spec.in_dim, vals)?);
            biases.push(vec![0.0; spec.out_dim]);
        }
    }
    let mut model = NetworkModel::new(arch, weights, biases)?;
    let initial_loss = mean_loss(&model, inputs, labels)?;

    let mut vel_w: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.values().len()]).collect();
    let mut vel_b: Vec<Vec<f64>> = model.biases.iter().map(|b| vec![0.0; b.len()]).collect();

    let n = inputs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = seed.stream("backbone-shuffle");
    let dense_specs: Vec<(usize, usize)> = model
        .specs
        .iter()
        .filter(|s| s.kind == LayerKind::Dense)
        .map(|s| (s.in_dim, s.out_dim))
        .collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let bsz = batch.len() as f64;
            let mut grad_w: Vec<Vec<f64>> = dense_specs
                .iter()
                .map(|(i, o)| vec![0.0; i * o])
                .collect();
            let mut grad_b: Vec<Vec<f64>> = dense_specs.iter().map(|(_, o)| vec![0.0; *o]).collect();

            for &si in batch {
                let x = &inputs[si];
                let y = labels[si];
                // forward, caching dense inputs and relu outputs
                let mut act = x.clone();
                let mut dense_in: Vec<Vec<f64>> = Vec::with_capacity(dense_specs.len());
                let mut post: Vec<Vec<f64>> = Vec::with_capacity(model.specs.len());
                let mut wi = 0;
                for spec in &model.specs {
                    match spec.kind {
                        LayerKind::Dense => {
                            dense_in.push(act.clone());
                            let mut out = model.weights[wi].matvec(&act);
                            axpy(1.0, &model.biases[wi], &mut out);
                            act = out;
                            wi += 1;
                        }
                        LayerKind::Relu => {
                            for v in act.iter_mut() {
                                if *v < 0.0 {
                                    *v = 0.0;
                                }
                            }
                        }
                        LayerKind::Softmax => break,
                    }
                    post.push(act.clone());
                }
                let p = softmax(&act);
                epoch_loss -= p[y].max(1e-300).ln();
                // dL/dlogits for cross-entropy
                let mut cot: Vec<f64> = p;
                cot[y] -= 1.0;
                let mut wi = model.weights.len();
                for (li, spec) in model.specs.iter().enumerate().rev() {
                    match spec.kind {
                        LayerKind::Dense => {
                            wi -= 1;
                            let input = &dense_in[wi];
                            let gw = &mut grad_w[wi];
                            for (r, &c) in cot.iter().enumerate() {
                                if c != 0.0 {
                                    axpy(c / bsz, input, &mut gw[r * input.len()..(r + 1) * input.len()]);
                                }
                            }
                            axpy(1.0 / bsz, &cot, &mut grad_b[wi]);
                            cot = model.weights[wi].matvec_t(&cot);
                        }
                        LayerKind::Relu => {
                            for (c, &o) in cot.iter_mut().zip(&post[li]) {
                                if o <= 0.0 {
                                    *c = 0.0;
                                }
                            }
                        }
                        LayerKind::Softmax => {}
                    }
                }
            }

            for wi in 0..model.weights.len() {
                for (v, g) in vel_w[wi].iter_mut().zip(&grad_w[wi]) {
                    *v = cfg.momentum * *v - cfg.learning_rate * g;
                }
                for (w, v) in model.weights[wi].values_mut().iter_mut().zip(&vel_w[wi]) {
                    *w += v;
                }
                for (v, g) in vel_b[wi].iter_mut().zip(&grad_b[wi]) {
                    *v = cfg.momentum * *v - cfg.learning_rate * g;
                }
                for (b, v) in model.biases[wi].iter_mut().zip(&vel_b[wi]) {
                    *b += v;
                }
            }
        }
        epoch_loss /= n as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::training(format!(
                "loss diverged to {epoch_loss} at epoch {epoch}"
            )));
        }
    }

    let final_loss = mean_loss(&model, inputs, labels)?;
    if !(final_loss < initial_loss) {
        return Err(Error::training(format!(
            "training did not reduce loss ({initial_loss} -> {final_loss})"
        )));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// model files: versioned text plus a binary variant with identical layout
// (arch, then per-layer weight matrices row-major, then biases)
// ---------------------------------------------------------------------------

const TEXT_HEADER: &str = "advrej-network";
const TEXT_VERSION: &str = "v1";
const BINARY_MAGIC: &[u8; 8] = b"ADVRNET\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelFormat {
    #[default]
    Text,
    Binary,
}

pub fn save_model(model: &NetworkModel, path: &Path) -> Result<()> {
    save_model_as(model, path, ModelFormat::Text)
}

pub fn save_model_as(model: &NetworkModel, path: &Path, format: ModelFormat) -> Result<()> {
    let bytes = match format {
        ModelFormat::Text => model_to_text(model).into_bytes(),
        ModelFormat::Binary => model_to_binary(model),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&BINARY_MAGIC[..7]) {
        model_from_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::parse(e.valid_up_to(), "model file is not valid UTF-8"))?;
        model_from_text(text)
    }
}

fn model_to_text(model: &NetworkModel) -> String {
    let mut out = String::new();
    out.push_str(&format!("{TEXT_HEADER} {TEXT_VERSION}\n"));
    out.push_str(&format!("input_dim {}\n", model.input_dim));
    out.push_str(&format!("class_count {}\n", model.class_count));
    out.push_str(&format!("layers {}\n", model.specs.len()));
    for spec in &model.specs {
        match &spec.tap_id {
            Some(id) => out.push_str(&format!(
                "layer {} {} {} tap {}\n",
                spec.kind.as_str(),
                spec.in_dim,
                spec.out_dim,
                id
            )),
            None => out.push_str(&format!(
                "layer {} {} {}\n",
                spec.kind.as_str(),
                spec.in_dim,
                spec.out_dim
            )),
        }
    }
    for (wi, w) in model.weights.iter().enumerate() {
        out.push_str(&format!("weights {} {} {}\n", wi, w.rows(), w.cols()));
        for r in w.iter_rows() {
            out.push_str(&fmt_f64_row(r));
            out.push('\n');
        }
    }
    for (bi, b) in model.biases.iter().enumerate() {
        out.push_str(&format!("bias {} {}\n", bi, b.len()));
        out.push_str(&fmt_f64_row(b));
        out.push('\n');
    }
    out
}

fn model_from_text(text: &str) -> Result<NetworkModel> {
    let mut p = LineParser::new(text);
    let (at, line) = p.expect_line("header")?;
    let mut fields = line.split_whitespace();
    if fields.next() != Some(TEXT_HEADER) {
        return Err(Error::parse(at, format!("expected `{TEXT_HEADER}` header")));
    }
    let version = fields.next().unwrap_or("");
    if version != TEXT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version.to_string(),
            supported: TEXT_VERSION.to_string(),
        });
    }
    let (at, f) = p.expect_fields("input_dim")?;
    let _input_dim = parse_usize(at, f.get(1).copied().unwrap_or(""), "input_dim")?;
    let (at, f) = p.expect_fields("class_count")?;
    let _class_count = parse_usize(at, f.get(1).copied().unwrap_or(""), "class_count")?;
    let (at, f) = p.expect_fields("layers")?;
    let layer_count = parse_usize(at, f.get(1).copied().unwrap_or(""), "layer count")?;

    let mut specs = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let (at, f) = p.expect_fields("layer")?;
        let kind = LayerKind::from_str(f.get(1).copied().unwrap_or(""))
            .ok_or_else(|| Error::parse(at, format!("unknown layer kind `{}`", f.get(1).unwrap_or(&""))))?;
        let in_dim = parse_usize(at, f.get(2).copied().unwrap_or(""), "in_dim")?;
        let out_dim = parse_usize(at, f.get(3).copied().unwrap_or(""), "out_dim")?;
        let tap_id = match (f.get(4), f.get(5)) {
            (Some(&"tap"), Some(id)) => Some(id.to_string()),
            (None, _) => None,
            _ => return Err(Error::parse(at, "malformed tap annotation")),
        };
        specs.push(LayerSpec {
            kind,
            in_dim,
            out_dim,
            tap_id,
        });
    }

    let dense_count = specs.iter().filter(|s| s.kind == LayerKind::Dense).count();
    let mut weights = Vec::with_capacity(dense_count);
    for wi in 0..dense_count {
        let (at, f) = p.expect_fields("weights")?;
        let idx = parse_usize(at, f.get(1).copied().unwrap_or(""), "weights index")?;
        if idx != wi {
            return Err(Error::parse(at, format!("expected weights {wi}, found {idx}")));
        }
        let rows = parse_usize(at, f.get(2).copied().unwrap_or(""), "rows")?;
        let cols = parse_usize(at, f.get(3).copied().unwrap_or(""), "cols")?;
        let mut vals = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (at, line) = p.expect_line("weight row")?;
            vals.extend(parse_f64_row(at, line, cols, "weight")?);
        }
        weights.push(DenseMatrix::new(rows, cols, vals)?);
    }
    let mut biases = Vec::with_capacity(dense_count);
    for bi in 0..dense_count {
        let (at, f) = p.expect_fields("bias")?;
        let idx = parse_usize(at, f.get(1).copied().unwrap_or(""), "bias index")?;
        if idx != bi {
            return Err(Error::parse(at, format!("expected bias {bi}, found {idx}")));
        }
        let len = parse_usize(at, f.get(2).copied().unwrap_or(""), "bias length")?;
        let (at, line) = p.expect_line("bias row")?;
        biases.push(parse_f64_row(at, line, len, "bias")?);
    }
    NetworkModel::new(specs, weights, biases)
}

fn model_to_binary(model: &NetworkModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(model.specs.len() as u32).to_le_bytes());
    for spec in &model.specs {
        let kind = match spec.kind {
            LayerKind::Dense => 0u8,
            LayerKind::Relu => 1,
            LayerKind::Softmax => 2,
        };
        out.push(kind);
        out.extend_from_slice(&(spec.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(spec.out_dim as u32).to_le_bytes());
        let tap = spec.tap_id.as_deref().unwrap_or("");
        out.extend_from_slice(&(tap.len() as u32).to_le_bytes());
        out.extend_from_slice(tap.as_bytes());
    }
    for w in &model.weights {
        for v in w.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for b in &model.biases {
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn model_from_binary(bytes: &[u8]) -> Result<NetworkModel> {
    let mut p = ByteParser::new(bytes);
    let magic = p.take(8, "magic")?;
    if magic[..7] != BINARY_MAGIC[..7] {
        return Err(Error::parse(0, "bad magic"));
    }
    if magic[7] != BINARY_MAGIC[7] {
        return Err(Error::UnsupportedVersion {
            found: format!("{}", magic[7]),
            supported: format!("{}", BINARY_MAGIC[7]),
        });
    }
    let layer_count = p.read_u32("layer count")? as usize;
    let mut specs = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let at = p.offset();
        let kind = match p.take(1, "layer kind")?[0] {
            0 => LayerKind::Dense,
            1 => LayerKind::Relu,
            2 => LayerKind::Softmax,
            k => return Err(Error::parse(at, format!("unknown layer kind {k}"))),
        };
        let in_dim = p.read_u32("in_dim")? as usize;
        let out_dim = p.read_u32("out_dim")? as usize;
        let tap_len = p.read_u32("tap length")? as usize;
        let tap_at = p.offset();
        let tap_bytes = p.take(tap_len, "tap id")?;
        let tap = std::str::from_utf8(tap_bytes)
            .map_err(|_| Error::parse(tap_at, "tap id is not valid UTF-8"))?;
        specs.push(LayerSpec {
            kind,
            in_dim,
            out_dim,
            tap_id: (!tap.is_empty()).then(|| tap.to_string()),
        });
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for spec in specs.iter().filter(|s| s.kind == LayerKind::Dense) {
        let vals = p.read_f64_vec(spec.out_dim * spec.in_dim, "weight")?;
        weights.push(DenseMatrix::new(spec.out_dim, spec.in_dim, vals)?);
    }
    for spec in specs.iter().filter(|s| s.kind == LayerKind::Dense) {
        biases.push(p.read_f64_vec(spec.out_dim, "bias")?);
    }
    if p.remaining() != 0 {
        return Err(Error::parse(p.offset(), "trailing bytes after model payload"));
    }
    NetworkModel::new(specs, weights, biases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, finite_difference_gradient, gradient_relative_error};

    fn identity_model() -> NetworkModel {
        let specs = vec![LayerSpec::dense(2, 2)];
        let w = DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        NetworkModel::new(specs, vec![w], vec![vec![0.0, 0.0]]).unwrap()
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let m = identity_model();
        let t = m.forward_with_taps(&[1.0, 2.0]).unwrap();
        assert_eq!(t.logits, vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weight_network_outputs_bias() {
        let specs = vec![LayerSpec::dense(3, 2)];
        let w = DenseMatrix::zeros(2, 3);
        let m = NetworkModel::new(specs, vec![w], vec![vec![0.5, -1.5]]).unwrap();
        assert_eq!(m.forward(&[9.0, 9.0, 9.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let m = identity_model();
        assert!(matches!(
            m.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn taps_record_layer_outputs() {
        let specs = vec![
            LayerSpec::dense(2, 2),
            LayerSpec::relu(2).with_tap("relu1"),
            LayerSpec::dense(2, 2),
        ];
        let w1 = DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let w2 = DenseMatrix::new(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let m = NetworkModel::new(specs, vec![w1, w2], vec![vec![0.0; 2], vec![0.0; 2]]).unwrap();
        let t = m.forward_with_taps(&[2.0, 3.0]).unwrap();
        assert_eq!(t.taps.get("relu1").unwrap(), &vec![2.0, 0.0]);
        assert_eq!(t.logits, vec![2.0, 0.0]);
    }

    #[test]
    fn vjp_on_single_dense_layer_is_w_transpose() {
        let specs = vec![LayerSpec::dense(2, 2)];
        let w = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = NetworkModel::new(specs, vec![w], vec![vec![0.0; 2]]).unwrap();
        let mut up = BTreeMap::new();
        up.insert(TAP_LOGITS.to_string(), vec![1.0, 1.0]);
        let g = m.input_vjp(&[0.3, -0.7], &up).unwrap();
        assert_eq!(g, vec![4.0, 6.0]); // W^T [1,1]
    }

    #[test]
    fn vjp_zero_upstream_gives_zero_gradient() {
        let m = identity_model();
        let mut up = BTreeMap::new();
        up.insert(TAP_LOGITS.to_string(), vec![0.0, 0.0]);
        assert_eq!(m.input_vjp(&[1.0, 2.0], &up).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn vjp_rejects_unknown_tap() {
        let m = identity_model();
        let mut up = BTreeMap::new();
        up.insert("nope".to_string(), vec![1.0, 1.0]);
        assert!(matches!(
            m.input_vjp(&[1.0, 2.0], &up),
            Err(Error::UnknownTap(_))
        ));
    }

    #[test]
    fn vjp_matches_finite_differences_on_random_net() {
        let seed = RngSeed(7);
        let arch = mlp_arch(4, &[8, 6], 3);
        let mut rng = seed.stream("test-data");
        let inputs: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let m = train_backbone(&inputs, &labels, arch, &cfg, seed).unwrap();

        // scalar field: <u, logits> + <v, relu1 tap>
        let u = vec![0.7, -1.3, 0.4];
        let v: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut up = BTreeMap::new();
        up.insert(TAP_LOGITS.to_string(), u.clone());
        up.insert("relu1".to_string(), v.clone());

        let mut checked = 0;
        for k in 0..20 {
            let x: Vec<f64> = (0..4)
                .map(|j| 0.1 + 0.8 * ((k * 4 + j) as f64 * 0.61).sin().abs())
                .collect();
            let analytic = m.input_vjp(&x, &up).unwrap();
            let f = |p: &[f64]| {
                let t = m.forward_with_taps(p).unwrap();
                dot(&u, &t.logits) + dot(&v, t.taps.get("relu1").unwrap())
            };
            let numeric = finite_difference_gradient(f, &x, 1e-6).unwrap();
            let err = gradient_relative_error(&analytic, &numeric);
            // skip points that straddle a ReLU kink
            if err.is_finite() {
                assert!(err < 1e-4, "rel err {err} at point {k}");
                checked += 1;
            }
        }
        assert!(checked >= 15);
    }

    #[test]
    fn training_is_reproducible() {
        let seed = RngSeed(3);
        let mut rng = seed.stream("data");
        let inputs: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..2).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = inputs.iter().map(|x| (x[0] > x[1]) as usize).collect();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = train_backbone(&inputs, &labels, mlp_arch(2, &[4], 2), &cfg, seed).unwrap();
        let b = train_backbone(&inputs, &labels, mlp_arch(2, &[4], 2), &cfg, seed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linearly_separable_two_class_reaches_full_accuracy() {
        let seed = RngSeed(11);
        let mut rng = seed.stream("data");
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..50 {
            let x: f64 = rng.random_range(0.0..0.4);
            let y: f64 = rng.random_range(0.0..1.0);
            inputs.push(vec![x, y]);
            labels.push(0);
            inputs.push(vec![x + 0.6, y]);
            labels.push(1);
        }
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let m = train_backbone(&inputs, &labels, vec![LayerSpec::dense(2, 2)], &cfg, seed).unwrap();
        let correct = inputs
            .iter()
            .zip(&labels)
            .filter(|(x, &y)| m.predict(x).unwrap() == y)
            .count();
        assert_eq!(correct, inputs.len());
    }

    #[test]
    fn save_load_round_trip_text_and_binary() {
        let seed = RngSeed(5);
        let mut rng = seed.stream("data");
        let inputs: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let m = train_backbone(&inputs, &labels, mlp_arch(3, &[5], 2), &cfg, seed).unwrap();

        let dir = tempfile::tempdir().unwrap();
        for fmt in [ModelFormat::Text, ModelFormat::Binary] {
            let path = dir.path().join(match fmt {
                ModelFormat::Text => "m.txt",
                ModelFormat::Binary => "m.bin",
            });
            save_model_as(&m, &path, fmt).unwrap();
            let loaded = load_model(&path).unwrap();
            for i in 0..100 {
                let x: Vec<f64> = (0..3).map(|j| ((i * 3 + j) as f64 * 0.17).sin().abs()).collect();
                let a = m.forward(&x).unwrap();
                let b = loaded.forward(&x).unwrap();
                assert_eq!(a, b, "bit-identical forward outputs");
            }
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let m = identity_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model_as(&m, &path, ModelFormat::Binary).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Parse { .. })));

        let text_path = dir.path().join("m.txt");
        save_model_as(&m, &text_path, ModelFormat::Text).unwrap();
        let text = std::fs::read_to_string(&text_path).unwrap();
        let cut: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        std::fs::write(&text_path, cut).unwrap();
        assert!(matches!(load_model(&text_path), Err(Error::Parse { .. })));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(&path, "advrej-network v9\ninput_dim 2\n").unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::UnsupportedVersion { .. })
        ));
    }
}
