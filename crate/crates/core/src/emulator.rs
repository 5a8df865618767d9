//! Fully connected regression network used as the emulator of the field.
//!
//! Hidden layers apply the configured activation, the output layer is
//! affine. All evaluation happens on z-scored inputs and targets; the
//! statistics travel with the model so physical-unit prediction is a
//! normalize → forward → denormalize round trip.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{self, Dataset, DatasetError, FeatureSchema, NormStats};
use crate::seed;

#[derive(Debug, Error)]
pub enum EmulatorError {
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite input value")]
    NonFinite,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model artifact failed integrity check: {0}")]
    Integrity(String),
    #[error("model was trained for schema {expected}, got schema {got}")]
    FingerprintMismatch { expected: String, got: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EmulatorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the activation.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Affine layer with a row-major `outputs × inputs` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        LayerParams {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }

    fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
            let mut acc = *b;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
    }

    fn is_consistent(&self) -> bool {
        self.inputs > 0
            && self.outputs > 0
            && self.weights.len() == self.inputs * self.outputs
            && self.bias.len() == self.outputs
            && self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

fn default_epochs() -> usize {
    500
}
fn default_lr() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_hidden() -> Vec<usize> {
    vec![20, 10]
}
fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    /// `None` trains full-batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: default_epochs(),
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            batch_size: None,
            seed: 0,
            hidden: default_hidden(),
            activation: default_activation(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EmulatorError::Config(m.to_string()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must lie in [0, 1)");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorModel {
    pub layers: Vec<LayerParams>,
    pub activation: Activation,
    pub norm: NormStats,
    pub schema_fingerprint: String,
    pub input_names: Vec<String>,
    pub train_config: Option<TrainConfig>,
}

impl EmulatorModel {
    /// Bare network with identity normalization, mostly for tests and tools.
    pub fn from_layers(layers: Vec<LayerParams>, activation: Activation) -> Result<Self> {
        let n_inputs = layers.first().map_or(0, |l| l.inputs);
        let model = EmulatorModel {
            layers,
            activation,
            norm: NormStats::identity(n_inputs),
            schema_fingerprint: String::new(),
            input_names: (0..n_inputs).map(|i| format!("x{i}")).collect(),
            train_config: None,
        };
        model.check_layers()?;
        Ok(model)
    }

    /// Network with the given layer widths (input first, output last) and
    /// fan-in scaled uniform weights drawn from `seed`.
    pub fn random(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = seed::rng_for(seed, 0x1417);
        Self::from_layers(init_layers(widths, &mut rng), activation)
    }

    fn check_layers(&self) -> Result<()> {
        let bad = |m: String| Err(EmulatorError::Integrity(m));
        if self.layers.is_empty() {
            return bad("model has no layers".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !l.is_consistent() {
                return bad(format!("layer {i} has inconsistent dimensions or values"));
            }
        }
        for w in self.layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return bad("layer dimensions do not chain".into());
            }
        }
        if self.layers.last().map(|l| l.outputs) != Some(1) {
            return bad("output layer must have width 1".into());
        }
        if self.norm.n_inputs() != self.input_width() || self.input_names.len() != self.input_width()
        {
            return bad("normalization width does not match the input layer".into());
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Flattened parameter `index`: each layer's weights, then its bias.
    pub fn parameter(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            if index < l.weights.len() {
                return l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_parameter(&mut self, mut index: usize, value: f64) {
        for l in &mut self.layers {
            if index < l.weights.len() {
                l.weights[index] = value;
                return;
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                l.bias[index] = value;
                return;
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    /// Evaluates the network on an already normalized input vector.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_width() {
            return Err(EmulatorError::Shape {
                expected: self.input_width(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EmulatorError::NonFinite);
        }
        Ok(self.eval(x))
    }

    /// Unchecked forward pass; callers guarantee the width.
    pub(crate) fn eval(&self, x: &[f64]) -> f64 {
        let mut cur = Vec::with_capacity(32);
        let mut next = Vec::with_capacity(32);
        let last = self.layers.len() - 1;
        self.layers[0].affine_into(x, &mut cur);
        for layer in &self.layers[1..] {
            cur.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            layer.affine_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        if last == 0 {
            debug_assert_eq!(cur.len(), 1);
        }
        cur[0]
    }

    pub fn batch_forward(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.forward(r)).collect()
    }

    /// Physical-unit prediction from physical-unit inputs.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_width() {
            return Err(EmulatorError::Shape {
                expected: self.input_width(),
                got: x.len(),
            });
        }
        let z = self.forward(&self.norm.normalize_inputs(x))?;
        Ok(self.norm.denormalize_target(z))
    }

    /// Mean squared error on normalized rows and targets.
    pub fn mse(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        let sum: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let e = self.eval(x) - y;
                e * e
            })
            .sum();
        sum / xs.len() as f64
    }

    /// MSE over the rows and its gradient by backpropagation, laid out like
    /// `self.layers`.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[f64]) -> (f64, Vec<LayerParams>) {
        let mut grads: Vec<LayerParams> = self
            .layers
            .iter()
            .map(|l| LayerParams::zeros(l.inputs, l.outputs))
            .collect();
        let scale = 1.0 / xs.len() as f64;
        let mut loss = 0.0;
        let n_layers = self.layers.len();
        let mut pre: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut post: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut delta = Vec::new();
        let mut back = Vec::new();

        for (x, y) in xs.iter().zip(ys) {
            for l in 0..n_layers {
                let input = if l == 0 { x.as_slice() } else { post[l - 1].as_slice() };
                let mut z = std::mem::take(&mut pre[l]);
                self.layers[l].affine_into(input, &mut z);
                let a = &mut post[l];
                a.clear();
                if l + 1 < n_layers {
                    a.extend(z.iter().map(|v| self.activation.apply(*v)));
                } else {
                    a.extend_from_slice(&z);
                }
                pre[l] = z;
            }
            let err = post[n_layers - 1][0] - y;
            loss += err * err * scale;

            delta.clear();
            delta.push(2.0 * err * scale);
            for l in (0..n_layers).rev() {
                let layer = &self.layers[l];
                let input = if l == 0 { x.as_slice() } else { post[l - 1].as_slice() };
                let g = &mut grads[l];
                for (o, d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, v) in row.iter_mut().zip(input) {
                        *gw += d * v;
                    }
                }
                if l == 0 {
                    break;
                }
                back.clear();
                back.resize(layer.inputs, 0.0);
                for (o, d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += w * d;
                    }
                }
                for (i, b) in back.iter_mut().enumerate() {
                    *b *= self.activation.derivative(pre[l - 1][i], post[l - 1][i]);
                }
                std::mem::swap(&mut delta, &mut back);
            }
        }
        (loss, grads)
    }

    pub fn to_json(&self) -> String {
        let body = ArtifactBody::from(self);
        let checksum = body.checksum();
        serde_json::to_string_pretty(&ModelArtifact { body, checksum })
            .expect("model serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Parses an artifact, verifies its checksum and dimensions, and checks
    /// that it was trained for `schema`.
    pub fn from_json(text: &str, schema: &FeatureSchema) -> Result<Self> {
        let model = Self::from_json_unchecked(text)?;
        let expected = schema.fingerprint();
        if model.schema_fingerprint != expected {
            return Err(EmulatorError::FingerprintMismatch {
                expected: model.schema_fingerprint,
                got: expected,
            });
        }
        Ok(model)
    }

    /// Like [`from_json`](Self::from_json) without the schema check.
    pub fn from_json_unchecked(text: &str) -> Result<Self> {
        let artifact: ModelArtifact =
            serde_json::from_str(text).map_err(|e| EmulatorError::Integrity(e.to_string()))?;
        if artifact.body.checksum() != artifact.checksum {
            return Err(EmulatorError::Integrity("checksum mismatch".into()));
        }
        let b = artifact.body;
        let model = EmulatorModel {
            layers: b.layers,
            activation: b.activation,
            norm: b.norm,
            schema_fingerprint: b.schema_fingerprint,
            input_names: b.input_names,
            train_config: b.train_config,
        };
        model.check_layers()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, schema)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArtifactBody {
    format: String,
    schema_fingerprint: String,
    input_names: Vec<String>,
    activation: Activation,
    norm: NormStats,
    layers: Vec<LayerParams>,
    train_config: Option<TrainConfig>,
}

impl ArtifactBody {
    fn checksum(&self) -> String {
        let compact = serde_json::to_string(self).expect("artifact serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }
}

impl From<&EmulatorModel> for ArtifactBody {
    fn from(m: &EmulatorModel) -> Self {
        ArtifactBody {
            format: "interopt-emulator/1".into(),
            schema_fingerprint: m.schema_fingerprint.clone(),
            input_names: m.input_names.clone(),
            activation: m.activation,
            norm: m.norm.clone(),
            layers: m.layers.clone(),
            train_config: m.train_config.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelArtifact {
    #[serde(flatten)]
    body: ArtifactBody,
    checksum: String,
}

fn init_layers<R: Rng>(widths: &[usize], rng: &mut R) -> Vec<LayerParams> {
    widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (3.0 / fan_in as f64).sqrt();
            LayerParams {
                inputs: fan_in,
                outputs: fan_out,
                weights: (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect(),
                bias: vec![0.0; fan_out],
            }
        })
        .collect()
}

/// Trained model plus the full-data training MSE after every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmulatorModel,
    pub loss_history: Vec<f64>,
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<EmulatorModel> {
    train_with_history(data, cfg).map(|o| o.model)
}

/// Adam on normalized MSE for exactly `cfg.max_epochs` epochs.
pub fn train_with_history(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let norm = dataset::fit_normalizer(data)?;
    let xs: Vec<Vec<f64>> = data
        .records
        .iter()
        .map(|r| norm.normalize_inputs(&r.inputs))
        .collect();
    let ys: Vec<f64> = data
        .targets()?
        .into_iter()
        .map(|y| norm.normalize_target(y))
        .collect();

    let mut widths = vec![data.schema.n_inputs()];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let mut rng = seed::rng_for(cfg.seed, 0x1417);
    let mut model = EmulatorModel {
        layers: init_layers(&widths, &mut rng),
        activation: cfg.activation,
        norm,
        schema_fingerprint: data.schema.fingerprint(),
        input_names: data.schema.input_names(),
        train_config: Some(cfg.clone()),
    };

    let n = xs.len();
    let batch = cfg.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = seed::rng_for(cfg.seed, 0x5EED);
    let mut adam = Adam::new(&model.layers);
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut bx = Vec::with_capacity(batch);
    let mut by = Vec::with_capacity(batch);

    for epoch in 1..=cfg.max_epochs {
        if batch < n {
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(batch) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.push(xs[i].clone());
                by.push(ys[i]);
            }
            let (loss, grads) = model.loss_and_gradient(&bx, &by);
            if !loss.is_finite() {
                return Err(EmulatorError::Diverged { epoch, loss });
            }
            adam.step(&mut model.layers, &grads, cfg);
        }
        let loss = model.mse(&xs, &ys);
        if !loss.is_finite() {
            return Err(EmulatorError::Diverged { epoch, loss });
        }
        history.push(loss);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

struct Adam {
    m: Vec<LayerParams>,
    v: Vec<LayerParams>,
    t: i32,
}

impl Adam {
    fn new(layers: &[LayerParams]) -> Self {
        let zeros = || -> Vec<LayerParams> {
            layers
                .iter()
                .map(|l| LayerParams::zeros(l.inputs, l.outputs))
                .collect()
        };
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, layers: &mut [LayerParams], grads: &[LayerParams], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        };
        for (((l, g), m), v) in layers
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            update(&mut l.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut l.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

/// `1 - SS_res / SS_tot`; negative infinity when the observations are constant.
pub fn r_squared(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() {
        return Err(EmulatorError::Shape {
            expected: obs.len(),
            got: pred.len(),
        });
    }
    if obs.is_empty() {
        return Err(EmulatorError::Config("r_squared needs at least one value".into()));
    }
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let ss_tot: f64 = obs.iter().map(|o| (o - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(obs).map(|(p, o)| (o - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Out-of-fold and full-fit predictions in physical units.
#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub ids: Vec<String>,
    pub observed: Vec<f64>,
    pub cv_predictions: Vec<f64>,
    pub fit_predictions: Vec<f64>,
    /// Negative infinity (serialized as `null`) for constant targets.
    pub cv_r2: f64,
    pub fit_r2: f64,
    pub folds: usize,
}

/// Leave-one-out cross validation plus a full-data fit.
///
/// Fold `i` trains with seed `derive(cfg.seed, i)`, so running folds in
/// parallel does not change the result.
pub fn loo_cv(data: &Dataset, cfg: &TrainConfig) -> Result<CvReport> {
    if data.len() < 3 {
        return Err(DatasetError::TooFewRecords {
            needed: 3,
            got: data.len(),
        }
        .into());
    }
    cfg.validate()?;
    let observed = data.targets()?;
    let cv_predictions = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (train_set, holdout) = dataset::split_loo(data, i)?;
            let fold_cfg = TrainConfig {
                seed: seed::derive(cfg.seed, i as u64),
                ..cfg.clone()
            };
            let model = train(&train_set, &fold_cfg)?;
            model.predict(&holdout.inputs)
        })
        .collect::<Result<Vec<f64>>>()?;
    let full = train(data, cfg)?;
    let fit_predictions = data
        .records
        .iter()
        .map(|r| full.predict(&r.inputs))
        .collect::<Result<Vec<f64>>>()?;
    Ok(CvReport {
        ids: data.records.iter().map(|r| r.id.clone()).collect(),
        cv_r2: r_squared(&cv_predictions, &observed)?,
        fit_r2: r_squared(&fit_predictions, &observed)?,
        observed,
        cv_predictions,
        fit_predictions,
        folds: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Direction, FeatureSpec, Role, WellRecord};

    #[test]
    fn zero_network_outputs_zero() {
        let model = EmulatorModel::from_layers(
            vec![LayerParams::zeros(3, 4), LayerParams::zeros(4, 1)],
            Activation::Tanh,
        )
        .unwrap();
        assert_eq!(model.forward(&[1.0, -2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_affine_layer_by_hand() {
        let layer = LayerParams {
            inputs: 2,
            outputs: 1,
            weights: vec![2.0, -1.0],
            bias: vec![0.5],
        };
        let model = EmulatorModel::from_layers(vec![layer], Activation::Tanh).unwrap();
        assert_eq!(model.forward(&[1.0, 1.0]).unwrap(), 1.5);
    }

    #[test]
    fn forward_rejects_bad_shape_and_values() {
        let model = EmulatorModel::random(&[3, 5, 1], Activation::Tanh, 1).unwrap();
        assert!(matches!(
            model.forward(&[1.0, 2.0]),
            Err(EmulatorError::Shape { expected: 3, got: 2 })
        ));
        assert!(matches!(
            model.forward(&[1.0, f64::NAN, 0.0]),
            Err(EmulatorError::NonFinite)
        ));
    }

    #[test]
    fn batch_forward_edge_cases() {
        let model = EmulatorModel::random(&[2, 4, 1], Activation::Relu, 5).unwrap();
        assert!(model.batch_forward(&[]).unwrap().is_empty());
        let row = vec![0.3, -0.7];
        assert_eq!(
            model.batch_forward(std::slice::from_ref(&row)).unwrap(),
            vec![model.forward(&row).unwrap()]
        );
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let model = EmulatorModel::random(&[3, 6, 1], Activation::Relu, 11).unwrap();
        let xs = vec![vec![0.2, -0.4, 0.9], vec![-1.1, 0.3, 0.5], vec![0.7, 0.8, -0.2]];
        let ys = vec![0.1, -0.3, 0.4];
        let (_, grads) = model.loss_and_gradient(&xs, &ys);
        let flat: Vec<f64> = grads
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect();
        let h = 1e-6;
        for (i, g) in flat.iter().enumerate() {
            let mut plus = model.clone();
            plus.set_parameter(i, model.parameter(i) + h);
            let mut minus = model.clone();
            minus.set_parameter(i, model.parameter(i) - h);
            let fd = (plus.mse(&xs, &ys) - minus.mse(&xs, &ys)) / (2.0 * h);
            assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()), "param {i}: {fd} vs {g}");
        }
    }

    #[test]
    fn r_squared_cases() {
        let obs = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&obs, &obs).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.0, 2.0, 2.0], &obs).unwrap(), 0.0);
        // obs mean 3; SS_tot = 4+1+0+1+4 = 10; SS_res = 0.25+0+1+0.25+0 = 1.5
        let obs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let pred = [1.5, 2.0, 2.0, 4.5, 5.0];
        assert!((r_squared(&pred, &obs).unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(r_squared(&[1.0], &[1.0]).unwrap(), f64::NEG_INFINITY);
        assert!(r_squared(&[], &[]).is_err());
        assert!(r_squared(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn linear_dataset(n: usize) -> Dataset {
        let schema = FeatureSchema::new(
            vec![
                FeatureSpec::new("a", Role::Adjustable, ""),
                FeatureSpec::new("b", Role::Adjustable, ""),
                FeatureSpec::new("c", Role::Fixed, ""),
                FeatureSpec::new("y", Role::Target, ""),
            ],
            Direction::Minimize,
        )
        .unwrap();
        let mut rng = seed::rng(99);
        let records = (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y = 1.5 * x[0] - 0.7 * x[1] + 0.3 * x[2] + 4.0;
                WellRecord::new(format!("r{i}"), x, Some(y)).unwrap()
            })
            .collect();
        Dataset::new(schema, records).unwrap()
    }

    #[test]
    fn training_fits_a_linear_target() {
        let data = linear_dataset(200);
        let model = train(&data, &TrainConfig::default()).unwrap();
        let pred: Vec<f64> = data
            .records
            .iter()
            .map(|r| model.predict(&r.inputs).unwrap())
            .collect();
        let r2 = r_squared(&pred, &data.targets().unwrap()).unwrap();
        assert!(r2 >= 0.99, "r2 = {r2}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = linear_dataset(40);
        let cfg = TrainConfig {
            max_epochs: 50,
            batch_size: Some(8),
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn longer_budget_reaches_lower_loss() {
        let data = linear_dataset(60);
        let one = train_with_history(
            &data,
            &TrainConfig {
                max_epochs: 1,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let full = train_with_history(&data, &TrainConfig::default()).unwrap();
        assert_eq!(one.loss_history[0], full.loss_history[0]);
        assert!(full.loss_history.last().unwrap() <= &one.loss_history[0]);
    }

    #[test]
    fn config_validation() {
        let data = linear_dataset(10);
        let zero_epochs = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&data, &zero_epochs), Err(EmulatorError::Config(_))));
        let zero_width = TrainConfig {
            hidden: vec![4, 0],
            ..TrainConfig::default()
        };
        assert!(matches!(train(&data, &zero_width), Err(EmulatorError::Config(_))));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let data = linear_dataset(20);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            max_epochs: 20,
            activation: Activation::Relu,
            ..TrainConfig::default()
        };
        match train(&data, &cfg) {
            Err(EmulatorError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn artifact_round_trip_and_integrity() {
        let data = linear_dataset(30);
        let cfg = TrainConfig {
            max_epochs: 20,
            ..TrainConfig::default()
        };
        let model = train(&data, &cfg).unwrap();
        let text = model.to_json();
        let back = EmulatorModel::from_json(&text, &data.schema).unwrap();
        assert_eq!(back, model);
        for r in &data.records {
            assert_eq!(back.predict(&r.inputs).unwrap(), model.predict(&r.inputs).unwrap());
        }
        let tampered = text.replacen("\"weights\": [\n", "\"weights\": [\n        0.5,\n", 1);
        assert!(matches!(
            EmulatorModel::from_json(&tampered, &data.schema),
            Err(EmulatorError::Integrity(_))
        ));
        assert!(matches!(
            EmulatorModel::from_json("{ not json", &data.schema),
            Err(EmulatorError::Integrity(_))
        ));
        let other = data.schema.clone().with_direction(Direction::Maximize);
        assert!(matches!(
            EmulatorModel::from_json(&text, &other),
            Err(EmulatorError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn loo_cv_counts_folds_and_reports_constant_target() {
        let mut data = linear_dataset(3);
        let cfg = TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let rep = loo_cv(&data, &cfg).unwrap();
        assert_eq!(rep.folds, 3);
        assert_eq!(rep.cv_predictions.len(), 3);

        data.records.iter_mut().for_each(|r| r.target = Some(2.0));
        let rep = loo_cv(&data, &cfg).unwrap();
        assert!(rep.cv_r2 <= 0.0);
        assert!(loo_cv(&linear_dataset(2), &cfg).is_err());
    }
}
