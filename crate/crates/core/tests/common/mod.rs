//! Reference implementations and fixtures shared by the integration tests.
//!
//! The oracles here are written independently of the library code paths
//! they check: plain loops, explicit inverses, factorials in floating point.
#![allow(dead_code)]

use interopt::dataset::{generate_synthetic, Dataset, Direction, FeatureSchema, FeatureSpec, Role};
use interopt::emulator::{self, EmulatorModel, LayerParams};
use interopt::{Activation, SyntheticGroundTruth, TrainConfig};
use nalgebra::{DMatrix, DVector};

/// Scalar-loop forward pass over normalized inputs.
pub fn naive_forward(model: &EmulatorModel, x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let last = model.layers.len() - 1;
    for (k, layer) in model.layers.iter().enumerate() {
        let mut out = vec![0.0; layer.outputs];
        for (r, o) in out.iter_mut().enumerate() {
            let mut z = layer.bias[r];
            for (c, v) in a.iter().enumerate() {
                z += layer.weights[r * layer.inputs + c] * v;
            }
            *o = if k == last {
                z
            } else {
                match model.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Relu => z.max(0.0),
                }
            };
        }
        a = out;
    }
    a[0]
}

/// Single affine layer `intercept + Σ β·x`.
pub fn linear_emulator(beta: &[f64], intercept: f64) -> EmulatorModel {
    let layer = LayerParams {
        inputs: beta.len(),
        outputs: 1,
        weights: beta.to_vec(),
        bias: vec![intercept],
    };
    EmulatorModel::from_layers(vec![layer], Activation::Tanh).unwrap()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Shapley values by looping over every subset of the other features, with
/// the value function recomputed from scratch for each subset.
pub fn brute_force_shapley(f: &dyn Fn(&[f64]) -> f64, background: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let value = |subset: &[bool]| -> f64 {
        let mut total = 0.0;
        for b in background {
            let z: Vec<f64> = (0..n).map(|i| if subset[i] { x[i] } else { b[i] }).collect();
            total += f(&z);
        }
        let base: f64 = background.iter().map(|b| f(b)).sum();
        (total - base) / background.len() as f64
    };
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let others: Vec<usize> = (0..n).filter(|&k| k != i).collect();
        for mask in 0..(1usize << others.len()) {
            let mut subset = vec![false; n];
            let mut size = 0;
            for (bit, &k) in others.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    subset[k] = true;
                    size += 1;
                }
            }
            let without = value(&subset);
            subset[i] = true;
            let with = value(&subset);
            let w = factorial(size) * factorial(n - 1 - size) / factorial(n);
            *p += w * (with - without);
        }
    }
    phi
}

fn sample_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    let ma: Vec<f64> = (0..a.nrows()).map(|i| a.row(i).sum() / n as f64).collect();
    let mb: Vec<f64> = (0..b.nrows()).map(|i| b.row(i).sum() / n as f64).collect();
    for i in 0..a.nrows() {
        for k in 0..b.nrows() {
            let mut s = 0.0;
            for j in 0..n {
                s += (a[(i, j)] - ma[i]) * (b[(k, j)] - mb[k]);
            }
            out[(i, k)] = s / (n as f64 - 1.0);
        }
    }
    out
}

/// Gauss-Newton style update written with the sensitivity matrix `g`
/// explicitly, using the ensemble parameter covariance and explicit inverses.
pub fn sensitivity_form_update(
    m: &DMatrix<f64>,
    m_pr: &DMatrix<f64>,
    d_obs: &DMatrix<f64>,
    g: &DMatrix<f64>,
    offset: &DVector<f64>,
    cd: &[f64],
    cm: &[f64],
    lambda: f64,
) -> DMatrix<f64> {
    let c = sample_covariance(m, m);
    let cd_mat = DMatrix::from_diagonal(&DVector::from_column_slice(cd));
    let cm_inv = DMatrix::from_diagonal(&DVector::from_iterator(cm.len(), cm.iter().map(|v| 1.0 / v)));
    let k_inv = (cd_mat * (1.0 + lambda) + g * &c * g.transpose())
        .try_inverse()
        .expect("invertible");
    let gain = &c * g.transpose() * &k_inv;
    let bracket = &c - &gain * g * &c;
    let mut out = m.clone();
    for j in 0..m.ncols() {
        let mj = m.column(j).into_owned();
        let pred = g * &mj + offset;
        let dm = &bracket * &cm_inv * (&mj - m_pr.column(j)) / (1.0 + lambda);
        let dd = &gain * (pred - d_obs.column(j));
        out.set_column(j, &(mj - dm - dd));
    }
    out
}

/// Minimizer of `½‖G m + off − d‖²_{C_D⁻¹} + ½‖m − m_pr‖²_{C_M⁻¹}` by the
/// normal equations.
pub fn analytic_map(
    g: &DMatrix<f64>,
    offset: &DVector<f64>,
    d: &DVector<f64>,
    m_pr: &DVector<f64>,
    cd: &[f64],
    cm: &[f64],
) -> DVector<f64> {
    let cd_inv = DMatrix::from_diagonal(&DVector::from_iterator(cd.len(), cd.iter().map(|v| 1.0 / v)));
    let cm_inv = DMatrix::from_diagonal(&DVector::from_iterator(cm.len(), cm.iter().map(|v| 1.0 / v)));
    let h = g.transpose() * &cd_inv * g + &cm_inv;
    let rhs = g.transpose() * &cd_inv * (d - offset) + &cm_inv * m_pr;
    h.try_inverse().expect("invertible") * rhs
}

/// Regularized least-squares objective written out element by element.
pub fn linear_objective(
    m: &DVector<f64>,
    g: &DMatrix<f64>,
    offset: &DVector<f64>,
    d: &DVector<f64>,
    m_pr: &DVector<f64>,
    cd: &[f64],
    cm: &[f64],
) -> f64 {
    let r = g * m + offset - d;
    let data: f64 = r.iter().zip(cd).map(|(v, c)| v * v / c).sum();
    let model: f64 = (m - m_pr).iter().zip(cm).map(|(v, c)| v * v / c).sum();
    0.5 * (data + model)
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Ground truth whose noise std is `ratio` times the std of its clean targets
/// over `n` records.
pub fn truth_with_relative_noise(schema: &FeatureSchema, n: usize, ratio: f64, seed: u64) -> SyntheticGroundTruth {
    let clean = SyntheticGroundTruth::for_schema(schema, 0.0, seed).unwrap();
    let targets = generate_synthetic(n, schema, &clean).unwrap().targets().unwrap();
    SyntheticGroundTruth::for_schema(schema, ratio * std_dev(&targets), seed).unwrap()
}

/// `n_inputs` features: an integer stage-count-like feature, continuous
/// adjustables, and one fixed feature last.
pub fn small_schema(n_inputs: usize) -> FeatureSchema {
    let mut features = vec![FeatureSpec::new("stages", Role::Adjustable, "count")
        .integer()
        .with_range(10.0, 40.0)];
    for i in 1..n_inputs - 1 {
        features.push(FeatureSpec::new(&format!("x{i}"), Role::Adjustable, ""));
    }
    features.push(FeatureSpec::new("depth", Role::Fixed, "m").with_range(2000.0, 4000.0));
    features.push(FeatureSpec::new("cost", Role::Target, ""));
    FeatureSchema::new(features, Direction::Minimize).unwrap()
}

/// Synthetic shale-gas style campaign: 200 scored records with 5% relative
/// noise, and an emulator trained on them with default settings.
pub struct Campaign {
    pub schema: FeatureSchema,
    pub truth: SyntheticGroundTruth,
    pub data: Dataset,
    pub model: EmulatorModel,
}

impl Campaign {
    pub fn new(seed: u64) -> Self {
        let schema = FeatureSchema::shale_gas();
        let truth = truth_with_relative_noise(&schema, 200, 0.05, seed);
        let data = generate_synthetic(200, &schema, &truth).unwrap();
        let model = emulator::train(&data, &TrainConfig::default()).unwrap();
        Campaign {
            schema,
            truth,
            data,
            model,
        }
    }

    /// The first `n` records.
    pub fn wells(&self, n: usize) -> Dataset {
        Dataset::new(self.schema.clone(), self.data.records[..n].to_vec()).unwrap()
    }
}
