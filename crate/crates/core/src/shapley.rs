//! Model-agnostic Shapley attribution.
//!
//! The value of a coalition `S` is the background-averaged model output with
//! the features in `S` taken from the explained instance and all other
//! features taken jointly from each background row, minus the background
//! mean output. On a finite background this makes the efficiency identity
//! `Σφ = f(x) − base` exact up to rounding.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::NormStats;
use crate::emulator::EmulatorModel;
use crate::seed;

/// Largest feature count accepted by [`shapley_exact`] unless overridden.
pub const EXACT_CAP: usize = 16;
/// Background rows kept by default when sampling from a dataset.
pub const DEFAULT_BACKGROUND_CAP: usize = 128;
/// Coalitions are `u64` bitsets.
pub const MAX_FEATURES: usize = 64;

#[derive(Debug, Error)]
pub enum ShapleyError {
    #[error("background set is empty")]
    EmptyBackground,
    #[error("width mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("{n} features exceed the exact-mode cap of {cap}; use sampled mode (--sampled N)")]
    ExactCapExceeded { n: usize, cap: usize },
    #[error("{0} features exceed the coalition bitset width of 64")]
    TooManyFeatures(usize),
    #[error("coalition size {s} out of range for {n} features")]
    OutOfRange { n: usize, s: usize },
    #[error("no attributions to aggregate")]
    EmptyAttributions,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = ShapleyError> = std::result::Result<T, E>;

/// Anything that maps a feature row to a scalar.
pub trait Predictor: Sync {
    fn input_width(&self) -> usize;
    fn predict(&self, x: &[f64]) -> f64;
}

impl Predictor for EmulatorModel {
    fn input_width(&self) -> usize {
        EmulatorModel::input_width(self)
    }

    fn predict(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn input_width(&self) -> usize {
        (**self).input_width()
    }

    fn predict(&self, x: &[f64]) -> f64 {
        (**self).predict(x)
    }
}

/// `intercept + Σ coef·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl Predictor for LinearModel {
    fn input_width(&self) -> usize {
        self.coef.len()
    }

    fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

/// Pointwise sum of two predictors of equal width.
pub struct SumModel<A, B>(pub A, pub B);

impl<A: Predictor, B: Predictor> Predictor for SumModel<A, B> {
    fn input_width(&self) -> usize {
        self.0.input_width()
    }

    fn predict(&self, x: &[f64]) -> f64 {
        self.0.predict(x) + self.1.predict(x)
    }
}

/// Rows (normalized) over which absent features are marginalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSet {
    rows: Vec<Vec<f64>>,
    seed: u64,
}

impl BackgroundSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_seed(rows, 0)
    }

    fn with_seed(rows: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let width = rows.first().ok_or(ShapleyError::EmptyBackground)?.len();
        for r in &rows {
            if r.len() != width {
                return Err(ShapleyError::Shape {
                    expected: width,
                    got: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(ShapleyError::InvalidArgument(
                    "background rows must be finite".into(),
                ));
            }
        }
        Ok(BackgroundSet { rows, seed })
    }

    /// Keeps every row when there are at most `cap`, otherwise a seeded
    /// subsample of `cap` rows in their original order.
    pub fn sample(rows: Vec<Vec<f64>>, cap: usize, seed: u64) -> Result<Self> {
        if cap == 0 {
            return Err(ShapleyError::InvalidArgument("background cap must be ≥ 1".into()));
        }
        if rows.len() <= cap {
            return Self::with_seed(rows, seed);
        }
        let mut rng = seed::rng_for(seed, 0xB6);
        let mut picked = rand::seq::index::sample(&mut rng, rows.len(), cap).into_vec();
        picked.sort_unstable();
        let kept = picked.into_iter().map(|i| rows[i].clone()).collect();
        Self::with_seed(kept, seed)
    }

    /// Normalized rows of physical-unit inputs.
    pub fn from_physical(
        inputs: &[Vec<f64>],
        norm: &NormStats,
        cap: usize,
        seed: u64,
    ) -> Result<Self> {
        let rows = inputs.iter().map(|x| norm.normalize_inputs(x)).collect();
        Self::sample(rows, cap, seed)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Column means.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.width()];
        for r in &self.rows {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.rows.len() as f64);
        m
    }
}

/// Subset of feature indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Coalition(pub u64);

impl Coalition {
    pub fn empty() -> Self {
        Coalition(0)
    }

    pub fn full(n: usize) -> Self {
        if n >= 64 {
            Coalition(u64::MAX)
        } else {
            Coalition((1u64 << n) - 1)
        }
    }

    pub fn from_indices(indices: &[usize]) -> Self {
        Coalition(indices.iter().fold(0, |m, &i| m | (1u64 << i)))
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn with(self, i: usize) -> Self {
        Coalition(self.0 | (1u64 << i))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// Local attribution of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyAttribution {
    pub record_id: String,
    pub phi: Vec<f64>,
    /// Background mean output.
    pub base_value: f64,
    /// Model output at the instance.
    pub prediction: f64,
    /// Per-feature standard error of sampled estimates (≥ 2 permutations).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error: Option<Vec<f64>>,
}

impl ShapleyAttribution {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.record_id = id.into();
        self
    }

    /// `Σφ − (f(x) − base)`.
    pub fn efficiency_gap(&self) -> f64 {
        self.phi.iter().sum::<f64>() - (self.prediction - self.base_value)
    }

    /// Rescales normalized-target attributions to physical target units.
    pub fn to_physical(&self, norm: &NormStats) -> Self {
        let s = norm.target_std;
        ShapleyAttribution {
            record_id: self.record_id.clone(),
            phi: self.phi.iter().map(|p| p * s).collect(),
            base_value: norm.denormalize_target(self.base_value),
            prediction: norm.denormalize_target(self.prediction),
            std_error: self
                .std_error
                .as_ref()
                .map(|se| se.iter().map(|e| e * s).collect()),
        }
    }
}

fn check_width<P: Predictor>(model: &P, bg: &BackgroundSet, x: &[f64]) -> Result<usize> {
    if bg.is_empty() {
        return Err(ShapleyError::EmptyBackground);
    }
    let n = model.input_width();
    if bg.width() != n {
        return Err(ShapleyError::Shape {
            expected: n,
            got: bg.width(),
        });
    }
    if x.len() != n {
        return Err(ShapleyError::Shape {
            expected: n,
            got: x.len(),
        });
    }
    Ok(n)
}

/// `E_X f(X)` over the background.
pub fn base_value<P: Predictor>(model: &P, bg: &BackgroundSet) -> f64 {
    bg.rows().iter().map(|r| model.predict(r)).sum::<f64>() / bg.len() as f64
}

/// Background mean of `f` with coalition members taken from `x`.
fn coalition_mean<P: Predictor>(model: &P, bg: &BackgroundSet, x: &[f64], s: Coalition) -> f64 {
    let mut buf = vec![0.0; x.len()];
    let mut sum = 0.0;
    for row in bg.rows() {
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if s.contains(i) { x[i] } else { row[i] };
        }
        sum += model.predict(&buf);
    }
    sum / bg.len() as f64
}

/// `val(S)`: background-marginalized output with `S` fixed to `x`, minus the
/// background mean. `val(∅) = 0` exactly.
pub fn value_function<P: Predictor>(
    model: &P,
    bg: &BackgroundSet,
    x: &[f64],
    s: Coalition,
) -> Result<f64> {
    let n = check_width(model, bg, x)?;
    if n < 64 && s.0 >> n != 0 {
        return Err(ShapleyError::InvalidArgument(
            "coalition references features beyond the model width".into(),
        ));
    }
    if s.is_empty() {
        return Ok(0.0);
    }
    Ok(coalition_mean(model, bg, x, s) - base_value(model, bg))
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// `s!·(n−1−s)!/n!`: exact integer arithmetic up to 20 features, log space beyond.
pub fn coalition_weight(n: usize, s: usize) -> Result<f64> {
    if n == 0 || s >= n {
        return Err(ShapleyError::OutOfRange { n, s });
    }
    if n <= 20 {
        // s!(n-1-s)!/n! = 1 / (n · C(n-1, s))
        let c = binomial((n - 1) as u64, s as u64);
        return Ok(1.0 / (n as f64 * c as f64));
    }
    let ln_fact = |k: usize| (2..=k).map(|i| (i as f64).ln()).sum::<f64>();
    Ok((ln_fact(s) + ln_fact(n - 1 - s) - ln_fact(n)).exp())
}

/// Exact Shapley values by enumerating all `2^n` coalitions.
pub fn shapley_exact<P: Predictor>(
    model: &P,
    bg: &BackgroundSet,
    x: &[f64],
) -> Result<ShapleyAttribution> {
    shapley_exact_with_cap(model, bg, x, EXACT_CAP)
}

pub fn shapley_exact_with_cap<P: Predictor>(
    model: &P,
    bg: &BackgroundSet,
    x: &[f64],
    cap: usize,
) -> Result<ShapleyAttribution> {
    let n = check_width(model, bg, x)?;
    if n > cap.min(30) {
        return Err(ShapleyError::ExactCapExceeded { n, cap });
    }
    let base = base_value(model, bg);
    let mut values: Vec<f64> = (0..1u64 << n)
        .into_par_iter()
        .map(|mask| coalition_mean(model, bg, x, Coalition(mask)) - base)
        .collect();
    values[0] = 0.0;
    let weights: Vec<f64> = (0..n)
        .map(|s| coalition_weight(n, s))
        .collect::<Result<_>>()?;
    let phi = (0..n)
        .map(|k| {
            let bit = 1u64 << k;
            (0..1u64 << n)
                .filter(|m| m & bit == 0)
                .map(|m| weights[m.count_ones() as usize] * (values[(m | bit) as usize] - values[m as usize]))
                .sum()
        })
        .collect();
    Ok(ShapleyAttribution {
        record_id: String::new(),
        phi,
        base_value: base,
        prediction: model.predict(x),
        std_error: None,
    })
}

/// Permutation Monte Carlo estimate of the Shapley values.
///
/// Permutation `p` is drawn from `derive(seed, p)`; each one contributes the
/// marginal gain of every feature as it joins the growing coalition.
pub fn shapley_sampled<P: Predictor>(
    model: &P,
    bg: &BackgroundSet,
    x: &[f64],
    n_permutations: usize,
    seed: u64,
) -> Result<ShapleyAttribution> {
    let n = check_width(model, bg, x)?;
    if n > MAX_FEATURES {
        return Err(ShapleyError::TooManyFeatures(n));
    }
    if n_permutations == 0 {
        return Err(ShapleyError::InvalidArgument(
            "n_permutations must be at least 1".into(),
        ));
    }
    let base = base_value(model, bg);
    let samples: Vec<Vec<f64>> = (0..n_permutations)
        .into_par_iter()
        .map(|p| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seed::rng_for(seed, p as u64));
            let mut gains = vec![0.0; n];
            let mut coalition = Coalition::empty();
            let mut prev = 0.0;
            for k in order {
                coalition = coalition.with(k);
                let cur = coalition_mean(model, bg, x, coalition) - base;
                gains[k] = cur - prev;
                prev = cur;
            }
            gains
        })
        .collect();
    let count = n_permutations as f64;
    let mut phi = vec![0.0; n];
    for g in &samples {
        for (p, v) in phi.iter_mut().zip(g) {
            *p += v;
        }
    }
    phi.iter_mut().for_each(|p| *p /= count);
    let std_error = (n_permutations >= 2).then(|| {
        (0..n)
            .map(|k| {
                let var = samples.iter().map(|g| (g[k] - phi[k]).powi(2)).sum::<f64>()
                    / (count - 1.0);
                (var / count).sqrt()
            })
            .collect()
    });
    Ok(ShapleyAttribution {
        record_id: String::new(),
        phi,
        base_value: base,
        prediction: model.predict(x),
        std_error,
    })
}

/// Mean absolute attribution per feature, with the local matrix retained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance {
    pub mean_abs: Vec<f64>,
    pub per_record: Vec<Vec<f64>>,
}

impl GlobalImportance {
    /// Feature indices by descending importance; ties keep feature order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.mean_abs.len()).collect();
        idx.sort_by(|&a, &b| self.mean_abs[b].total_cmp(&self.mean_abs[a]));
        idx
    }
}

pub fn global_shapley(attrs: &[ShapleyAttribution]) -> Result<GlobalImportance> {
    let first = attrs.first().ok_or(ShapleyError::EmptyAttributions)?;
    let n = first.phi.len();
    let mut mean_abs = vec![0.0; n];
    for a in attrs {
        if a.phi.len() != n {
            return Err(ShapleyError::Shape {
                expected: n,
                got: a.phi.len(),
            });
        }
        for (m, p) in mean_abs.iter_mut().zip(&a.phi) {
            *m += p.abs();
        }
    }
    mean_abs.iter_mut().for_each(|m| *m /= attrs.len() as f64);
    Ok(GlobalImportance {
        mean_abs,
        per_record: attrs.iter().map(|a| a.phi.clone()).collect(),
    })
}

pub const ADDITIVITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdditivityReport {
    pub phi_of_sum: Vec<f64>,
    pub sum_of_phi: Vec<f64>,
    pub max_defect: f64,
    pub passed: bool,
}

/// Compares `φ(f_a + f_b)` with `φ(f_a) + φ(f_b)` under exact enumeration.
pub fn additivity_check<A: Predictor, B: Predictor>(
    model_a: &A,
    model_b: &B,
    bg: &BackgroundSet,
    x: &[f64],
) -> Result<AdditivityReport> {
    if model_a.input_width() != model_b.input_width() {
        return Err(ShapleyError::Shape {
            expected: model_a.input_width(),
            got: model_b.input_width(),
        });
    }
    let joint = shapley_exact(&SumModel(model_a, model_b), bg, x)?;
    let a = shapley_exact(model_a, bg, x)?;
    let b = shapley_exact(model_b, bg, x)?;
    let sum_of_phi: Vec<f64> = a.phi.iter().zip(&b.phi).map(|(p, q)| p + q).collect();
    let max_defect = joint
        .phi
        .iter()
        .zip(&sum_of_phi)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    Ok(AdditivityReport {
        phi_of_sum: joint.phi,
        sum_of_phi,
        max_defect,
        passed: max_defect <= ADDITIVITY_TOLERANCE,
    })
}

/// Rows = records, columns = features, then base value and prediction.
pub fn attributions_csv(names: &[String], attrs: &[ShapleyAttribution]) -> String {
    let mut out = String::from("id");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push_str(",base_value,prediction\n");
    for a in attrs {
        out.push_str(&a.record_id);
        for p in &a.phi {
            out.push(',');
            out.push_str(&p.to_string());
        }
        out.push_str(&format!(",{},{}\n", a.base_value, a.prediction));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean_abs_phi: f64,
}

/// Global importances sorted descending, as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSummary {
    pub records: usize,
    pub method: String,
    pub units: String,
    pub importances: Vec<FeatureImportance>,
}

impl GlobalSummary {
    pub fn new(names: &[String], global: &GlobalImportance, method: &str, units: &str) -> Self {
        GlobalSummary {
            records: global.per_record.len(),
            method: method.to_string(),
            units: units.to_string(),
            importances: global
                .ranking()
                .into_iter()
                .map(|i| FeatureImportance {
                    feature: names[i].clone(),
                    mean_abs_phi: global.mean_abs[i],
                })
                .collect(),
        }
    }
}
