//! Ensemble randomized maximum likelihood.
//!
//! Each realization `m_j` is pulled towards its own perturbed observation
//! `d_obs,j` while being held near its own prior sample `m_pr,j`. Sensitivities
//! are replaced by ensemble (cross-)covariances, so no derivative of the
//! forward model is ever needed:
//!
//! ```text
//! K      = (1 + λ) C_D + C_Dl
//! δ_model = 1/(1+λ) · [C_Ml − C_MlDl K⁻¹ C_MlDlᵀ] · C_M⁻¹ (m_j − m_pr,j)
//! δ_data  = C_MlDl K⁻¹ (g(m_j) − d_obs,j)
//! m_j ← m_j − δ_model − δ_data
//! ```
//!
//! `C_M` and `C_D` are diagonal; `C_Ml`, `C_MlDl`, `C_Dl` are sample
//! covariances of the current ensemble with `1/(N_e − 1)` scaling.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum EnrmlError {
    #[error("ensemble needs at least 2 realizations, got {0}")]
    TooFewRealizations(usize),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("variances must be finite and strictly positive ({0})")]
    NonPositiveVariance(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(
        "solve of (1+λ)C_D + C_Dl failed after jitter: trace {trace:e}, min diagonal {min_diag:e}, max diagonal {max_diag:e}"
    )]
    Singular {
        trace: f64,
        min_diag: f64,
        max_diag: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = EnrmlError> = std::result::Result<T, E>;

fn shape(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(EnrmlError::Shape { what, expected, got })
    }
}

fn all_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EnrmlError::NonFinite(what))
    }
}

/// Diagonal observation (`C_D`) and prior parameter (`C_M`) variances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    cd: DVector<f64>,
    cm: DVector<f64>,
}

impl NoiseModel {
    pub fn new(cd: DVector<f64>, cm: DVector<f64>) -> Result<Self> {
        let ok = |v: &DVector<f64>| v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !ok(&cd) {
            return Err(EnrmlError::NonPositiveVariance("C_D"));
        }
        if !ok(&cm) {
            return Err(EnrmlError::NonPositiveVariance("C_M"));
        }
        Ok(NoiseModel { cd, cm })
    }

    pub fn isotropic(n_d: usize, data_var: f64, n_m: usize, param_var: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(n_d, data_var),
            DVector::from_element(n_m, param_var),
        )
    }

    pub fn cd(&self) -> &DVector<f64> {
        &self.cd
    }

    pub fn cm(&self) -> &DVector<f64> {
        &self.cm
    }

    pub fn n_data(&self) -> usize {
        self.cd.len()
    }

    pub fn n_params(&self) -> usize {
        self.cm.len()
    }
}

/// Damping multiplier and its schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    pub lambda: f64,
    pub increase: f64,
    pub decrease: f64,
}

impl Default for LambdaState {
    fn default() -> Self {
        LambdaState {
            lambda: 1.0,
            increase: 4.0,
            decrease: 0.5,
        }
    }
}

impl LambdaState {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(EnrmlError::Config("λ must be finite and ≥ 0".into()));
        }
        if !(self.increase > 1.0) || !(self.decrease > 0.0 && self.decrease < 1.0) {
            return Err(EnrmlError::Config(
                "λ increase factor must exceed 1 and decrease factor lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Realizations (columns) with their prior samples and perturbed observations.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub m: DMatrix<f64>,
    pub m_pr: DMatrix<f64>,
    pub d_obs: DMatrix<f64>,
    pub iteration: usize,
}

impl EnsembleState {
    pub fn new(m: DMatrix<f64>, m_pr: DMatrix<f64>, d_obs: DMatrix<f64>) -> Result<Self> {
        let n_e = m.ncols();
        if n_e < 2 {
            return Err(EnrmlError::TooFewRealizations(n_e));
        }
        shape("prior realizations (rows)", m.nrows(), m_pr.nrows())?;
        shape("prior realizations (columns)", n_e, m_pr.ncols())?;
        shape("perturbed observations (columns)", n_e, d_obs.ncols())?;
        all_finite(&m, "realizations")?;
        all_finite(&m_pr, "prior realizations")?;
        all_finite(&d_obs, "perturbed observations")?;
        Ok(EnsembleState {
            m,
            m_pr,
            d_obs,
            iteration: 0,
        })
    }

    pub fn n_e(&self) -> usize {
        self.m.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.m.column_mean()
    }
}

/// Deterministic map from a parameter vector to a prediction vector.
pub trait ForwardModel: Sync {
    fn n_params(&self) -> usize;
    fn n_data(&self) -> usize;
    fn evaluate(&self, m: &[f64]) -> Vec<f64>;

    /// Evaluates every column; columns are independent and run in parallel.
    fn evaluate_ensemble(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = (0..m.ncols())
            .into_par_iter()
            .map(|j| self.evaluate(m.column(j).as_slice()))
            .collect();
        let n_d = self.n_data();
        DMatrix::from_fn(n_d, m.ncols(), |i, j| cols[j][i])
    }
}

/// `g(m) = G m + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForward {
    pub g: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl ForwardModel for LinearForward {
    fn n_params(&self) -> usize {
        self.g.ncols()
    }

    fn n_data(&self) -> usize {
        self.g.nrows()
    }

    fn evaluate(&self, m: &[f64]) -> Vec<f64> {
        let v = &self.g * DVector::from_column_slice(m) + &self.offset;
        v.as_slice().to_vec()
    }
}

fn gaussian_columns(
    center: &DVector<f64>,
    variances: &DVector<f64>,
    n_e: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n_e < 2 {
        return Err(EnrmlError::TooFewRealizations(n_e));
    }
    shape("variance vector", center.len(), variances.len())?;
    if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(EnrmlError::Config("variances must be finite and ≥ 0".into()));
    }
    let mut rng = seed::rng(seed);
    let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let mut out = DMatrix::zeros(center.len(), n_e);
    for j in 0..n_e {
        for i in 0..center.len() {
            let z: f64 = StandardNormal.sample(&mut rng);
            out[(i, j)] = center[i] + sd[i] * z;
        }
    }
    Ok(out)
}

/// Columns `d_obs + ε_j`, `ε_j ~ N(0, diag(variances))`.
pub fn perturb_observations(
    d_obs: &DVector<f64>,
    variances: &DVector<f64>,
    n_e: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    gaussian_columns(d_obs, variances, n_e, seed)
}

/// Initial realizations `m_pr + ε_j`, `ε_j ~ N(0, diag(variances))`.
pub fn init_realizations(
    m_pr: &DVector<f64>,
    variances: &DVector<f64>,
    n_e: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    gaussian_columns(m_pr, variances, n_e, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleCovariances {
    /// `N_m × N_m`
    pub cm: DMatrix<f64>,
    /// `N_m × N_d`
    pub cmd: DMatrix<f64>,
    /// `N_d × N_d`
    pub cd: DMatrix<f64>,
}

fn anomalies(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.column_mean();
    let mut a = x.clone();
    for mut col in a.column_iter_mut() {
        col -= &mean;
    }
    a
}

pub fn ensemble_covariances(m: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<EnsembleCovariances> {
    let n_e = m.ncols();
    if n_e < 2 {
        return Err(EnrmlError::TooFewRealizations(n_e));
    }
    shape("prediction ensemble (columns)", n_e, d.ncols())?;
    let am = anomalies(m);
    let ad = anomalies(d);
    let s = 1.0 / (n_e as f64 - 1.0);
    Ok(EnsembleCovariances {
        cm: &am * am.transpose() * s,
        cmd: &am * ad.transpose() * s,
        cd: &ad * ad.transpose() * s,
    })
}

/// Data and model mismatch of one realization: `(½ rᵀC_D⁻¹r, ½ ΔmᵀC_M⁻¹Δm)`.
pub fn objective_terms(
    m: &[f64],
    g_m: &[f64],
    d_obs: &[f64],
    m_pr: &[f64],
    noise: &NoiseModel,
) -> Result<(f64, f64)> {
    shape("prediction", noise.n_data(), g_m.len())?;
    shape("observation", noise.n_data(), d_obs.len())?;
    shape("parameters", noise.n_params(), m.len())?;
    shape("prior", noise.n_params(), m_pr.len())?;
    let data = g_m
        .iter()
        .zip(d_obs)
        .zip(noise.cd.iter())
        .map(|((g, d), v)| (g - d).powi(2) / v)
        .sum::<f64>()
        * 0.5;
    let model = m
        .iter()
        .zip(m_pr)
        .zip(noise.cm.iter())
        .map(|((a, b), v)| (a - b).powi(2) / v)
        .sum::<f64>()
        * 0.5;
    Ok((data, model))
}

/// `½(g(m)−d)ᵀC_D⁻¹(g(m)−d) + ½(m−m_pr)ᵀC_M⁻¹(m−m_pr)`.
pub fn objective(
    m: &[f64],
    g_m: &[f64],
    d_obs: &[f64],
    m_pr: &[f64],
    noise: &NoiseModel,
) -> Result<f64> {
    objective_terms(m, g_m, d_obs, m_pr, noise).map(|(d, m)| d + m)
}

/// Ensemble means of the data and model mismatch.
pub fn mean_objective_terms(
    state: &EnsembleState,
    predictions: &DMatrix<f64>,
    noise: &NoiseModel,
) -> Result<(f64, f64)> {
    shape("prediction ensemble (columns)", state.n_e(), predictions.ncols())?;
    let mut data = 0.0;
    let mut model = 0.0;
    for j in 0..state.n_e() {
        let (d, m) = objective_terms(
            state.m.column(j).as_slice(),
            predictions.column(j).as_slice(),
            state.d_obs.column(j).as_slice(),
            state.m_pr.column(j).as_slice(),
            noise,
        )?;
        data += d;
        model += m;
    }
    let n = state.n_e() as f64;
    Ok((data / n, model / n))
}

/// The two additive parts of one update, one column per realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrections {
    pub delta_model: DMatrix<f64>,
    pub delta_data: DMatrix<f64>,
}

impl Corrections {
    pub fn total(&self) -> DMatrix<f64> {
        &self.delta_model + &self.delta_data
    }
}

/// Solves `K X = B` for symmetric `K`, adding `1e-10·trace/N_d` to the
/// diagonal when the plain Cholesky factorization fails.
fn solve_symmetric(k: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = Cholesky::new(k.clone()) {
        return Ok(chol.solve(b));
    }
    let n = k.nrows();
    let trace = k.trace();
    let jitter = 1e-10 * trace.abs() / n as f64;
    let mut kj = k.clone();
    for i in 0..n {
        kj[(i, i)] += jitter;
    }
    match Cholesky::new(kj) {
        Some(chol) => Ok(chol.solve(b)),
        None => {
            let diag = k.diagonal();
            Err(EnrmlError::Singular {
                trace,
                min_diag: diag.min(),
                max_diag: diag.max(),
            })
        }
    }
}

/// Model- and data-mismatch corrections for every realization.
///
/// `predictions` drive the covariances; `residuals` are the per-column
/// mismatch vectors (normally `g(m_j) − d_obs,j`).
pub fn correction_terms(
    m: &DMatrix<f64>,
    m_pr: &DMatrix<f64>,
    predictions: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
    noise: &NoiseModel,
    lambda: f64,
) -> Result<Corrections> {
    let n_e = m.ncols();
    if n_e < 2 {
        return Err(EnrmlError::TooFewRealizations(n_e));
    }
    shape("parameters", noise.n_params(), m.nrows())?;
    shape("prior realizations (rows)", m.nrows(), m_pr.nrows())?;
    shape("prior realizations (columns)", n_e, m_pr.ncols())?;
    shape("predictions", noise.n_data(), predictions.nrows())?;
    shape("predictions (columns)", n_e, predictions.ncols())?;
    shape("residuals", noise.n_data(), residuals.nrows())?;
    shape("residuals (columns)", n_e, residuals.ncols())?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(EnrmlError::Config("λ must be finite and ≥ 0".into()));
    }
    all_finite(predictions, "predictions")?;
    all_finite(residuals, "residuals")?;

    let cov = ensemble_covariances(m, predictions)?;
    let mut k = cov.cd.clone();
    for i in 0..k.nrows() {
        k[(i, i)] += (1.0 + lambda) * noise.cd[i];
    }
    // K⁻¹ [C_MlDlᵀ | residuals] in one factorization
    let n_m = m.nrows();
    let mut rhs = DMatrix::zeros(k.nrows(), n_m + n_e);
    rhs.columns_mut(0, n_m).copy_from(&cov.cmd.transpose());
    rhs.columns_mut(n_m, n_e).copy_from(residuals);
    let solved = solve_symmetric(k, &rhs)?;
    let k_inv_cdm = solved.columns(0, n_m);
    let k_inv_r = solved.columns(n_m, n_e);

    let bracket = &cov.cm - &cov.cmd * k_inv_cdm;
    let mut scaled_dev = m - m_pr;
    for (i, mut row) in scaled_dev.row_iter_mut().enumerate() {
        row /= noise.cm[i];
    }
    let delta_model = bracket * scaled_dev / (1.0 + lambda);
    let delta_data = &cov.cmd * k_inv_r;
    Ok(Corrections {
        delta_model,
        delta_data,
    })
}

/// One EnRML step; returns the updated realizations.
pub fn enrml_update(
    state: &EnsembleState,
    predictions: &DMatrix<f64>,
    noise: &NoiseModel,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    shape("predictions", state.d_obs.nrows(), predictions.nrows())?;
    let residuals = predictions - &state.d_obs;
    let c = correction_terms(&state.m, &state.m_pr, predictions, &residuals, noise, lambda)?;
    Ok(&state.m - c.total())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrmlConfig {
    pub n_e: usize,
    pub lambda: LambdaState,
    pub max_iters: usize,
    /// Re-attempts of one iteration with a larger λ before giving up on it.
    pub max_retries: usize,
    /// Relative mean-objective change regarded as stalled.
    pub tolerance: f64,
    /// Accepted stalled iterations in a row that count as converged.
    pub patience: usize,
    pub seed: u64,
    /// Spread of the initial realizations; `C_M` when `None`.
    #[serde(default)]
    pub init_variance: Option<Vec<f64>>,
    /// Spread of the observation perturbations; `C_D` when `None`.
    #[serde(default)]
    pub obs_variance: Option<Vec<f64>>,
}

impl Default for EnrmlConfig {
    fn default() -> Self {
        EnrmlConfig {
            n_e: 100,
            lambda: LambdaState::default(),
            max_iters: 50,
            max_retries: 5,
            tolerance: 1e-6,
            patience: 3,
            seed: 0,
            init_variance: None,
            obs_variance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lambda: f64,
    pub mean_objective: f64,
    pub mean_data_mismatch: f64,
    pub mean_model_mismatch: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct EnrmlRun {
    pub state: EnsembleState,
    pub predictions: DMatrix<f64>,
    /// Row 0 is the initial ensemble.
    pub trace: Vec<TraceRow>,
    pub converged: bool,
}

impl EnrmlRun {
    pub fn trace_csv(&self) -> String {
        trace_csv(&self.trace)
    }
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(
        "iteration,lambda,mean_objective,mean_data_mismatch,mean_model_mismatch,accepted\n",
    );
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration,
            r.lambda,
            r.mean_objective,
            r.mean_data_mismatch,
            r.mean_model_mismatch,
            r.accepted
        ));
    }
    out
}

/// Iterates EnRML updates with Levenberg–Marquardt style λ control.
///
/// An update that lowers the mean objective is accepted and λ shrinks. One
/// that does not is retried from the same state with λ enlarged, up to
/// `max_retries` times; if every retry fails the ensemble stays put for that
/// iteration. Stalling is reported through `converged`, never as an error.
pub fn run_enrml<F: ForwardModel>(
    forward: &F,
    m_pr: &DVector<f64>,
    d_obs: &DVector<f64>,
    noise: &NoiseModel,
    cfg: &EnrmlConfig,
) -> Result<EnrmlRun> {
    cfg.lambda.validate()?;
    if cfg.max_iters == 0 {
        return Err(EnrmlError::Config("max_iters must be at least 1".into()));
    }
    shape("prior", noise.n_params(), m_pr.len())?;
    shape("observations", noise.n_data(), d_obs.len())?;
    shape("forward model parameters", noise.n_params(), forward.n_params())?;
    shape("forward model data", noise.n_data(), forward.n_data())?;

    let init_var = cfg
        .init_variance
        .clone()
        .map(DVector::from_vec)
        .unwrap_or_else(|| noise.cm.clone());
    let obs_var = cfg
        .obs_variance
        .clone()
        .map(DVector::from_vec)
        .unwrap_or_else(|| noise.cd.clone());
    let m0 = init_realizations(m_pr, &init_var, cfg.n_e, seed::derive(cfg.seed, 1))?;
    let d0 = perturb_observations(d_obs, &obs_var, cfg.n_e, seed::derive(cfg.seed, 2))?;
    let mut state = EnsembleState::new(m0.clone(), m0, d0)?;
    let mut pred = forward.evaluate_ensemble(&state.m);
    all_finite(&pred, "predictions")?;
    let (mut data, mut model) = mean_objective_terms(&state, &pred, noise)?;
    let mut lambda = cfg.lambda.lambda;
    let mut trace = vec![TraceRow {
        iteration: 0,
        lambda,
        mean_objective: data + model,
        mean_data_mismatch: data,
        mean_model_mismatch: model,
        accepted: true,
    }];
    let mut stalled = 0;
    let mut converged = false;

    for iteration in 1..=cfg.max_iters {
        let current = data + model;
        let mut accepted = None;
        for _ in 0..=cfg.max_retries {
            let m_new = enrml_update(&state, &pred, noise, lambda)?;
            let pred_new = forward.evaluate_ensemble(&m_new);
            let candidate = EnsembleState {
                m: m_new,
                ..state.clone()
            };
            let terms = if pred_new.iter().all(|v| v.is_finite()) {
                Some(mean_objective_terms(&candidate, &pred_new, noise)?)
            } else {
                None
            };
            match terms {
                Some((d, m)) if d + m < current => {
                    lambda *= cfg.lambda.decrease;
                    accepted = Some((candidate, pred_new, d, m));
                    break;
                }
                _ => lambda *= cfg.lambda.increase,
            }
        }
        let was_accepted = accepted.is_some();
        if let Some((candidate, pred_new, d, m)) = accepted {
            state = candidate;
            pred = pred_new;
            data = d;
            model = m;
        }
        state.iteration = iteration;
        trace.push(TraceRow {
            iteration,
            lambda,
            mean_objective: data + model,
            mean_data_mismatch: data,
            mean_model_mismatch: model,
            accepted: was_accepted,
        });
        let change = (current - (data + model)).abs() / current.abs().max(f64::MIN_POSITIVE);
        if was_accepted && change < cfg.tolerance {
            stalled += 1;
        } else if was_accepted {
            stalled = 0;
        }
        if current == 0.0 || stalled >= cfg.patience {
            converged = true;
            break;
        }
    }
    Ok(EnrmlRun {
        state,
        predictions: pred,
        trace,
        converged,
    })
}
