//! Shapley-weighted ensemble optimization of adjustable features.
//!
//! Each well is optimized on its own: the adjustable inputs form the EnRML
//! parameter vector, the fixed inputs are spliced back in before every
//! emulator call, and the "observation" is the unreachable bound of a tanh
//! transformed output (−1 when minimizing, +1 when maximizing). The EnRML
//! correction is scaled per feature by a weight derived from that feature's
//! Shapley value, by a trust-region style step factor, and iterations are
//! grouped into blocks that are committed or rolled back as a whole.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Direction, FeatureSchema, NormStats, Role, WellRecord};
use crate::emulator::EmulatorModel;
use crate::enrml::{self, EnrmlError, ForwardModel, NoiseModel};
use crate::seed;
use crate::shapley::{self, BackgroundSet, ShapleyAttribution, ShapleyError};

#[derive(Debug, Error)]
pub enum InterOptError {
    #[error(transparent)]
    Enrml(#[from] EnrmlError),
    #[error(transparent)]
    Shapley(#[from] ShapleyError),
    #[error(transparent)]
    Data(#[from] crate::dataset::DatasetError),
    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model was trained on a different schema")]
    SchemaMismatch,
    #[error("non-finite emulator output during optimization")]
    NonFinite,
    #[error("unknown record id {0:?}")]
    UnknownRecord(String),
}

pub type Result<T, E = InterOptError> = std::result::Result<T, E>;

/// Per-record optimization problem in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct WellContext {
    pub id: String,
    /// Full input row as given, physical units.
    pub physical: Vec<f64>,
    /// Full input row, normalized; fixed entries are never written.
    pub normalized: Vec<f64>,
    pub adjustable: Vec<usize>,
    pub fixed: Vec<usize>,
    /// Prior adjustable values, normalized.
    pub m_pr: Vec<f64>,
}

impl WellContext {
    pub fn new(schema: &FeatureSchema, norm: &NormStats, record: &WellRecord) -> Result<Self> {
        schema.validate_for_optimization()?;
        if record.inputs.len() != schema.n_inputs() {
            return Err(InterOptError::Shape {
                what: "record inputs",
                expected: schema.n_inputs(),
                got: record.inputs.len(),
            });
        }
        let normalized = norm.normalize_inputs(&record.inputs);
        let adjustable = schema.input_indices(Role::Adjustable);
        let fixed = schema.input_indices(Role::Fixed);
        let m_pr = adjustable.iter().map(|&i| normalized[i]).collect();
        Ok(WellContext {
            id: record.id.clone(),
            physical: record.inputs.clone(),
            normalized,
            adjustable,
            fixed,
            m_pr,
        })
    }

    /// Normalized input row with `m` placed at the adjustable positions.
    pub fn splice(&self, m: &[f64]) -> Vec<f64> {
        let mut x = self.normalized.clone();
        for (&i, &v) in self.adjustable.iter().zip(m) {
            x[i] = v;
        }
        x
    }

    /// Physical input row: adjustables denormalized from `m`, fixed entries
    /// copied from the original record.
    pub fn physical_row(&self, m: &[f64], norm: &NormStats) -> Vec<f64> {
        let mut x = self.physical.clone();
        for (&i, &v) in self.adjustable.iter().zip(m) {
            x[i] = norm.denormalize_input(i, v);
        }
        x
    }
}

struct SplicedEmulator<'a> {
    model: &'a EmulatorModel,
    ctx: &'a WellContext,
}

impl ForwardModel for SplicedEmulator<'_> {
    fn n_params(&self) -> usize {
        self.ctx.adjustable.len()
    }

    fn n_data(&self) -> usize {
        1
    }

    fn evaluate(&self, m: &[f64]) -> Vec<f64> {
        vec![self.model.eval(&self.ctx.splice(m))]
    }
}

/// `tanh(g_j) − t`, with `t = −1` when minimizing and `+1` when maximizing.
///
/// When minimizing, every entry lies in `(0, 2]` and decays to zero as the
/// output falls, so the pull towards lower values saturates instead of
/// diverging.
pub fn transform_data_mismatch(g: &[f64], direction: Direction) -> Vec<f64> {
    let t = direction.bound();
    g.iter().map(|v| v.tanh() - t).collect()
}

/// `w_k = 1 / (−log10(clamp(|φ_k|, lo, hi)))`.
///
/// # Panics
/// If `clamp` does not satisfy `0 < lo < hi < 1`.
pub fn dynamic_weights(phi: &[f64], clamp: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = clamp;
    assert!(0.0 < lo && lo < hi && hi < 1.0, "clamp bounds must satisfy 0 < lo < hi < 1");
    phi.iter()
        .map(|p| {
            let a = if p.is_nan() { lo } else { p.abs().clamp(lo, hi) };
            1.0 / -a.log10()
        })
        .collect()
}

/// `weights ⊙ (δ_model + multiplier·δ_data)`.
pub fn weighted_correction(
    delta_model: &[f64],
    delta_data: &[f64],
    weights: &[f64],
    multiplier: f64,
) -> Result<Vec<f64>> {
    for (what, len) in [("data correction", delta_data.len()), ("weights", weights.len())] {
        if len != delta_model.len() {
            return Err(InterOptError::Shape {
                what,
                expected: delta_model.len(),
                got: len,
            });
        }
    }
    Ok(delta_model
        .iter()
        .zip(delta_data)
        .zip(weights)
        .map(|((m, d), w)| w * (m + multiplier * d))
        .collect())
}

/// Step multiplier schedule with absolute bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepFactors {
    pub increase: f64,
    pub decrease: f64,
    pub floor: f64,
    pub cap: f64,
}

impl StepFactors {
    /// Cap at 10× and floor at 0.01× of `initial`.
    pub fn relative_to(initial: f64, increase: f64, decrease: f64) -> Self {
        StepFactors {
            increase,
            decrease,
            floor: 0.01 * initial,
            cap: 10.0 * initial,
        }
    }
}

/// Accepts strict improvements and enlarges the step; otherwise rejects and
/// shrinks it. Ties count as deterioration.
pub fn adaptive_step(
    prev_objective: f64,
    new_objective: f64,
    step: f64,
    factors: &StepFactors,
) -> (bool, f64) {
    if new_objective < prev_objective {
        (true, (step * factors.increase).min(factors.cap))
    } else {
        (false, (step * factors.decrease).max(factors.floor))
    }
}

/// One proposal per call; used by [`run_block`].
pub trait Stepper {
    type State: Clone;
    fn objective(&self, state: &Self::State) -> f64;
    fn propose(&mut self, state: &Self::State, step: f64) -> Result<Self::State>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub iterations: usize,
    /// Step adaptation; the step stays fixed when `None`.
    pub adaptive: Option<StepFactors>,
    /// Judge whole blocks instead of single iterations.
    pub block_optimization: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStep {
    /// Infinite when the proposal failed numerically.
    pub objective: f64,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSummary {
    pub entry_objective: f64,
    pub end_objective: f64,
    pub best_objective: f64,
    pub committed: bool,
    pub iterations: Vec<IterationStep>,
    /// Numerical failure that ended the block early.
    pub aborted: Option<String>,
}

/// Runs one block of iterations starting from `entry`.
///
/// With block optimization every proposal is taken, even a worse one, so
/// the block may wander; at the end the best state visited in the block is
/// committed if it beats the entry state, otherwise the entry state is
/// returned. A numerical failure ends such a block early and rolls it back.
///
/// Without block optimization, each proposal is judged on its own when step
/// adaptation is on (rejections, including failed proposals, leave the state
/// in place) and always taken when it is off, in which case a failure is
/// returned as an error.
pub fn run_block<S: Stepper>(
    stepper: &mut S,
    entry: &S::State,
    step: &mut f64,
    cfg: &BlockConfig,
) -> Result<(S::State, BlockSummary)> {
    if cfg.iterations == 0 {
        return Err(InterOptError::Config("iterations per block must be ≥ 1".into()));
    }
    let entry_objective = stepper.objective(entry);
    let mut current = entry.clone();
    let mut current_objective = entry_objective;
    let mut best: Option<(S::State, f64)> = None;
    let mut iterations = Vec::with_capacity(cfg.iterations);
    let mut aborted = None;
    for _ in 0..cfg.iterations {
        let used_step = *step;
        let proposal = stepper.propose(&current, used_step).and_then(|c| {
            let objective = stepper.objective(&c);
            if objective.is_finite() {
                Ok((c, objective))
            } else {
                Err(InterOptError::NonFinite)
            }
        });
        let (candidate, objective) = match proposal {
            Ok((c, o)) => (Some(c), o),
            Err(e) if cfg.block_optimization => {
                if let Some(f) = &cfg.adaptive {
                    *step = adaptive_step(current_objective, f64::INFINITY, *step, f).1;
                }
                iterations.push(IterationStep {
                    objective: f64::INFINITY,
                    step: used_step,
                    accepted: false,
                });
                aborted = Some(e.to_string());
                break;
            }
            Err(e) if cfg.adaptive.is_none() => return Err(e),
            Err(_) => (None, f64::INFINITY),
        };
        let improved = match &cfg.adaptive {
            Some(f) => {
                let (ok, next) = adaptive_step(current_objective, objective, *step, f);
                *step = next;
                ok
            }
            None => objective < current_objective,
        };
        let take = cfg.block_optimization || cfg.adaptive.is_none() || improved;
        let accepted = take && candidate.is_some();
        if let (true, Some(c)) = (take, candidate) {
            current = c;
            current_objective = objective;
            if cfg.block_optimization && best.as_ref().is_none_or(|(_, b)| objective < *b) {
                best = Some((current.clone(), objective));
            }
        }
        iterations.push(IterationStep {
            objective,
            step: used_step,
            accepted,
        });
    }
    let best_objective = iterations
        .iter()
        .map(|i| i.objective)
        .fold(entry_objective, f64::min);
    let (state, end_objective, committed) = if !cfg.block_optimization {
        (current, current_objective, true)
    } else {
        match best {
            Some((state, objective)) if aborted.is_none() && objective < entry_objective => {
                (state, objective, true)
            }
            _ => (entry.clone(), entry_objective, false),
        }
    };
    Ok((
        state,
        BlockSummary {
            entry_objective,
            end_objective,
            best_objective,
            committed,
            iterations,
            aborted,
        },
    ))
}

fn default_n_e() -> usize {
    100
}
fn default_max_blocks() -> usize {
    10
}
fn default_iters() -> usize {
    10
}
fn one() -> f64 {
    1.0
}
fn default_increase() -> f64 {
    1.5
}
fn default_decrease() -> f64 {
    0.5
}
fn default_multiplier() -> f64 {
    10.0
}
fn default_clamp() -> (f64, f64) {
    (1e-6, 0.99)
}
fn default_prior_std() -> f64 {
    0.5
}
fn default_tolerance() -> f64 {
    1e-6
}
fn default_patience() -> usize {
    3
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterOptConfig {
    #[serde(default = "default_n_e")]
    pub n_e: usize,
    #[serde(default = "default_max_blocks")]
    pub max_blocks: usize,
    #[serde(default = "default_iters")]
    pub iterations_per_block: usize,
    /// Initial step factor; also scales the spread of the initial ensemble.
    #[serde(default = "one")]
    pub initial_step: f64,
    #[serde(default = "default_increase")]
    pub step_increase: f64,
    #[serde(default = "default_decrease")]
    pub step_decrease: f64,
    /// Weight of the data correction relative to the model correction.
    #[serde(default = "default_multiplier")]
    pub data_multiplier: f64,
    #[serde(default = "default_clamp")]
    pub shap_clamp: (f64, f64),
    /// Falls back to the schema direction when unset.
    #[serde(default)]
    pub direction: Option<Direction>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub dynamic_weights: bool,
    #[serde(default = "yes")]
    pub adaptive_step: bool,
    #[serde(default = "yes")]
    pub block_optimization: bool,
    /// Damping multiplier of the EnRML update, held fixed.
    #[serde(default = "one")]
    pub lambda: f64,
    /// Prior standard deviation of each adjustable feature, normalized units.
    #[serde(default = "default_prior_std")]
    pub prior_std: f64,
    /// Variance of the transformed data mismatch.
    #[serde(default = "one")]
    pub data_variance: f64,
    /// Relative objective change per block regarded as stalled.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Stalled blocks in a row after which optimization stops.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl Default for InterOptConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl InterOptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(InterOptError::Config(m.into()));
        if self.n_e < 2 {
            return bad("n_e must be at least 2");
        }
        if self.max_blocks == 0 || self.iterations_per_block == 0 {
            return bad("max_blocks and iterations_per_block must be at least 1");
        }
        if !(self.initial_step.is_finite() && self.initial_step > 0.0) {
            return bad("initial_step must be positive");
        }
        if !(self.step_increase > 1.0) || !(self.step_decrease > 0.0 && self.step_decrease < 1.0) {
            return bad("step_increase must exceed 1 and step_decrease lie in (0, 1)");
        }
        if !(self.data_multiplier.is_finite() && self.data_multiplier > 0.0) {
            return bad("data_multiplier must be positive");
        }
        let (lo, hi) = self.shap_clamp;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad("shap_clamp must satisfy 0 < lo < hi < 1");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and ≥ 0");
        }
        for (name, v) in [("prior_std", self.prior_std), ("data_variance", self.data_variance)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(InterOptError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn step_factors(&self) -> StepFactors {
        StepFactors::relative_to(self.initial_step, self.step_increase, self.step_decrease)
    }

    pub fn with_toggles(&self, block_optimization: bool, adaptive_step: bool) -> Self {
        InterOptConfig {
            block_optimization,
            adaptive_step,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Improved,
    /// Final prediction not better than the prior plan.
    NoImprovement,
    /// Numerical failure, or an objective that ended above its start.
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub block: usize,
    /// Emulator prediction at the proposed ensemble mean, physical units;
    /// absent when the proposal failed numerically.
    pub predicted_target: Option<f64>,
    pub objective: Option<f64>,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block: usize,
    pub entry_objective: f64,
    pub end_objective: f64,
    pub committed: bool,
    /// Objective of the committed state after this block.
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: Vec<IterationRecord>,
    pub blocks: Vec<BlockRecord>,
    /// Ensemble mean of the final committed state, physical units.
    pub converged_plan: Vec<f64>,
    pub converged_target: f64,
    /// Evaluated ensemble mean with the best prediction, physical units.
    pub in_process_plan: Vec<f64>,
    pub in_process_target: f64,
    /// Blocks cut short and rolled back by a numerical failure.
    pub aborted_blocks: usize,
    /// Failure that ended the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellPlan {
    pub id: String,
    pub outcome: Outcome,
    pub adjustable_names: Vec<String>,
    pub before: Vec<f64>,
    /// Recommended values; the prior plan unless the outcome is `Improved`.
    pub after: Vec<f64>,
    /// `after` with integer-valued features rounded half away from zero.
    pub after_rounded: Vec<f64>,
    pub predicted_before: f64,
    pub predicted_after: f64,
    /// Relative improvement in the optimization direction.
    pub reduction_rate: f64,
    /// Full input rows, physical units.
    pub inputs_before: Vec<f64>,
    pub inputs_after: Vec<f64>,
}

#[derive(Clone)]
struct WellState {
    m: DMatrix<f64>,
    pred: DMatrix<f64>,
    objective: f64,
}

struct WellStepper<'a> {
    forward: SplicedEmulator<'a>,
    m_pr: DMatrix<f64>,
    noise: NoiseModel,
    weights: Vec<f64>,
    cfg: &'a InterOptConfig,
    direction: Direction,
    /// (normalized ensemble mean, normalized prediction) of every proposal,
    /// `None` for failed ones.
    proposals: Vec<Option<(Vec<f64>, f64)>>,
}

impl WellStepper<'_> {
    fn evaluate(&self, m: DMatrix<f64>) -> Result<WellState> {
        let pred = self.forward.evaluate_ensemble(&m);
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(InterOptError::NonFinite);
        }
        let objective = self.mean_objective(&m, &pred);
        Ok(WellState { m, pred, objective })
    }

    fn mean_objective(&self, m: &DMatrix<f64>, pred: &DMatrix<f64>) -> f64 {
        let residual = transform_data_mismatch(pred.row(0).transpose().as_slice(), self.direction);
        let n_e = m.ncols();
        let mut total = 0.0;
        for j in 0..n_e {
            let model: f64 = (0..m.nrows())
                .map(|i| (m[(i, j)] - self.m_pr[(i, j)]).powi(2) / self.noise.cm()[i])
                .sum();
            let data = residual[j].powi(2) / self.noise.cd()[0];
            total += 0.5 * model + 0.5 * self.cfg.data_multiplier * data;
        }
        total / n_e as f64
    }

    fn mean_prediction(&self, m: &DMatrix<f64>) -> (Vec<f64>, f64) {
        let mean = m.column_mean().as_slice().to_vec();
        let g = self.forward.evaluate(&mean)[0];
        (mean, g)
    }
}

impl Stepper for WellStepper<'_> {
    type State = WellState;

    fn objective(&self, state: &WellState) -> f64 {
        state.objective
    }

    fn propose(&mut self, state: &WellState, step: f64) -> Result<WellState> {
        self.proposals.push(None);
        let tanh_pred = state.pred.map(f64::tanh);
        let residual = tanh_pred.add_scalar(-self.direction.bound());
        let c = enrml::correction_terms(
            &state.m,
            &self.m_pr,
            &tanh_pred,
            &residual,
            &self.noise,
            self.cfg.lambda,
        )?;
        let mut m = state.m.clone();
        for j in 0..m.ncols() {
            let corr = weighted_correction(
                c.delta_model.column(j).as_slice(),
                c.delta_data.column(j).as_slice(),
                &self.weights,
                self.cfg.data_multiplier,
            )?;
            for (i, v) in corr.iter().enumerate() {
                m[(i, j)] -= step * v;
            }
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(InterOptError::NonFinite);
        }
        let next = self.evaluate(m)?;
        let proposal = self.mean_prediction(&next.m);
        if let Some(last) = self.proposals.last_mut() {
            *last = Some(proposal);
        }
        Ok(next)
    }
}

fn relative_gain(before: f64, after: f64, direction: Direction) -> f64 {
    let diff = match direction {
        Direction::Minimize => before - after,
        Direction::Maximize => after - before,
    };
    if before == 0.0 {
        if diff > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        diff / before.abs()
    }
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Optimizes the adjustable features of one well.
///
/// Numerical failures and divergence are reported through the outcome; the
/// error path is reserved for invalid inputs.
pub fn optimize_well(
    model: &EmulatorModel,
    schema: &FeatureSchema,
    ctx: &WellContext,
    attribution: &ShapleyAttribution,
    cfg: &InterOptConfig,
) -> Result<(WellPlan, OptimizationTrace)> {
    cfg.validate()?;
    if model.schema_fingerprint != schema.fingerprint() {
        return Err(InterOptError::SchemaMismatch);
    }
    if attribution.phi.len() != schema.n_inputs() {
        return Err(InterOptError::Shape {
            what: "attribution",
            expected: schema.n_inputs(),
            got: attribution.phi.len(),
        });
    }
    let norm = &model.norm;
    let direction = cfg.direction.unwrap_or(schema.direction());
    let n_m = ctx.adjustable.len();
    // weights follow the attribution in physical target units
    let phi_adj: Vec<f64> = ctx
        .adjustable
        .iter()
        .map(|&i| attribution.phi[i] * norm.target_std)
        .collect();
    let weights = if cfg.dynamic_weights {
        dynamic_weights(&phi_adj, cfg.shap_clamp)
    } else {
        vec![1.0; n_m]
    };
    let prior_var = cfg.prior_std * cfg.prior_std;
    let noise = NoiseModel::isotropic(1, cfg.data_variance, n_m, prior_var)?;
    let m_pr_vec = DVector::from_column_slice(&ctx.m_pr);
    let well_seed = seed::derive(cfg.seed, seed::hash_id(&ctx.id));
    let m0 = enrml::init_realizations(
        &m_pr_vec,
        &DVector::from_element(n_m, cfg.initial_step * prior_var),
        cfg.n_e,
        well_seed,
    )?;
    let mut stepper = WellStepper {
        forward: SplicedEmulator { model, ctx },
        m_pr: m0.clone(),
        noise,
        weights,
        cfg,
        direction,
        proposals: Vec::new(),
    };

    let names = schema.input_names();
    let adjustable_names: Vec<String> = ctx.adjustable.iter().map(|&i| names[i].clone()).collect();
    let integer: Vec<bool> = ctx
        .adjustable
        .iter()
        .map(|&i| schema.inputs().nth(i).is_some_and(|f| f.integer_valued))
        .collect();
    let to_physical = |m: &[f64]| -> Vec<f64> {
        ctx.adjustable
            .iter()
            .zip(m)
            .map(|(&i, &v)| norm.denormalize_input(i, v))
            .collect()
    };
    let prior_target_n = model.eval(&ctx.splice(&ctx.m_pr));
    let predicted_before = norm.denormalize_target(prior_target_n);
    let before: Vec<f64> = ctx.adjustable.iter().map(|&i| ctx.physical[i]).collect();

    let mut failure = None;
    let mut aborted_blocks = 0;
    let initial = stepper.evaluate(m0)?;
    let initial_objective = initial.objective;
    let mut committed = initial;
    let mut step = cfg.initial_step;
    let block_cfg = BlockConfig {
        iterations: cfg.iterations_per_block,
        adaptive: cfg.adaptive_step.then(|| cfg.step_factors()),
        block_optimization: cfg.block_optimization,
    };
    let mut iterations = Vec::new();
    let mut blocks = Vec::new();
    let mut stalled = 0;
    for b in 0..cfg.max_blocks {
        let seen = stepper.proposals.len();
        match run_block(&mut stepper, &committed, &mut step, &block_cfg) {
            Ok((state, summary)) => {
                for (k, (it, p)) in summary
                    .iterations
                    .iter()
                    .zip(&stepper.proposals[seen..])
                    .enumerate()
                {
                    iterations.push(IterationRecord {
                        iteration: b * cfg.iterations_per_block + k + 1,
                        block: b,
                        predicted_target: p.as_ref().map(|(_, g)| norm.denormalize_target(*g)),
                        objective: it.objective.is_finite().then_some(it.objective),
                        step: it.step,
                        accepted: it.accepted,
                    });
                }
                let prev = committed.objective;
                committed = state;
                if summary.aborted.is_some() {
                    aborted_blocks += 1;
                }
                blocks.push(BlockRecord {
                    block: b,
                    entry_objective: summary.entry_objective,
                    end_objective: summary.end_objective,
                    committed: summary.committed,
                    best_so_far: committed.objective,
                });
                let change = (prev - committed.objective).abs() / prev.abs().max(f64::MIN_POSITIVE);
                stalled = if change < cfg.tolerance { stalled + 1 } else { 0 };
                if stalled >= cfg.patience {
                    break;
                }
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }

    let (mean, g) = stepper.mean_prediction(&committed.m);
    let converged_plan = to_physical(&mean);
    let converged_target = norm.denormalize_target(g);
    let mut best = (ctx.m_pr.clone(), prior_target_n);
    for (m, g) in std::iter::once(&(mean.clone(), g)).chain(stepper.proposals.iter().flatten()) {
        if direction.improves(*g, best.1) {
            best = (m.clone(), *g);
        }
    }
    let trace = OptimizationTrace {
        initial_objective,
        final_objective: committed.objective,
        iterations,
        blocks,
        converged_plan: converged_plan.clone(),
        converged_target,
        in_process_plan: to_physical(&best.0),
        in_process_target: norm.denormalize_target(best.1),
        aborted_blocks,
        failure: failure.clone(),
    };

    let gain = relative_gain(predicted_before, converged_target, direction);
    let outcome = if failure.is_some() || committed.objective > initial_objective || !gain.is_finite()
    {
        Outcome::NotConverged
    } else if round4(gain) <= 0.0 {
        Outcome::NoImprovement
    } else {
        Outcome::Improved
    };
    let (after, predicted_after, reduction_rate, after_n) = if outcome == Outcome::Improved {
        (converged_plan, converged_target, gain, mean)
    } else {
        (before.clone(), predicted_before, 0.0, ctx.m_pr.clone())
    };
    let after_rounded = after
        .iter()
        .zip(&integer)
        .map(|(v, &int)| if int { v.round() } else { *v })
        .collect();
    let inputs_after = if outcome == Outcome::Improved {
        ctx.physical_row(&after_n, norm)
    } else {
        ctx.physical.clone()
    };
    Ok((
        WellPlan {
            id: ctx.id.clone(),
            outcome,
            adjustable_names,
            before,
            after,
            after_rounded,
            predicted_before,
            predicted_after,
            reduction_rate,
            inputs_before: ctx.physical.clone(),
            inputs_after,
        },
        trace,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMode {
    Exact,
    Sampled { permutations: usize },
}

impl AttributionMode {
    /// Exact enumeration up to the exact-mode cap, 1000 permutations beyond.
    pub fn auto(n_features: usize) -> Self {
        if n_features <= shapley::EXACT_CAP {
            AttributionMode::Exact
        } else {
            AttributionMode::Sampled { permutations: 1000 }
        }
    }
}

/// Local attributions (normalized target units) for every record.
pub fn attribute_records(
    model: &EmulatorModel,
    data: &Dataset,
    mode: AttributionMode,
    background_cap: usize,
    seed: u64,
) -> Result<Vec<ShapleyAttribution>> {
    let inputs: Vec<Vec<f64>> = data.records.iter().map(|r| r.inputs.clone()).collect();
    let bg = BackgroundSet::from_physical(&inputs, &model.norm, background_cap, seed)?;
    attribute_with_background(model, data, &bg, mode, seed)
}

pub fn attribute_with_background(
    model: &EmulatorModel,
    data: &Dataset,
    bg: &BackgroundSet,
    mode: AttributionMode,
    seed: u64,
) -> Result<Vec<ShapleyAttribution>> {
    data.records
        .iter()
        .map(|r| {
            let x = model.norm.normalize_inputs(&r.inputs);
            let a = match mode {
                AttributionMode::Exact => shapley::shapley_exact(model, bg, &x)?,
                AttributionMode::Sampled { permutations } => shapley::shapley_sampled(
                    model,
                    bg,
                    &x,
                    permutations,
                    seed::derive(seed, seed::hash_id(&r.id)),
                )?,
            };
            Ok(a.with_id(r.id.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellResult {
    pub id: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<WellPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<OptimizationTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WellResult {
    pub fn reduction_rate(&self) -> f64 {
        self.plan.as_ref().map_or(0.0, |p| p.reduction_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub label: String,
    /// Inclusive lower edge in percent; `None` is unbounded.
    pub lower: Option<f64>,
    /// Exclusive upper edge in percent; `None` is unbounded.
    pub upper: Option<f64>,
    pub count: usize,
}

const BUCKET_EDGES: [f64; 5] = [1.0, 5.0, 10.0, 20.0, 30.0];

/// Counts reduction rates (percent) into `<1, 1–5, 5–10, 10–20, 20–30, ≥30`.
pub fn reduction_histogram(rates_pct: &[f64]) -> Vec<HistogramBucket> {
    let mut buckets: Vec<HistogramBucket> = (0..=BUCKET_EDGES.len())
        .map(|k| {
            let lower = k.checked_sub(1).map(|i| BUCKET_EDGES[i]);
            let upper = BUCKET_EDGES.get(k).copied();
            let label = match (lower, upper) {
                (None, Some(u)) => format!("<{u}%"),
                (Some(l), Some(u)) => format!("{l}-{u}%"),
                (Some(l), None) => format!(">={l}%"),
                (None, None) => unreachable!(),
            };
            HistogramBucket {
                label,
                lower,
                upper,
                count: 0,
            }
        })
        .collect();
    for r in rates_pct {
        let k = BUCKET_EDGES.iter().take_while(|e| *r >= **e).count();
        buckets[k].count += 1;
    }
    buckets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub block_optimization: bool,
    pub adaptive_step: bool,
    pub dynamic_weights: bool,
    pub not_converged: usize,
    pub no_improvement: usize,
    pub mean_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub direction: Direction,
    pub config: InterOptConfig,
    pub wells: Vec<WellResult>,
    pub mean_reduction: f64,
    pub histogram: Vec<HistogramBucket>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Vec<AblationRow>>,
}

impl CampaignReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn count(&self, outcome: Outcome) -> usize {
        self.wells.iter().filter(|w| w.outcome == outcome).count()
    }

    /// `id,outcome,predicted_before,predicted_after,reduction_pct`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("id,outcome,predicted_before,predicted_after,reduction_pct\n");
        for w in &self.wells {
            let outcome = serde_json::to_value(w.outcome)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            match &w.plan {
                Some(p) => out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    w.id,
                    outcome,
                    p.predicted_before,
                    p.predicted_after,
                    p.reduction_rate * 100.0
                )),
                None => out.push_str(&format!("{},{},,,0\n", w.id, outcome)),
            }
        }
        out
    }

    pub fn distribution_csv(&self) -> String {
        distribution_csv(&self.histogram)
    }

    pub fn ablation_csv(&self) -> Option<String> {
        self.ablation.as_deref().map(ablation_csv)
    }
}

pub fn distribution_csv(histogram: &[HistogramBucket]) -> String {
    let mut out = String::from("bucket,count\n");
    for b in histogram {
        out.push_str(&format!("{},{}\n", b.label, b.count));
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "block_optimization,adaptive_step,dynamic_weights,not_converged,no_improvement,mean_reduction_pct\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.block_optimization,
            r.adaptive_step,
            r.dynamic_weights,
            r.not_converged,
            r.no_improvement,
            r.mean_reduction * 100.0
        ));
    }
    out
}

/// Optimizes every record against precomputed attributions. Wells run in
/// parallel; a well that cannot be set up is recorded, not propagated.
pub fn optimize_records(
    model: &EmulatorModel,
    data: &Dataset,
    attributions: &[ShapleyAttribution],
    cfg: &InterOptConfig,
) -> Result<Vec<WellResult>> {
    cfg.validate()?;
    if attributions.len() != data.len() {
        return Err(InterOptError::Shape {
            what: "attributions",
            expected: data.len(),
            got: attributions.len(),
        });
    }
    Ok(data
        .records
        .par_iter()
        .zip(attributions.par_iter())
        .map(|(rec, attr)| {
            let run = WellContext::new(&data.schema, &model.norm, rec)
                .and_then(|ctx| optimize_well(model, &data.schema, &ctx, attr, cfg));
            match run {
                Ok((plan, trace)) => WellResult {
                    id: rec.id.clone(),
                    outcome: plan.outcome,
                    plan: Some(plan),
                    trace: Some(trace),
                    error: None,
                },
                Err(e) => WellResult {
                    id: rec.id.clone(),
                    outcome: Outcome::NotConverged,
                    plan: None,
                    trace: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

fn mean_reduction(wells: &[WellResult]) -> f64 {
    if wells.is_empty() {
        return 0.0;
    }
    wells.iter().map(WellResult::reduction_rate).sum::<f64>() / wells.len() as f64
}

/// Runs the four block/step toggle combinations over the same attributions.
pub fn ablation_matrix(
    model: &EmulatorModel,
    data: &Dataset,
    attributions: &[ShapleyAttribution],
    cfg: &InterOptConfig,
) -> Result<Vec<AblationRow>> {
    [(true, true), (false, true), (true, false), (false, false)]
        .into_iter()
        .map(|(block, adaptive)| {
            let wells = optimize_records(model, data, attributions, &cfg.with_toggles(block, adaptive))?;
            Ok(AblationRow {
                block_optimization: block,
                adaptive_step: adaptive,
                dynamic_weights: cfg.dynamic_weights,
                not_converged: wells.iter().filter(|w| w.outcome == Outcome::NotConverged).count(),
                no_improvement: wells.iter().filter(|w| w.outcome == Outcome::NoImprovement).count(),
                mean_reduction: mean_reduction(&wells),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignOptions {
    pub attribution: Option<AttributionMode>,
    pub background_cap: usize,
    pub ablation: bool,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        CampaignOptions {
            attribution: None,
            background_cap: shapley::DEFAULT_BACKGROUND_CAP,
            ablation: false,
        }
    }
}

/// Attributes every record once, optimizes each, and aggregates the results.
pub fn optimize_campaign(
    model: &EmulatorModel,
    data: &Dataset,
    cfg: &InterOptConfig,
    opts: &CampaignOptions,
) -> Result<CampaignReport> {
    cfg.validate()?;
    if model.schema_fingerprint != data.schema.fingerprint() {
        return Err(InterOptError::SchemaMismatch);
    }
    let mode = opts
        .attribution
        .unwrap_or_else(|| AttributionMode::auto(data.schema.n_inputs()));
    let attributions = attribute_records(
        model,
        data,
        mode,
        opts.background_cap,
        seed::derive(cfg.seed, 0x5A),
    )?;
    let wells = optimize_records(model, data, &attributions, cfg)?;
    let rates: Vec<f64> = wells.iter().map(|w| w.reduction_rate() * 100.0).collect();
    let ablation = if opts.ablation {
        Some(ablation_matrix(model, data, &attributions, cfg)?)
    } else {
        None
    };
    Ok(CampaignReport {
        direction: cfg.direction.unwrap_or(data.schema.direction()),
        config: cfg.clone(),
        mean_reduction: mean_reduction(&wells),
        histogram: reduction_histogram(&rates),
        wells,
        ablation,
    })
}
