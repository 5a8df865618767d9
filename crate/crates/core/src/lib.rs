//! Interpretable surrogate-based optimization of per-record operational parameters.
//!
//! The pipeline has three stages:
//!
//! 1. [`emulator`]: a fully connected network trained on tabular records
//!    (geological + operational features → target such as average cost).
//! 2. [`shapley`]: model-agnostic Shapley attribution of each input feature,
//!    exact by coalition enumeration or sampled by random permutations.
//! 3. [`interopt`]: a Shapley-weighted ensemble randomized maximum likelihood
//!    optimizer ([`enrml`]) that moves the adjustable features of one record
//!    while its fixed features stay untouched.
//!
//! [`dataset`] holds the tabular data model, normalization, leave-one-out
//! splitting and a synthetic ground-truth generator.

pub mod dataset;
pub mod emulator;
pub mod enrml;
pub mod interopt;
pub mod seed;
pub mod shapley;

pub use dataset::{
    Dataset, DatasetError, Direction, FeatureSchema, FeatureSpec, NormStats, Role,
    SyntheticGroundTruth, WellRecord,
};
pub use emulator::{Activation, EmulatorError, EmulatorModel, TrainConfig};
pub use enrml::{EnrmlConfig, EnrmlError, EnsembleState, NoiseModel};
pub use interopt::{InterOptConfig, InterOptError, Outcome};
pub use shapley::{BackgroundSet, Predictor, ShapleyAttribution, ShapleyError};
