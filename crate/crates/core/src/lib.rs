//! Long-tailed classification with angular prediction.
//!
//! A small MLP is trained on long-tailed data and evaluated with either
//! linear logits or angular logits `π − arccos(cos θ)`. On top of that sit
//! the two-stage finetuning recipes (label-aware smoothing with learnable
//! weight scaling, and its batch-adaptive angular variant), the angular
//! bias correction, sample hardness scores for pruning, and per-class
//! diagnostics.

pub mod angular;
pub mod calibrate;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod framework;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod prune;

pub use angular::PredictionMode;
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use framework::{run_experiment, EvalReport, ExperimentConfig, ExperimentResult};
pub use model::ModelParams;
pub use numeric::{Matrix, RngStream};
