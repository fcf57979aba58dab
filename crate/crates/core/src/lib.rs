//! Two-stage debiasing workbench.
//!
//! Stage one mines bias-conflicting samples with a pair of deliberately biased
//! peer models ([`ecs`]); stage two trains a classifier whose per-iteration
//! sample weights keep the gradient contributions of bias-aligned and
//! bias-conflicting samples balanced ([`trainers`]). Datasets are synthetic
//! vectors with a cheap shortcut feature block ([`datagen`]).

pub mod datagen;
pub mod ecs;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod trainers;

mod sampler;

pub use datagen::{BiasedDatasetSpec, Dataset, Sample, Split};
pub use ecs::{BcScores, LabelQuality, ScoringConfig, ScoringMethod};
pub use error::{Error, Result};
pub use metrics::{EvalReport, Evaluation, Fairness, Stability};
pub use nn::{ModelParams, OptimizerKind};
pub use pipeline::{ExperimentConfig, Manifest, RunReport, SweepParam};
pub use trainers::{GradStatsTrace, LabelSource, StageTwoConfig, TraceRecord, TrainMethod, TrainOutcome};
