//! Stage two: train the debiased classifier.
//!
//! Three objectives share one loop:
//!
//! * `Vanilla` – uniform weights.
//! * `Rew` – aligned samples weighted `N̄ / (γ·N̲)` for the whole run,
//!   conflicting samples weighted 1.
//! * `Ga` – aligned samples weighted by the per-batch contribution ratio
//!   `r = Σ_conflicting (1 - p) / (γ · Σ_aligned (1 - p))`, computed from the
//!   current model before the step and held constant in the loss.
//!
//! Every iteration records the summed logit-gradient norms `2 - 2p` of both
//! groups, which is enough to plot how the two groups drive optimisation.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::metrics::{evaluate, Evaluation};
use crate::nn::{Loss, ModelParams, Optimizer, OptimizerKind};
use crate::sampler::BatchSampler;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Vanilla,
    Rew,
    Ga,
}

/// Where the aligned/conflicting split used for weighting comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSource {
    /// Stage-one scores thresholded at `tau`.
    Pseudo { tau: f64 },
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTwoConfig {
    pub method: TrainMethod,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub label_source: LabelSource,
    pub seed: u64,
    pub hidden_layers: Vec<usize>,
    /// Upper bound on the contribution ratio.
    pub r_max: f64,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::Ga,
            gamma: 1.6,
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            label_source: LabelSource::Pseudo { tau: 0.8 },
            seed: 4,
            hidden_layers: vec![100, 100, 100],
            r_max: 1e3,
        }
    }
}

impl StageTwoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.r_max.is_nan() || self.r_max <= 0.0 {
            return Err(Error::config("r_max must be positive"));
        }
        if let LabelSource::Pseudo { tau } = self.label_source {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::config(format!("tau must lie in (0,1), got {tau}")));
            }
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioStatus {
    Computed,
    /// No conflicting sample in the batch; the previous ratio was reused.
    CarriedForward,
    /// Ratio exceeded `r_max` (including a zero denominator).
    Clamped,
    /// Fixed weight (vanilla or plain reweighting).
    Static,
}

impl RatioStatus {
    fn as_str(&self) -> &'static str {
        match self {
            RatioStatus::Computed => "computed",
            RatioStatus::CarriedForward => "carried_forward",
            RatioStatus::Clamped => "clamped",
            RatioStatus::Static => "static",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "computed" => RatioStatus::Computed,
            "carried_forward" => RatioStatus::CarriedForward,
            "clamped" => RatioStatus::Clamped,
            "static" => RatioStatus::Static,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioStep {
    pub value: f64,
    pub status: RatioStatus,
}

/// `Σ (2 - 2p)`; an empty group gives `+0`, not the `-0` of `Iterator::sum`.
fn contribution(probs: &[f64]) -> f64 {
    probs.iter().fold(0.0, |acc, p| acc + (2.0 - 2.0 * p))
}

/// Contribution ratio of one batch.
///
/// An empty conflicting group reuses `previous` (1 before any ratio exists);
/// a ratio above `r_max` is clamped.
pub fn compute_ratio(
    probs_conflicting: &[f64],
    probs_aligned: &[f64],
    gamma: f64,
    previous: Option<f64>,
    r_max: f64,
) -> Result<RatioStep> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!("gamma must be positive, got {gamma}")));
    }
    if let Some(p) = probs_conflicting
        .iter()
        .chain(probs_aligned)
        .find(|p| !(0.0..=1.0).contains(*p))
    {
        return Err(Error::Domain(format!("probability {p} outside [0,1]")));
    }
    if probs_conflicting.is_empty() {
        return Ok(RatioStep {
            value: previous.unwrap_or(1.0),
            status: RatioStatus::CarriedForward,
        });
    }
    let num: f64 = probs_conflicting.iter().map(|p| 1.0 - p).sum();
    let den: f64 = gamma * probs_aligned.iter().map(|p| 1.0 - p).sum::<f64>();
    let r = num / den;
    if den <= 0.0 || r.is_nan() || r > r_max {
        return Ok(RatioStep {
            value: r_max,
            status: RatioStatus::Clamped,
        });
    }
    Ok(RatioStep {
        value: r,
        status: RatioStatus::Computed,
    })
}

/// One row of the gradient-contribution trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub aligned_count: usize,
    pub conflicting_count: usize,
    /// `Σ (2 - 2p)` over aligned samples of the batch.
    pub g_aligned: f64,
    /// `Σ (2 - 2p)` over conflicting samples of the batch.
    pub g_conflicting: f64,
    /// Weight applied to aligned samples this iteration.
    pub ratio: f64,
    pub status: RatioStatus,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStatsTrace {
    pub records: Vec<TraceRecord>,
}

const TRACE_HEADER: &str =
    "iteration,epoch,aligned_count,conflicting_count,g_aligned,g_conflicting,ratio,status";

impl GradStatsTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Fraction of iterations whose ratio was carried forward or clamped.
    pub fn degenerate_fraction(&self) -> f64 {
        let bad = self
            .records
            .iter()
            .filter(|r| matches!(r.status, RatioStatus::CarriedForward | RatioStatus::Clamped))
            .count();
        bad as f64 / self.records.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iteration,
                r.epoch,
                r.aligned_count,
                r.conflicting_count,
                r.g_aligned,
                r.g_conflicting,
                r.ratio,
                r.status.as_str()
            )
            .expect("string write");
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(Error::Version {
                path: path.to_path_buf(),
                message: "unexpected trace header".into(),
            });
        }
        let mut records = Vec::new();
        for (k, line) in lines.enumerate() {
            let n = k + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(err(n, format!("expected 8 fields, found {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(n, format!("bad integer {s:?}")));
            let real = |s: &str| s.parse::<f64>().map_err(|_| err(n, format!("bad number {s:?}")));
            records.push(TraceRecord {
                iteration: int(f[0])?,
                epoch: int(f[1])?,
                aligned_count: int(f[2])?,
                conflicting_count: int(f[3])?,
                g_aligned: real(f[4])?,
                g_conflicting: real(f[5])?,
                ratio: real(f[6])?,
                status: RatioStatus::parse(f[7]).ok_or_else(|| err(n, format!("bad status {:?}", f[7])))?,
            });
        }
        Ok(Self { records })
    }
}

/// Write the trace as CSV.
pub fn export_trace(trace: &GradStatsTrace, path: &Path) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::config("refusing to export an empty trace"));
    }
    std::fs::write(path, trace.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<GradStatsTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GradStatsTrace::from_csv(&text, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub unbiased_test_accuracy: f64,
    pub group_accuracies: std::collections::BTreeMap<String, f64>,
    /// Mean of the weighted batch objective over the epoch.
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: GradStatsTrace,
    pub epochs: Vec<EpochSummary>,
}

impl TrainOutcome {
    pub fn per_epoch_accuracy(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.unbiased_test_accuracy).collect()
    }
}

/// Train a classifier on `train`, evaluating on `test` after every epoch.
///
/// `conflicting[i]` marks sample `i` as bias-conflicting. It drives the
/// weights of `Rew` and `Ga` and the grouping of the trace for all methods.
pub fn train(
    train: &Dataset,
    conflicting: &[bool],
    test: &Dataset,
    cfg: &StageTwoConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = train.len();
    if conflicting.len() != n {
        return Err(Error::shape(format!("{} flags for {n} samples", conflicting.len())));
    }
    if cfg.batch_size > n {
        return Err(Error::config(format!("batch_size {} exceeds dataset size {n}", cfg.batch_size)));
    }
    let n_conf = conflicting.iter().filter(|&&c| c).count();
    let n_al = n - n_conf;
    let static_aligned_weight = match cfg.method {
        TrainMethod::Vanilla => 1.0,
        _ if n_conf == 0 => {
            return Err(Error::config("no sample is flagged bias-conflicting; nothing to rebalance"))
        }
        TrainMethod::Rew if n_al == 0 => {
            return Err(Error::config("no sample is flagged bias-aligned; reweighting is undefined"))
        }
        TrainMethod::Rew => n_conf as f64 / (cfg.gamma * n_al as f64),
        TrainMethod::Ga => f64::NAN,
    };

    let x = train.features();
    let y = train.targets();
    let sizes: Vec<usize> = std::iter::once(train.feature_dim())
        .chain(cfg.hidden_layers.iter().copied())
        .chain(std::iter::once(train.num_classes()))
        .collect();
    let mut params = ModelParams::init(&sizes, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &params)?;
    let mut sampler = BatchSampler::new(n, cfg.batch_size, cfg.seed.wrapping_add(0x5eed));
    let per_epoch = sampler.batches_per_epoch();

    let mut trace = GradStatsTrace::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut previous_ratio: Option<f64> = None;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..per_epoch {
            let t = trace.len();
            let idx = sampler.next_batch();
            let xb = x.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let flags: Vec<bool> = idx.iter().map(|&i| conflicting[i]).collect();

            let mut step = || -> Result<f64> {
                let pass = params.forward(xb.view())?;
                let probs = pass.target_probs(&yb);
                let mut p_conf = Vec::new();
                let mut p_al = Vec::new();
                for (&p, &c) in probs.iter().zip(&flags) {
                    if c { p_conf.push(p) } else { p_al.push(p) }
                }

                let ratio = match cfg.method {
                    TrainMethod::Ga => {
                        let step = compute_ratio(&p_conf, &p_al, cfg.gamma, previous_ratio, cfg.r_max)?;
                        match step.status {
                            RatioStatus::CarriedForward => {
                                log::debug!("iteration {t}: no conflicting sample, reusing r = {}", step.value)
                            }
                            RatioStatus::Clamped => log::debug!("iteration {t}: ratio clamped to {}", step.value),
                            _ => {}
                        }
                        previous_ratio = Some(step.value);
                        step
                    }
                    _ => RatioStep {
                        value: static_aligned_weight,
                        status: RatioStatus::Static,
                    },
                };
                let weights: Vec<f64> = flags
                    .iter()
                    .map(|&c| if c { 1.0 } else { ratio.value })
                    .collect();
                let (grads, loss) = params.gradients(&pass, &yb, &weights, Loss::CrossEntropy)?;
                opt.step(&mut params, &grads);

                trace.records.push(TraceRecord {
                    iteration: t,
                    epoch,
                    aligned_count: p_al.len(),
                    conflicting_count: p_conf.len(),
                    g_aligned: contribution(&p_al),
                    g_conflicting: contribution(&p_conf),
                    ratio: ratio.value,
                    status: ratio.status,
                });
                Ok(loss.mean_loss)
            };
            loss_sum += step().map_err(|e| e.at_iteration(t))?;
        }
        let eval: Evaluation = evaluate(&params, test)?;
        log::info!(
            "epoch {epoch}: unbiased acc {:.4}, train loss {:.5}",
            eval.overall_unbiased_acc,
            loss_sum / per_epoch as f64
        );
        epochs.push(EpochSummary {
            epoch,
            unbiased_test_accuracy: eval.overall_unbiased_acc,
            group_accuracies: eval.group_accuracies(),
            train_loss: loss_sum / per_epoch as f64,
        });
    }

    Ok(TrainOutcome {
        params,
        trace,
        epochs,
    })
}

/// Epoch summaries as JSON lines.
pub fn write_epochs_jsonl(epochs: &[EpochSummary], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in epochs {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_epochs_jsonl(path: &Path) -> Result<Vec<EpochSummary>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(k, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
