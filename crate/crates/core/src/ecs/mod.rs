//! Stage one: bias-conflicting scores.
//!
//! Two auxiliary models with the same architecture and different seeds are
//! trained on the samples both are confident about (`p(y|x) > eta`), while a
//! model that is confident on a sample its peer is not gets a gradient-ascent
//! term to forget it. Every `ensemble_period` iterations the averaged peer
//! probabilities on the full training set are folded into the score
//! `s = mean_checkpoints [1 - (p_dot + p_ddot) / 2]`.
//!
//! The baselines (vanilla model, early stopping, generalized CE with and
//! without the epoch ensemble, and confident-picking without a peer) share
//! the single-model loop in [`baseline_score`].

mod partition;
mod ranking;

pub use partition::{partition_batch, BatchPartition};
pub use ranking::{assign_pseudo_labels, average_precision, label_quality, LabelQuality};

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::nn::{Loss, ModelParams, Optimizer, OptimizerKind};
use crate::sampler::BatchSampler;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMethod {
    /// Peer-picking, confident-picking and epoch ensemble.
    Ecs,
    /// Confident-picking and epoch ensemble on a single model.
    EcsNoPeer,
    /// Vanilla model scored once after training.
    Vm,
    /// Vanilla model scored once after `es_stop_epoch` epochs.
    Es,
    /// Generalized-CE model scored once after training.
    Gce,
    /// Generalized-CE model with epoch ensemble.
    GceEe,
}

impl ScoringMethod {
    pub const ALL: [ScoringMethod; 6] = [
        ScoringMethod::Ecs,
        ScoringMethod::EcsNoPeer,
        ScoringMethod::Vm,
        ScoringMethod::Es,
        ScoringMethod::Gce,
        ScoringMethod::GceEe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScoringMethod::Ecs => "ecs",
            ScoringMethod::EcsNoPeer => "ecs_no_peer",
            ScoringMethod::Vm => "vm",
            ScoringMethod::Es => "es",
            ScoringMethod::Gce => "gce",
            ScoringMethod::GceEe => "gce_ee",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub method: ScoringMethod,
    /// Confidence threshold: confident means `p(y|x) > eta`.
    pub eta: f64,
    /// Training length in passes over the data, used when `iterations` is unset.
    pub epochs: usize,
    pub iterations: Option<usize>,
    /// Checkpoint spacing of the ensemble; defaults to one pass, `⌊N/B⌋`.
    pub ensemble_period: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub gce_q: f64,
    pub es_stop_epoch: usize,
    /// Leading iterations in which confident-picking models train on every
    /// sample; defaults to one pass. Without it a freshly initialised C-way
    /// model sits near `1/C` and nothing clears `eta`.
    pub warmup_iterations: Option<usize>,
    /// Initialization seeds of the two peer models.
    pub seeds: [u64; 2],
    pub shuffle_seed: u64,
    pub hidden_layers: Vec<usize>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            method: ScoringMethod::Ecs,
            eta: 0.5,
            epochs: 100,
            iterations: None,
            ensemble_period: None,
            batch_size: 256,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            gce_q: 0.7,
            es_stop_epoch: 1,
            warmup_iterations: None,
            seeds: [1, 2],
            shuffle_seed: 3,
            hidden_layers: vec![100, 100, 100],
        }
    }
}

/// Iteration counts resolved against a dataset size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub iterations: usize,
    pub ensemble_period: usize,
    pub batches_per_epoch: usize,
    pub warmup: usize,
}

impl Schedule {
    /// Completed ensemble periods; a ragged tail is not ensembled.
    pub fn checkpoints(&self) -> usize {
        self.iterations / self.ensemble_period
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::config(format!("eta must lie in (0,1), got {}", self.eta)));
        }
        if !(self.gce_q > 0.0 && self.gce_q <= 1.0) {
            return Err(Error::config(format!("gce_q must lie in (0,1], got {}", self.gce_q)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.method == ScoringMethod::Ecs && self.seeds[0] == self.seeds[1] {
            log::warn!("peer models share seed {}; they will evolve identically", self.seeds[0]);
        }
        self.optimizer.validate()
    }

    pub fn schedule(&self, n: usize) -> Result<Schedule> {
        self.validate()?;
        if self.batch_size > n {
            return Err(Error::config(format!(
                "batch_size {} exceeds dataset size {n}",
                self.batch_size
            )));
        }
        let per_epoch = n / self.batch_size;
        let iterations = match self.method {
            ScoringMethod::Es => self.es_stop_epoch * per_epoch,
            _ => self.iterations.unwrap_or(self.epochs * per_epoch),
        };
        let period = self.ensemble_period.unwrap_or(per_epoch);
        if iterations == 0 {
            return Err(Error::config("scoring needs at least one iteration"));
        }
        if period == 0 || period > iterations {
            return Err(Error::config(format!(
                "ensemble period {period} must lie in 1..={iterations}"
            )));
        }
        if iterations % period != 0 {
            log::warn!(
                "{iterations} iterations is not a multiple of the ensemble period {period}; \
                 the last {} iterations are not ensembled",
                iterations % period
            );
        }
        Ok(Schedule {
            iterations,
            ensemble_period: period,
            batches_per_epoch: per_epoch,
            warmup: self.warmup_iterations.unwrap_or(per_epoch),
        })
    }

    fn layer_sizes(&self, ds: &Dataset) -> Vec<usize> {
        std::iter::once(ds.feature_dim())
            .chain(self.hidden_layers.iter().copied())
            .chain(std::iter::once(ds.num_classes()))
            .collect()
    }
}

/// Per-sample bias-conflicting scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BcScores {
    pub scores: Vec<f64>,
    pub num_ensembled: usize,
}

/// The two auxiliary biased models.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerPair {
    pub f_dot: ModelParams,
    pub f_ddot: ModelParams,
}

/// Epoch-ensemble accumulator: `s += w · (1 - p̄)` per checkpoint with
/// `w = T'/T`, or `1/k` for `k` completed periods when `T'` does not divide `T`.
#[derive(Debug, Clone)]
pub struct ScoreAccumulator {
    sums: Vec<f64>,
    weight: f64,
    count: usize,
}

impl ScoreAccumulator {
    pub fn new(n: usize, schedule: &Schedule) -> Self {
        let weight = if schedule.iterations % schedule.ensemble_period == 0 {
            schedule.ensemble_period as f64 / schedule.iterations as f64
        } else {
            1.0 / schedule.checkpoints() as f64
        };
        Self {
            sums: vec![0.0; n],
            weight,
            count: 0,
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Fold in one checkpoint given the model-averaged target probabilities.
    pub fn accumulate(&mut self, avg_target_probs: &[f64]) {
        for (s, p) in self.sums.iter_mut().zip(avg_target_probs) {
            *s += self.weight * (1.0 - p);
        }
        self.count += 1;
    }

    pub fn finish(self) -> BcScores {
        BcScores {
            scores: self.sums.into_iter().map(|s| s.clamp(0.0, 1.0)).collect(),
            num_ensembled: self.count,
        }
    }
}

/// Cached training data shared by every scoring loop.
struct TrainView {
    x: Array2<f64>,
    y: Vec<usize>,
}

impl TrainView {
    fn new(ds: &Dataset) -> Self {
        Self {
            x: ds.features(),
            y: ds.targets(),
        }
    }

    fn batch(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (self.x.select(Axis(0), idx), idx.iter().map(|&i| self.y[i]).collect())
    }

    fn target_probs(&self, model: &ModelParams) -> Result<Vec<f64>> {
        model.target_probs(self.x.view(), &self.y)
    }
}

struct Learner {
    model: ModelParams,
    opt: Optimizer,
}

impl Learner {
    fn new(sizes: &[usize], seed: u64, cfg: &ScoringConfig) -> Result<Self> {
        let model = ModelParams::init(sizes, seed)?;
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, &model)?;
        Ok(Self { model, opt })
    }
}

/// Stage-one scoring with peer models ([`ScoringMethod::Ecs`]) or the
/// single-model confident-picking ablation ([`ScoringMethod::EcsNoPeer`]).
pub fn ecs_score(train: &Dataset, cfg: &ScoringConfig) -> Result<(BcScores, PeerPair)> {
    match cfg.method {
        ScoringMethod::Ecs => peer_loop(train, cfg),
        ScoringMethod::EcsNoPeer => {
            let (scores, model) = single_loop(train, cfg)?;
            Ok((
                scores,
                PeerPair {
                    f_dot: model.clone(),
                    f_ddot: model,
                },
            ))
        }
        other => Err(Error::config(format!(
            "ecs_score handles ecs and ecs_no_peer, got {}",
            other.name()
        ))),
    }
}

/// Baseline scorers: vanilla, early-stopped, generalized CE, generalized CE with ensemble.
pub fn baseline_score(train: &Dataset, cfg: &ScoringConfig) -> Result<BcScores> {
    match cfg.method {
        ScoringMethod::Vm | ScoringMethod::Es | ScoringMethod::Gce | ScoringMethod::GceEe => {
            Ok(single_loop(train, cfg)?.0)
        }
        other => Err(Error::config(format!(
            "baseline_score handles vm, es, gce and gce_ee, got {}",
            other.name()
        ))),
    }
}

/// Dispatch on `cfg.method`.
pub fn score(train: &Dataset, cfg: &ScoringConfig) -> Result<BcScores> {
    match cfg.method {
        ScoringMethod::Ecs | ScoringMethod::EcsNoPeer => Ok(ecs_score(train, cfg)?.0),
        _ => baseline_score(train, cfg),
    }
}

fn peer_loop(train: &Dataset, cfg: &ScoringConfig) -> Result<(BcScores, PeerPair)> {
    let schedule = cfg.schedule(train.len())?;
    let view = TrainView::new(train);
    let sizes = cfg.layer_sizes(train);
    let mut dot = Learner::new(&sizes, cfg.seeds[0], cfg)?;
    let mut ddot = Learner::new(&sizes, cfg.seeds[1], cfg)?;
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.shuffle_seed);
    let mut acc = ScoreAccumulator::new(train.len(), &schedule);

    for t in 0..schedule.iterations {
        let (x, y) = view.batch(sampler.next_batch());
        let mut step = || -> Result<()> {
            let pass_dot = dot.model.forward(x.view())?;
            let pass_ddot = ddot.model.forward(x.view())?;
            let part = partition_batch(&pass_dot.target_probs(&y), &pass_ddot.target_probs(&y), cfg.eta)?;
            let (w_dot, w_ddot) = if t < schedule.warmup {
                (vec![1.0; y.len()], vec![1.0; y.len()])
            } else {
                part.peer_weights()
            };
            let (g_dot, _) = dot.model.gradients(&pass_dot, &y, &w_dot, Loss::CrossEntropy)?;
            let (g_ddot, _) = ddot.model.gradients(&pass_ddot, &y, &w_ddot, Loss::CrossEntropy)?;
            dot.opt.step(&mut dot.model, &g_dot);
            ddot.opt.step(&mut ddot.model, &g_ddot);
            log::trace!(
                "iter {t}: both {} neither {} dot-only {} ddot-only {}",
                part.both.len(),
                part.neither.len(),
                part.dot_only.len(),
                part.ddot_only.len()
            );
            Ok(())
        };
        step().map_err(|e| e.at_iteration(t))?;

        if (t + 1) % schedule.ensemble_period == 0 {
            let checkpoint = || -> Result<Vec<f64>> {
                let a = view.target_probs(&dot.model)?;
                let b = view.target_probs(&ddot.model)?;
                Ok(a.iter().zip(&b).map(|(p, q)| (p + q) / 2.0).collect())
            };
            let pbar = checkpoint().map_err(|e| e.at_iteration(t))?;
            acc.accumulate(&pbar);
        }
    }
    Ok((
        acc.finish(),
        PeerPair {
            f_dot: dot.model,
            f_ddot: ddot.model,
        },
    ))
}

fn single_loop(train: &Dataset, cfg: &ScoringConfig) -> Result<(BcScores, ModelParams)> {
    let schedule = cfg.schedule(train.len())?;
    let view = TrainView::new(train);
    let mut learner = Learner::new(&cfg.layer_sizes(train), cfg.seeds[0], cfg)?;
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.shuffle_seed);
    let loss = match cfg.method {
        ScoringMethod::Gce | ScoringMethod::GceEe => Loss::Generalized { q: cfg.gce_q },
        _ => Loss::CrossEntropy,
    };
    let confident_only = cfg.method == ScoringMethod::EcsNoPeer;
    let ensemble = matches!(cfg.method, ScoringMethod::EcsNoPeer | ScoringMethod::GceEe);

    let mut acc = ScoreAccumulator::new(train.len(), &schedule);
    for t in 0..schedule.iterations {
        let (x, y) = view.batch(sampler.next_batch());
        let mut step = || -> Result<()> {
            let pass = learner.model.forward(x.view())?;
            let weights: Vec<f64> = if confident_only && t >= schedule.warmup {
                pass.target_probs(&y)
                    .into_iter()
                    .map(|p| if p > cfg.eta { 1.0 } else { 0.0 })
                    .collect()
            } else {
                vec![1.0; y.len()]
            };
            let (grads, _) = learner.model.gradients(&pass, &y, &weights, loss)?;
            learner.opt.step(&mut learner.model, &grads);
            Ok(())
        };
        step().map_err(|e| e.at_iteration(t))?;

        if ensemble && (t + 1) % schedule.ensemble_period == 0 {
            let p = view.target_probs(&learner.model).map_err(|e| e.at_iteration(t))?;
            acc.accumulate(&p);
        }
    }

    let scores = if ensemble {
        acc.finish()
    } else {
        let p = view
            .target_probs(&learner.model)
            .map_err(|e| e.at_iteration(schedule.iterations))?;
        BcScores {
            scores: p.into_iter().map(|p| (1.0 - p).clamp(0.0, 1.0)).collect(),
            num_ensembled: 1,
        }
    };
    Ok((scores, learner.model))
}

/// Single-checkpoint scores `1 - p(y|x)` of a fixed model.
pub fn score_with_model(model: &ModelParams, ds: &Dataset) -> Result<BcScores> {
    let p = TrainView::new(ds).target_probs(model)?;
    Ok(BcScores {
        scores: p.into_iter().map(|p| (1.0 - p).clamp(0.0, 1.0)).collect(),
        num_ensembled: 1,
    })
}

/// `index,score,conflicting` rows; the last column is empty when unknown.
pub fn write_scores_csv(scores: &BcScores, truth: Option<&[bool]>, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("index,score,conflicting\n");
    for (i, s) in scores.scores.iter().enumerate() {
        let flag = match truth.map(|t| t[i]) {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        writeln!(out, "{i},{s},{flag}").expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Scores and (when present) ground-truth flags from a score CSV.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<f64>, Option<Vec<bool>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some("index,score,conflicting") {
        return Err(Error::Version {
            path: path.to_path_buf(),
            message: "missing score CSV header".into(),
        });
    }
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let mut parts = line.split(',');
        let (Some(idx), Some(score), Some(flag), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(err(line_no, "expected 3 fields".into()));
        };
        if idx.parse::<usize>().ok() != Some(k) {
            return Err(err(line_no, format!("expected index {k}, found {idx:?}")));
        }
        let s: f64 = score
            .parse()
            .ok()
            .filter(|s: &f64| (0.0..=1.0).contains(s))
            .ok_or_else(|| err(line_no, format!("bad score {score:?}")))?;
        scores.push(s);
        truth.push(match flag {
            "1" => Some(true),
            "0" => Some(false),
            "" => None,
            other => return Err(err(line_no, format!("bad flag {other:?}"))),
        });
    }
    let truth = truth.iter().all(Option::is_some).then(|| truth.into_iter().flatten().collect());
    Ok((scores, truth))
}
