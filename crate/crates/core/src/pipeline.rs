//! End-to-end runs: one JSON config in, a directory of artifacts out.
//!
//! A run writes, in order, the two dataset files, the stage-one scores and
//! mined labels (unless scoring is skipped), the training trace, per-epoch
//! summaries, the final checkpoint and the evaluation report. `manifest.json`
//! is rewritten after every stage with the stage states and a SHA-256 of each
//! artifact, so a failed run leaves a record of how far it got.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datagen::{generate, save_dataset, BiasedDatasetSpec, Dataset};
use crate::ecs::{
    assign_pseudo_labels, average_precision, label_quality, score, write_scores_csv, BcScores,
    LabelQuality, ScoringConfig, ScoringMethod,
};
use crate::metrics::EvalReport;
use crate::nn::write_checkpoint;
use crate::trainers::{
    export_trace, train, write_epochs_jsonl, LabelSource, StageTwoConfig, TrainMethod,
};
use crate::{Error, Result};

/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "GRADALIGN_OUTPUT_ROOT";

pub const TRAIN_DATA: &str = "train.dataset";
pub const TEST_DATA: &str = "test.dataset";
pub const SCORES: &str = "scores.csv";
pub const PSEUDO_LABELS: &str = "pseudo_labels.csv";
pub const TRACE: &str = "trace.csv";
pub const EPOCHS: &str = "epochs.jsonl";
pub const MODEL: &str = "model.bin";
pub const REPORT: &str = "report.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: BiasedDatasetSpec,
    pub scoring: ScoringConfig,
    pub stage2: StageTwoConfig,
    pub output_dir: PathBuf,
    /// Added to every seed in the config, so one number moves a whole run.
    pub global_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_classes(10)
    }
}

impl ExperimentConfig {
    /// Defaults for a `num_classes`-way task.
    ///
    /// Binary tasks use a stricter confidence threshold, no extra tilt
    /// towards conflicting samples, and a noisier, smaller intrinsic block:
    /// two well-separated prototypes are otherwise learned about as fast as
    /// the shortcut.
    pub fn for_classes(num_classes: usize) -> Self {
        let mut cfg = Self {
            dataset: BiasedDatasetSpec {
                num_classes,
                ..Default::default()
            },
            scoring: ScoringConfig::default(),
            stage2: StageTwoConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            global_seed: 0,
        };
        if num_classes == 2 {
            cfg.scoring.eta = 0.9;
            cfg.stage2.gamma = 1.0;
            cfg.dataset.intrinsic_dim = 10;
            cfg.dataset.sigma_intrinsic = 0.7;
        }
        cfg
    }

    /// Parse a JSON document, then apply `key.path=value` overrides.
    ///
    /// Fields missing from the document take the defaults of
    /// [`ExperimentConfig::for_classes`] for the configured class count.
    /// Override values are read as JSON, falling back to a bare string.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let classes = user
            .pointer("/dataset/num_classes")
            .and_then(Value::as_u64)
            .unwrap_or(10) as usize;
        let mut merged = serde_json::to_value(Self::for_classes(classes))?;
        merge(&mut merged, user);
        let cfg: Self =
            serde_json::from_value(merged).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.scoring.validate()?;
        self.stage2.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir must not be empty"));
        }
        Ok(())
    }

    /// The config with `global_seed` folded into every seed.
    pub fn seeded(&self) -> Self {
        let g = self.global_seed;
        let mut c = self.clone();
        c.dataset.seed = c.dataset.seed.wrapping_add(g);
        c.scoring.seeds = c.scoring.seeds.map(|s| s.wrapping_add(g));
        c.scoring.shuffle_seed = c.scoring.shuffle_seed.wrapping_add(g);
        c.stage2.seed = c.stage2.seed.wrapping_add(g);
        c.global_seed = 0;
        c
    }

    /// Output directory after applying [`OUTPUT_ROOT_ENV`].
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Whether stage two needs mined labels at all.
    pub fn needs_scoring(&self) -> bool {
        self.stage2.method != TrainMethod::Vanilla
            && matches!(self.stage2.label_source, LabelSource::Pseudo { .. })
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::config(format!("bad override path {path:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            return Err(Error::config(format!("override {path:?} descends into a non-object")));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(map) => {
            map.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::config(format!("override {path:?} descends into a non-object"))),
    }
}

/// Recursive object merge. A user object carrying a `kind` tag replaces the
/// default wholesale, since fields of another variant must not leak in.
fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Pending,
    Complete,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub state: StageState,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<ArtifactRecord>,
}

pub const STAGES: [&str; 4] = ["data", "scoring", "training", "evaluation"];

impl Manifest {
    fn new(config: ExperimentConfig) -> Self {
        Self {
            config,
            stages: STAGES
                .iter()
                .map(|s| StageRecord {
                    name: s.to_string(),
                    state: StageState::Pending,
                    note: None,
                })
                .collect(),
            artifacts: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    fn set(&mut self, name: &str, state: StageState, note: Option<String>) {
        let rec = self
            .stages
            .iter_mut()
            .find(|s| s.name == name)
            .expect("known stage");
        rec.state = state;
        rec.note = note;
    }

    fn record(&mut self, dir: &Path, file: &str) -> Result<()> {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.artifacts.retain(|a| a.file != file);
        self.artifacts.push(ArtifactRecord {
            file: file.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        write!(out, "{b:02x}").expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringReport {
    pub method: ScoringMethod,
    pub average_precision: Option<f64>,
    pub num_ensembled: usize,
    pub labels: LabelQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub method: TrainMethod,
    pub gamma: f64,
    pub label_source: LabelSource,
    pub flagged_conflicting: usize,
    pub iterations: usize,
    /// Share of iterations whose ratio was carried forward or clamped.
    pub degenerate_ratio_fraction: f64,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scoring: Option<ScoringReport>,
    pub training: TrainingReport,
    pub evaluation: EvalReport,
}

impl RunReport {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

const PSEUDO_MAGIC: &str = "#gradalign-pseudo-labels v1 ";
const PSEUDO_HEADER: &str = "index,score,pseudo_conflicting,true_conflicting";

/// Mined labels with their agreement summary on the first line.
pub fn write_pseudo_labels(
    scores: &[f64],
    flags: &[bool],
    truth: &[bool],
    quality: &LabelQuality,
    path: &Path,
) -> Result<()> {
    if scores.len() != flags.len() || flags.len() != truth.len() {
        return Err(Error::shape("scores, flags and truth differ in length"));
    }
    let mut out = format!("{PSEUDO_MAGIC}{}\n{PSEUDO_HEADER}\n", serde_json::to_string(quality)?);
    for (i, ((s, f), t)) in scores.iter().zip(flags).zip(truth).enumerate() {
        writeln!(out, "{i},{s},{},{}", *f as u8, *t as u8).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub quality: LabelQuality,
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    pub truth: Vec<bool>,
}

pub fn read_pseudo_labels(path: &Path) -> Result<PseudoLabels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let quality = match lines.next().and_then(|l| l.strip_prefix(PSEUDO_MAGIC)) {
        Some(json) => serde_json::from_str(json).map_err(|e| err(1, e.to_string()))?,
        None => {
            return Err(Error::Version {
                path: path.to_path_buf(),
                message: "missing pseudo-label header".into(),
            })
        }
    };
    if lines.next() != Some(PSEUDO_HEADER) {
        return Err(err(2, "unexpected column header".into()));
    }
    let bit = |s: &str, n: usize| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(err(n, format!("expected 0 or 1, found {s:?}"))),
    };
    let mut out = PseudoLabels {
        quality,
        scores: Vec::new(),
        flags: Vec::new(),
        truth: Vec::new(),
    };
    for (k, line) in lines.enumerate() {
        let n = k + 3;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 || f[0].parse::<usize>().ok() != Some(k) {
            return Err(err(n, format!("malformed row {line:?}")));
        }
        out.scores
            .push(f[1].parse().map_err(|_| err(n, format!("bad score {:?}", f[1])))?);
        out.flags.push(bit(f[2], n)?);
        out.truth.push(bit(f[3], n)?);
    }
    Ok(out)
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub report: RunReport,
    pub manifest: Manifest,
}

/// Stage one on an existing training set: scores plus mined flags.
pub fn score_stage(train_set: &Dataset, scoring: &ScoringConfig, tau: f64) -> Result<(BcScores, Vec<bool>, ScoringReport)> {
    let scores = score(train_set, scoring)?;
    let truth = train_set.conflicting_flags();
    let ap = match average_precision(&scores.scores, &truth) {
        Ok(ap) => Some(ap),
        Err(Error::UndefinedMetric(m)) => {
            log::warn!("average precision undefined: {m}");
            None
        }
        Err(e) => return Err(e),
    };
    let flags = assign_pseudo_labels(&scores.scores, tau);
    let labels = label_quality(&flags, &truth, tau)?;
    let report = ScoringReport {
        method: scoring.method,
        average_precision: ap,
        num_ensembled: scores.num_ensembled,
        labels,
    };
    Ok((scores, flags, report))
}

/// Run every stage of `cfg`, writing artifacts into its output directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let cfg = cfg.seeded();
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    // Stale artifacts from an earlier, different run must not survive.
    for f in [SCORES, PSEUDO_LABELS, TRACE, EPOCHS, MODEL, REPORT] {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let mut manifest = Manifest::new(cfg.clone());
    manifest.write(&dir)?;

    let result = run_stages(&cfg, &dir, &mut manifest);
    if let Err(e) = &result {
        if let Some(stage) = manifest.stages.iter().find(|s| s.state == StageState::Pending) {
            let name = stage.name.clone();
            manifest.set(&name, StageState::Failed, Some(e.to_string()));
        }
        manifest.write(&dir)?;
    }
    let report = result?;
    Ok(RunOutcome {
        output_dir: dir,
        report,
        manifest,
    })
}

fn run_stages(cfg: &ExperimentConfig, dir: &Path, manifest: &mut Manifest) -> Result<RunReport> {
    log::info!("generating data into {}", dir.display());
    let (train_set, test_set) = generate(&cfg.dataset)?;
    save_dataset(&train_set, &dir.join(TRAIN_DATA))?;
    save_dataset(&test_set, &dir.join(TEST_DATA))?;
    manifest.record(dir, TRAIN_DATA)?;
    manifest.record(dir, TEST_DATA)?;
    manifest.set("data", StageState::Complete, None);
    manifest.write(dir)?;

    let truth = train_set.conflicting_flags();
    let (flags, scoring_report) = if cfg.needs_scoring() {
        let LabelSource::Pseudo { tau } = cfg.stage2.label_source else {
            unreachable!("needs_scoring implies pseudo labels")
        };
        log::info!("scoring with {}", cfg.scoring.method.name());
        let (scores, flags, report) = score_stage(&train_set, &cfg.scoring, tau)?;
        write_scores_csv(&scores, Some(&truth), &dir.join(SCORES))?;
        write_pseudo_labels(&scores.scores, &flags, &truth, &report.labels, &dir.join(PSEUDO_LABELS))?;
        manifest.record(dir, SCORES)?;
        manifest.record(dir, PSEUDO_LABELS)?;
        manifest.set("scoring", StageState::Complete, None);
        (flags, Some(report))
    } else {
        let note = if cfg.stage2.method == TrainMethod::Vanilla {
            "vanilla training uses no bias-conflicting labels"
        } else {
            "ground-truth labels requested"
        };
        manifest.set("scoring", StageState::Skipped, Some(note.into()));
        (truth, None)
    };
    manifest.write(dir)?;

    log::info!("training {:?}", cfg.stage2.method);
    let outcome = train(&train_set, &flags, &test_set, &cfg.stage2)?;
    export_trace(&outcome.trace, &dir.join(TRACE))?;
    write_epochs_jsonl(&outcome.epochs, &dir.join(EPOCHS))?;
    write_checkpoint(&outcome.params, &dir.join(MODEL))?;
    for f in [TRACE, EPOCHS, MODEL] {
        manifest.record(dir, f)?;
    }
    manifest.set("training", StageState::Complete, None);
    manifest.write(dir)?;

    let evaluation = EvalReport::build(&outcome.params, &test_set, &outcome.per_epoch_accuracy())?;
    let report = RunReport {
        scoring: scoring_report,
        training: TrainingReport {
            method: cfg.stage2.method,
            gamma: cfg.stage2.gamma,
            label_source: cfg.stage2.label_source,
            flagged_conflicting: flags.iter().filter(|&&f| f).count(),
            iterations: outcome.trace.len(),
            degenerate_ratio_fraction: outcome.trace.degenerate_fraction(),
        },
        evaluation,
    };
    let path = dir.join(REPORT);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    manifest.record(dir, REPORT)?;
    manifest.set("evaluation", StageState::Complete, None);
    manifest.write(dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Eta,
    Tau,
    Gamma,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Eta => "eta",
            SweepParam::Tau => "tau",
            SweepParam::Gamma => "gamma",
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::Eta => cfg.scoring.eta = value,
            SweepParam::Gamma => cfg.stage2.gamma = value,
            SweepParam::Tau => match &mut cfg.stage2.label_source {
                LabelSource::Pseudo { tau } => *tau = value,
                LabelSource::GroundTruth => {
                    return Err(Error::config("a tau sweep needs pseudo labels"))
                }
            },
        }
        Ok(())
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta" => Ok(SweepParam::Eta),
            "tau" => Ok(SweepParam::Tau),
            "gamma" => Ok(SweepParam::Gamma),
            _ => Err(Error::config(format!("unknown sweep parameter {s:?}; expected eta, tau or gamma"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub output_dir: PathBuf,
    /// The run's report, or the error that stopped it.
    pub result: std::result::Result<RunReport, String>,
}

const SWEEP_HEADER: &str =
    "value,status,average_precision,precision,recall,unbiased_acc,best_epoch_acc,last_epoch_acc";

/// One pipeline per value, each in `<output_dir>/<param>_<value>`. Seeds are
/// shared by every run. A failed run is reported in its row and the sweep
/// carries on. Writes `sweep_<param>.csv` into the base output directory.
pub fn run_sweep(base: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::config("a sweep needs at least two values"));
    }
    base.validate()?;
    let root = base.resolved_output_dir();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut jobs = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, v)?;
        cfg.output_dir = root.join(format!("{}_{v}", param.name()));
        jobs.push((v, cfg));
    }
    let rows: Vec<SweepRow> = jobs
        .into_par_iter()
        .map(|(value, cfg)| {
            let result = run_pipeline(&cfg).map(|o| o.report).map_err(|e| {
                log::error!("{} = {value} failed: {e}", param.name());
                e.to_string()
            });
            SweepRow {
                value,
                output_dir: cfg.output_dir,
                result,
            }
        })
        .collect();

    let path = root.join(format!("sweep_{}.csv", param.name()));
    fs::write(&path, sweep_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{SWEEP_HEADER}\n");
    for row in rows {
        match &row.result {
            Ok(r) => {
                let s = r.scoring.as_ref();
                writeln!(
                    out,
                    "{},ok,{},{},{},{},{},{}",
                    row.value,
                    opt(s.and_then(|s| s.average_precision)),
                    opt(s.and_then(|s| s.labels.precision)),
                    opt(s.and_then(|s| s.labels.recall)),
                    r.evaluation.overall_unbiased_acc,
                    opt(r.evaluation.best_epoch_acc),
                    opt(r.evaluation.last_epoch_acc),
                )
            }
            Err(_) => writeln!(out, "{},failed,,,,,,", row.value),
        }
        .expect("string write");
    }
    out
}
