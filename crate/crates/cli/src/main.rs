use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradalign::datagen::{generate, load_dataset, save_dataset};
use gradalign::ecs::{assign_pseudo_labels, read_scores_csv, write_scores_csv};
use gradalign::metrics::EvalReport;
use gradalign::nn::{read_checkpoint, write_checkpoint};
use gradalign::pipeline::{
    run_pipeline, run_sweep, score_stage, write_pseudo_labels, ExperimentConfig, SweepParam,
    EPOCHS, MODEL, PSEUDO_LABELS, SCORES, TEST_DATA, TRACE, TRAIN_DATA,
};
use gradalign::trainers::{
    export_trace, read_epochs_jsonl, train, write_epochs_jsonl, LabelSource, TrainMethod,
};
use gradalign::{Error, Result};

/// Bias-conflicting scoring and gradient-alignment training on synthetic
/// shortcut-biased data.
#[derive(Parser, Debug)]
#[command(name = "gradalign", version, after_help = AFTER_HELP)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

const AFTER_HELP: &str = "\
Relative output directories are placed under $GRADALIGN_OUTPUT_ROOT when it is set.
Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O or parse error.";

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a config field by dotted path, e.g. `--set stage2.gamma=1.6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides)?,
            None => ExperimentConfig::from_json("", &self.overrides)?,
        };
        Ok(cfg.seeded())
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the default config as JSON.
    DefaultConfig {
        /// Number of classes; 2 switches to the binary-task defaults.
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Generate the train and unbiased test splits.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory receiving train.dataset and test.dataset.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Score a training set and mine bias-conflicting samples.
    Score {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training split written by gen-data.
        #[arg(long)]
        train: PathBuf,
        /// Directory receiving scores.csv and pseudo_labels.csv.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train the debiased classifier.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Scores from `score`; required when labels are mined.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Directory receiving trace.csv, epochs.jsonl and model.bin.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the unbiased test split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Per-epoch summaries, for the best/last comparison.
        #[arg(long)]
        epochs: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run every stage and write all artifacts plus a manifest.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the pipeline once per value of eta, tau or gamma.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values, at least two.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn output_dir(out: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    match out {
        Some(p) => p,
        None => cfg.resolved_output_dir(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::DefaultConfig { classes } => {
            print!("{}", ExperimentConfig::for_classes(classes).to_json());
            Ok(())
        }
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let dir = output_dir(out, &cfg);
            create_dir(&dir)?;
            let (train_set, test_set) = generate(&cfg.dataset)?;
            save_dataset(&train_set, &dir.join(TRAIN_DATA))?;
            save_dataset(&test_set, &dir.join(TEST_DATA))?;
            println!(
                "wrote {} train / {} test samples to {} (aligned fraction {:.4})",
                train_set.len(),
                test_set.len(),
                dir.display(),
                train_set.aligned_fraction()
            );
            Ok(())
        }
        Command::Score { config, train: train_path, out } => {
            let cfg = config.load()?;
            let train_set = load_dataset(&train_path)?;
            let tau = match cfg.stage2.label_source {
                LabelSource::Pseudo { tau } => tau,
                LabelSource::GroundTruth => 0.8,
            };
            create_dir(&out)?;
            let (scores, flags, report) = score_stage(&train_set, &cfg.scoring, tau)?;
            let truth = train_set.conflicting_flags();
            write_scores_csv(&scores, Some(&truth), &out.join(SCORES))?;
            write_pseudo_labels(&scores.scores, &flags, &truth, &report.labels, &out.join(PSEUDO_LABELS))?;
            write_json(&report, None)
        }
        Command::Train {
            config,
            train: train_path,
            test,
            scores,
            out,
        } => {
            let cfg = config.load()?;
            let train_set = load_dataset(&train_path)?;
            let test_set = load_dataset(&test)?;
            let flags = match (cfg.stage2.method, cfg.stage2.label_source, scores) {
                (TrainMethod::Vanilla, ..) | (_, LabelSource::GroundTruth, _) => train_set.conflicting_flags(),
                (_, LabelSource::Pseudo { tau }, Some(path)) => {
                    let (s, _) = read_scores_csv(&path)?;
                    assign_pseudo_labels(&s, tau)
                }
                (_, LabelSource::Pseudo { .. }, None) => {
                    return Err(Error::Config(
                        "mined labels need --scores (or set stage2.label_source.kind=ground_truth)".into(),
                    ))
                }
            };
            create_dir(&out)?;
            let outcome = train(&train_set, &flags, &test_set, &cfg.stage2)?;
            export_trace(&outcome.trace, &out.join(TRACE))?;
            write_epochs_jsonl(&outcome.epochs, &out.join(EPOCHS))?;
            write_checkpoint(&outcome.params, &out.join(MODEL))?;
            let last = outcome.epochs.last().expect("at least one epoch");
            println!(
                "epoch {}: unbiased accuracy {:.4}; artifacts in {}",
                last.epoch,
                last.unbiased_test_accuracy,
                out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            model,
            test,
            epochs,
            out,
        } => {
            let params = read_checkpoint(&model)?;
            let test_set = load_dataset(&test)?;
            let per_epoch: Vec<f64> = match epochs {
                Some(p) => read_epochs_jsonl(&p)?
                    .into_iter()
                    .map(|e| e.unbiased_test_accuracy)
                    .collect(),
                None => Vec::new(),
            };
            let report = EvalReport::build(&params, &test_set, &per_epoch)?;
            write_json(&report, out.as_deref())
        }
        Command::Run { config } => {
            let cfg = config.load()?;
            let outcome = run_pipeline(&cfg)?;
            let e = &outcome.report.evaluation;
            if let Some(s) = &outcome.report.scoring {
                println!(
                    "scoring {}: AP {}, mined {} (precision {}, recall {})",
                    s.method.name(),
                    fmt_opt(s.average_precision),
                    s.labels.mined,
                    fmt_opt(s.labels.precision),
                    fmt_opt(s.labels.recall)
                );
            }
            println!(
                "unbiased accuracy {:.4} (best {} / last {})",
                e.overall_unbiased_acc,
                fmt_opt(e.best_epoch_acc),
                fmt_opt(e.last_epoch_acc)
            );
            println!("artifacts in {}", outcome.output_dir.display());
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
            jobs,
        } => {
            let cfg = config.load()?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            let rows = pool.install(|| run_sweep(&cfg, param, &values))?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            for r in &rows {
                match &r.result {
                    Ok(rep) => println!(
                        "{} = {}: unbiased accuracy {:.4}",
                        param.name(),
                        r.value,
                        rep.evaluation.overall_unbiased_acc
                    ),
                    Err(e) => println!("{} = {}: failed ({e})", param.name(), r.value),
                }
            }
            if failed > 0 {
                log::warn!("{failed} of {} runs failed", rows.len());
            }
            Ok(())
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}
