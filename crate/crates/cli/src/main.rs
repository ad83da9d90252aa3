//! `kdf`: dataset statistics, teacher training, student distillation,
//! evaluation, compression benchmarks and architecture inspection.

/// `println!` that tolerates a closed stdout (for example `kdf inspect | head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

macro_rules! say_raw {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::UsageError;

#[derive(Parser)]
#[command(
    name = "kdf",
    version,
    about = "Knowledge distillation from the ResEmoteNet teacher into the Student A/B/C family",
    after_help = "Exit codes: 0 success, 2 usage or data error, 3 numeric failure (non-finite loss).\n\
                  KDF_THREADS caps the worker threads used by `sweep --jobs`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by the training commands. Flags override
/// `--set`, which overrides the `--config` file, which overrides defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// Flat `key = value` configuration file (see `kdf config` for every key).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Architecture preset: resemotenet, student_a, student_b or student_c. The channel schedules are the published teacher/student comparison; default resemotenet.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Dataset: a FER2013-format CSV (emotion,pixels,Usage) or an image-folder root.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Dataset format: csv or folder. Default csv.
    #[arg(long, value_parser = ["csv", "folder"])]
    pub format: Option<String>,
    /// Mini-batch size. Default 16, the published training regimen.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Number of epochs, always run to completion. Default 80, the published training regimen.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial SGD learning rate. Default 1e-3, the published training regimen.
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum. Default 0.9; unpublished, the conventional companion to SGD.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Learning-rate decay factor on a plateau. Default 0.1, the published training regimen.
    #[arg(long)]
    pub plateau_factor: Option<f64>,
    /// Epochs without improvement before decaying. Default 5; unpublished.
    #[arg(long)]
    pub plateau_patience: Option<usize>,
    /// Seed for weights, shuffling, flips and dropout. Default 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Horizontal-flip probability for training batches. Default 0.5; the published regimen names the flip, not its probability.
    #[arg(long)]
    pub flip_prob: Option<f64>,
    /// Softmax temperature T for soft targets. Default 3, the best published setting (published sweep: 1 to 5).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Weight on the T²-scaled KL term. Default 0.2, the best published setting (published sweep: 0.10, 0.15, 0.20).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight on the hard-label cross-entropy. Default 1 - alpha.
    #[arg(long)]
    pub hard_weight: Option<f64>,
    /// Fixed reduction order and serial batches, for bit-identical reruns. Default true.
    #[arg(long)]
    pub deterministic: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-split, per-class sample counts in the shape of the published class-distribution table.
    Stats {
        /// FER2013-format CSV or image-folder root.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// csv or folder. Default csv.
        #[arg(long, default_value = "csv", value_parser = ["csv", "folder"])]
        format: String,
        /// Also write stats.json and stats.csv here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Train a model on hard labels with class-weighted cross-entropy.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory for report.json, report.csv, model.ckpt and manifest.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Distill a student from a frozen teacher checkpoint.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// Teacher checkpoint; it is only ever evaluated. May also come from the `teacher` config key.
        #[arg(long, value_name = "CKPT")]
        teacher: Option<PathBuf>,
        /// Output directory for report.json, report.csv, model.ckpt and manifest.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Accuracy, per-class one-vs-rest accuracy and confusion matrix of a checkpoint.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// FER2013-format CSV or image-folder root.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// csv or folder. Default csv.
        #[arg(long, default_value = "csv", value_parser = ["csv", "folder"])]
        format: String,
        /// Split to evaluate (Training, PublicTest, PrivateTest, Test). Default: every non-training split, each reported separately.
        #[arg(long)]
        split: Option<String>,
        /// Write report.json and confusion CSVs here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Size, memory and batch-1 latency of several models, compared against the first.
    Bench {
        /// Preset name or checkpoint path; repeatable. Default: resemotenet, student_a, student_b.
        #[arg(long = "model", value_name = "PRESET|CKPT")]
        models: Vec<String>,
        /// Warm-up forwards excluded from the statistics. Default 20.
        #[arg(long, default_value_t = kdf_core::metrics::DEFAULT_WARMUP)]
        warmup: usize,
        /// Measured forwards. Default 100.
        #[arg(long, default_value_t = kdf_core::metrics::DEFAULT_RUNS)]
        runs: usize,
        /// Skip runtime measurements (latency and peak resident memory); the remaining output is deterministic.
        #[arg(long)]
        no_latency: bool,
        /// Evaluate accuracy on this dataset's non-training splits.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// csv or folder. Default csv.
        #[arg(long, default_value = "csv", value_parser = ["csv", "folder"])]
        format: String,
        /// Write report.json and report.csv here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Per-layer output shapes and parameter counts, checked against the reference totals.
    Inspect {
        /// Configuration file.
        #[arg(long, value_name = "FILE", conflicts_with_all = ["preset", "checkpoint"])]
        config: Option<PathBuf>,
        /// Preset name. Default resemotenet.
        #[arg(long, conflicts_with = "checkpoint")]
        preset: Option<String>,
        /// Inspect a saved checkpoint instead.
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Print JSON.
        #[arg(long)]
        json: bool,
    },
    /// Distill one student per (temperature, alpha) grid point, serially by default.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Teacher checkpoint.
        #[arg(long, value_name = "CKPT")]
        teacher: Option<PathBuf>,
        /// Temperatures. Default 1,2,3,4,5, the published sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0, 4.0, 5.0])]
        temperatures: Vec<f64>,
        /// Alphas. Default 0.10,0.15,0.20, the published sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [0.10, 0.15, 0.20])]
        alphas: Vec<f64>,
        /// Grid points run concurrently, capped by KDF_THREADS. Default 1.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory for report.json, report.csv and manifest.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write a small synthetic dataset.
    Fixture {
        /// csv (FER2013 format) or folder (train/test/<emotion>/*.png).
        #[arg(long, default_value = "csv", value_parser = ["csv", "folder"])]
        kind: String,
        /// Samples per class in the training split.
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        /// Samples per class in each evaluation split.
        #[arg(long, default_value_t = 2)]
        eval_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path or folder root.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Print the fully resolved configuration.
    Config {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Re-run a train or distill job from its manifest.json.
    Replay {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Stats {
            data,
            format,
            out,
            json,
        } => commands::stats(&data, &format, out.as_deref(), json),
        Command::Train { run, out } => commands::train(&run, &out),
        Command::Distill { run, teacher, out } => commands::distill(&run, teacher, &out),
        Command::Eval {
            checkpoint,
            data,
            format,
            split,
            out,
        } => commands::eval(
            &checkpoint,
            &data,
            &format,
            split.as_deref(),
            out.as_deref(),
        ),
        Command::Bench {
            models,
            warmup,
            runs,
            no_latency,
            data,
            format,
            out,
        } => commands::bench(
            &models,
            (!no_latency).then_some((warmup, runs)),
            data.as_deref(),
            &format,
            out.as_deref(),
        ),
        Command::Inspect {
            config,
            preset,
            checkpoint,
            json,
        } => commands::inspect(
            config.as_deref(),
            preset.as_deref(),
            checkpoint.as_deref(),
            json,
        ),
        Command::Sweep {
            run,
            teacher,
            temperatures,
            alphas,
            jobs,
            out,
        } => {
            let teacher =
                teacher.ok_or_else(|| UsageError::new("sweep requires --teacher <CKPT>"))?;
            commands::sweep(&run, &teacher, &temperatures, &alphas, jobs, &out)
        }
        Command::Fixture {
            kind,
            per_class,
            eval_per_class,
            seed,
            out,
        } => commands::fixture(&kind, per_class, eval_per_class, seed, &out),
        Command::Config { run } => {
            say_raw!("{}", commands::resolve(&run)?.to_text());
            Ok(())
        }
        Command::Replay { manifest, out } => commands::replay(&manifest, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| {
                c.downcast_ref::<kdf_core::Error>()
                    .is_some_and(kdf_core::Error::is_numeric)
            });
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}
