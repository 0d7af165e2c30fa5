//! `sbcit`: train, evaluate and inspect CE-RS-SBCIT classifiers.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "sbcit", version, about = "Hybrid CNN-transformer image classifier")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by every command that builds a model.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration; the miniature preset when omitted.
    #[arg(long, value_name = "P")]
    pub config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set epochs=5`. Repeatable;
    /// applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Labelled images to work on.
#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct DataArgs {
    /// Directory with one sub-directory of images per class.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Use the generated synthetic dataset instead of a directory.
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and keep the epoch with the best validation accuracy.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Run seed for the split, initialization, shuffling and synthetic
        /// data; overrides the configured `seed`.
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Where to write the best checkpoint.
        #[arg(long, value_name = "CKPT")]
        out: Option<PathBuf>,
        /// Also write the training log CSV here (it always goes to stdout).
        #[arg(long, value_name = "P")]
        log: Option<PathBuf>,
        /// Write the `<sample>,<split>` manifest here.
        #[arg(long, value_name = "P")]
        manifest: Option<PathBuf>,
    },
    /// Score a checkpoint on labelled images and write a metrics report.
    Eval {
        #[arg(long, value_name = "P")]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// JSON metrics report output.
        #[arg(long, value_name = "P")]
        report: PathBuf,
        /// ROC and precision-recall curve points as CSV.
        #[arg(long, value_name = "P")]
        curves: Option<PathBuf>,
        /// Exit with status 2 when overall accuracy falls below this value.
        #[arg(long, value_name = "X")]
        min_accuracy: Option<f64>,
        /// Seed of the synthetic dataset and its split; the configured
        /// `seed` when omitted.
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print per-module parameter and multiply-accumulate counts.
    Describe {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic gradients of the model modules with finite differences.
    Gradcheck {
        /// Check a single module instead of the whole suite.
        #[arg(long, value_name = "NAME")]
        module: Option<String>,
    },
    /// Write augmented variants of one image as PGM files.
    Augment {
        /// Input image (PGM, or PNG when built with the `png` feature).
        #[arg(long = "in", value_name = "IMG")]
        input: PathBuf,
        /// Output directory, created if missing.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "N", default_value_t = 8)]
        count: usize,
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Project penultimate features onto two principal components.
    Project {
        #[arg(long, value_name = "P")]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// CSV output with `pc1,pc2,label` rows.
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            data,
            seed,
            out,
            log,
            manifest,
        } => commands::train(&config, &data, seed, out.as_deref(), log.as_deref(), manifest.as_deref()),
        Command::Eval {
            ckpt,
            data,
            report,
            curves,
            min_accuracy,
            seed,
            config,
        } => commands::eval(&config, &ckpt, &data, seed, &report, curves.as_deref(), min_accuracy),
        Command::Describe { config, json } => commands::describe(&config, json),
        Command::Gradcheck { module } => commands::gradcheck(module.as_deref()),
        Command::Augment {
            input,
            out,
            count,
            seed,
            config,
        } => commands::augment(&config, &input, &out, count, seed),
        Command::Project {
            ckpt,
            data,
            out,
            seed,
            config,
        } => commands::project(&config, &ckpt, &data, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
