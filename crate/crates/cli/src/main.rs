//! `botaclip` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Failures also print one JSON line on stderr.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use botaclip::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "botaclip", version, about = "Align image embeddings with species-cover tables and evaluate them")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; every key is optional, unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set botaclip.lambda=0` (repeatable).
    /// The value is parsed as JSON, falling back to a plain string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = overrides::parse_assignment)]
    pub sets: Vec<(String, Value)>,
    /// Run seed; overrides `seed` from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "RA_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert long-format relevés into a cover table, plot labels and class names.
    Prep {
        /// Long-format relevé CSV (plot_id, x_m, y_m, prodrome_class, species_id, bb_class).
        #[arg(long)]
        releves: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the relevé classifier used as the tabular encoder.
    TrainBotania {
        /// Cover table CSV.
        #[arg(long)]
        cover: Option<PathBuf>,
        /// Plot class labels CSV.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        split: SplitArg,
        /// Output directory for the checkpoint, log and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the contrastive image/relevé alignment.
    TrainBotaclip {
        /// Cover table CSV.
        #[arg(long)]
        cover: Option<PathBuf>,
        /// Image embedding file with `<plot>` or `<plot>#<view>` row ids.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Pretrained relevé classifier checkpoint.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[command(flatten)]
        split: SplitArg,
        /// Output directory for the checkpoint, log and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the supervised species-presence baseline.
    TrainBotasp {
        /// Image embedding file.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Presence table CSV (one column per species).
        #[arg(long)]
        presence: Option<PathBuf>,
        #[command(flatten)]
        split: SplitArg,
        /// Output directory for the checkpoint, log and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a trained image encoder to an embedding file.
    Embed {
        /// Alignment or baseline checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input embedding file.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Output embedding file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a buffered spatial cross-validation manifest for a site table.
    Split {
        /// Any site table CSV (`<id>,x_m,y_m,…`).
        #[arg(long)]
        sites: Option<PathBuf>,
        /// Output manifest CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit random forests on embeddings and write a metric report.
    Eval {
        /// Downstream task.
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Embedding file to evaluate.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Presence table CSV (plant task).
        #[arg(long)]
        presence: Option<PathBuf>,
        /// Occurrence CSV (butterfly task).
        #[arg(long)]
        occurrences: Option<PathBuf>,
        /// Soil trophic-group CSV (soil task).
        #[arg(long)]
        soil: Option<PathBuf>,
        #[command(flatten)]
        split: SplitArg,
        /// Output report CSV; its file stem names the model in `stats`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Davies-Bouldin and Calinski-Harabasz indices of labelled embeddings.
    ClusterMetrics {
        /// Embedding file.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Labels CSV (plot_id, class).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Friedman and Holm-corrected Wilcoxon comparison of metric reports.
    Stats {
        /// Two or more metric report CSVs.
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Metric column to compare (default: the first one).
        #[arg(long)]
        metric: Option<String>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic paired dataset with spatially correlated latents.
    Synth {
        /// Number of relevé/image pairs.
        #[arg(long)]
        pairs: Option<usize>,
        /// Image embedding width.
        #[arg(long)]
        img_dim: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SplitArg {
    /// Precomputed split manifest; by default the split is built from the
    /// site locations, the `split` configuration and the seed.
    #[arg(long, value_name = "FILE")]
    pub split_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Plant,
    Butterfly,
    Soil,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn report_failure(kind: &str, code: u8, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "exit_code": code, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return report_failure("usage", 1, &e.kind().to_string());
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let name = match kind {
                ErrorKind::Usage => "usage",
                ErrorKind::Data => "data",
                ErrorKind::Numeric => "numeric",
            };
            eprintln!("error: {e}");
            report_failure(name, exit_code(kind), &e.to_string())
        }
    }
}
