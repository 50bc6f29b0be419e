use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(
    name = "resinv",
    version,
    about = "Train small denoisers, benchmark inversions, run the enhancement pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config for the command, or a manifest.json of an earlier run to
    /// repeat it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Every command currently runs on one thread; timing
    /// commands ignore this with a warning.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Clone)]
struct Models {
    /// Base (scene) model weights.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Personalized (identity) model weights.
    #[arg(long)]
    personalized: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Base,
    Personalized,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.rinv, loss.csv and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Model kind when no config is given.
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Time and score ddim / res / nti inversion on a set of images.
    InvertBench {
        #[command(flatten)]
        common: Common,
        /// Weights of the model to invert into.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory with dataset.json and the PGM files it lists; generated
        /// from the personalized recipe when absent.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Comma-separated methods, e.g. `ddim,res,nti:10`.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Run the enhancement pipeline for one or more requests.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
    },
    /// Fuse a source image's identity with a second identity over an MSS sweep.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        /// Source image (PGM) instead of the configured rendered one.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Stage and flow ablation table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
    },
    /// Summarize earlier run directories as markdown tables and image grids.
    Report {
        /// Run directories written by the other commands.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write report.md and grids (default: print to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn default_out(verb: &str, out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| Path::new("runs").join(verb))
}
