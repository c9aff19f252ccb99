mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{exit_code, CliError};

#[derive(Debug, Parser)]
#[command(name = "vtr", version, about = "Learned stereo features for visual teach and repeat")]
pub struct Cli {
    /// TOML settings file with flat dotted keys (e.g. `train.lr = 1e-5`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a setting, `key=value`; repeatable. Beaten only by dedicated flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Parent of default output directories.
    #[arg(long, global = true, env = "VTR_RUN_DIR", default_value = "runs")]
    pub run_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a training dataset, or a taught or repeat path sequence.
    Synth(SynthArgs),
    /// Train the feature network on a dataset.
    Train(TrainArgs),
    /// Compare analytic and finite-difference weight gradients.
    EvalGrad(EvalGradArgs),
    /// Build a map from a taught sequence.
    Teach(TeachArgs),
    /// Localize repeat sequences against a map.
    Repeat(RepeatArgs),
    /// Merge repeat outputs into one report with a condition matrix.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SequenceKind {
    Teach,
    Repeat,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Training pairs.
    #[arg(long)]
    pub count: Option<usize>,
    /// Validation pairs.
    #[arg(long)]
    pub val_count: Option<usize>,
    /// Render a path sequence instead of a dataset.
    #[arg(long, value_enum)]
    pub sequence: Option<SequenceKind>,
    /// Lighting condition of the sequence.
    #[arg(long)]
    pub condition: Option<String>,
    /// Frames in the sequence.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractorArgs {
    /// Checkpoint directory of trained weights.
    #[arg(long, conflicts_with = "analytic")]
    pub ckpt: Option<PathBuf>,
    /// Use the hand-crafted extractor instead of trained weights.
    #[arg(long)]
    pub analytic: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalGradArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Weights to check; a fresh network of `grad.channels` otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Number of weights probed; 0 checks all.
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TeachArgs {
    /// Taught sequence directory.
    #[arg(long)]
    pub frames: PathBuf,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RepeatArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Repeat sequence directories.
    #[arg(long, num_args = 1.., required = true)]
    pub frames: Vec<PathBuf>,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    /// `dense` or `sparse` matching.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Repeat output directories.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.line());
            return ExitCode::from(exit_code(&err));
        }
    };
    match commands::run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let CliError::Usage(_) = err {
                eprintln!("{}", <Cli as clap::CommandFactory>::command().render_usage());
            }
            eprintln!("{}", err.line());
            ExitCode::from(exit_code(&err))
        }
    }
}
