mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdctc::check::Suite;
use sdctc::decode::DecodeMode;

#[derive(Debug, Parser)]
#[command(name = "sdctc", version, about = "Multi-talker SOT and SD-CTC toolkit on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a JSON Lines dataset of single- and two-speaker mixtures.
    Synth(SynthArgs),
    /// Run one training stage and write a checkpoint plus metrics CSV.
    Train(TrainArgs),
    /// Decode a dataset with a checkpoint.
    Decode(DecodeArgs),
    /// Score hypotheses against references with cpWER.
    Score(ScoreArgs),
    /// Dump teacher-forced attention maps and a pooled LDA projection.
    Inspect(InspectArgs),
    /// Run the built-in property suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON file with `synth`, `n`, `p_two` and `seed` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    /// Probability that a sample mixes two speakers.
    #[arg(long = "p-two")]
    pub p_two: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to continue from; required for stage 2.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// JSON file with `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset used for the validation cpWER column.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "ctc-weight")]
    pub ctc_weight: Option<f64>,
    #[arg(long = "learning-rate")]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON decode config; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long = "rescore-weight")]
    pub rescore_weight: Option<f64>,
    #[arg(long = "max-output-length")]
    pub max_output_length: Option<usize>,
    #[arg(long, default_value = "aed+sdctc")]
    pub mode: DecodeMode,
    /// Hypothesis file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Dataset or hypothesis file holding the references.
    #[arg(long)]
    pub refs: PathBuf,
    /// Dataset or hypothesis file holding the hypotheses.
    #[arg(long)]
    pub hyps: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Suite to run; all suites when omitted.
    #[arg(long)]
    pub suite: Option<Suite>,
    /// Directory for a JSON report and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Score(a) => commands::score(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Check(a) => commands::check(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                eprintln!("run `sdctc --help` for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
