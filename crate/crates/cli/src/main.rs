mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cotseg::preprocess::Modality;

/// Brain-tumor segmentation with a CoT-augmented 3D U-Net.
///
/// Exit codes: 0 ok, 1 config error, 2 data error, 3 numeric abort,
/// 4 checkpoint mismatch, 5 verification failure.
#[derive(Parser, Debug)]
#[command(name = "cotseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes config.toml, train_log.jsonl and checkpoint.ckpt.
    Train(TrainArgs),
    /// Sliding-window prediction; writes one label NIfTI per case.
    Predict(PredictArgs),
    /// Score predictions against ground truth (Dice and HD95 for ET, TC, WT).
    Evaluate(EvaluateArgs),
    /// Evaluate a trained model with modalities zeroed out.
    Ablate(AblateArgs),
    /// Print architecture, parameter counts and checkpoint metadata.
    Inspect(InspectArgs),
    /// Run gradient checks, metric oracles and round-trip tests.
    Verify(VerifyArgs),
    /// Write generated cases in the case-directory layout.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct RunDirArgs {
    /// Output directory; defaults to runs/<timestamp>-<tag>.
    #[arg(long, alias = "out")]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory of <case>/<case>_{flair,t1,t1ce,t2,seg}.nii.gz.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use N generated cases instead of a dataset.
    #[arg(long)]
    synthetic: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration (TOML); desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Held-out fold index.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    out: RunDirArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Case directory, dataset directory, or 4-channel NIfTI file.
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Predict N generated cases.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Run configuration; its model section must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: RunDirArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of predicted label maps.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label maps (or a dataset directory).
    #[arg(long)]
    truth: PathBuf,
    #[command(flatten)]
    out: RunDirArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Modality to exclude (flair, t1, t1c, t2); repeatable.
    #[arg(long, value_parser = parse_modality)]
    drop: Vec<Modality>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: RunDirArgs,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    /// Perturb the convolution input gradient.
    Conv3d,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Fewer random cases per oracle check.
    #[arg(long)]
    quick: bool,
    /// Self-test hook: corrupt a backward pass so the suite must fail.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extent per axis.
    #[arg(long, default_value_t = 32)]
    extent: usize,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse().map_err(|e: cotseg::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // argument errors share the configuration exit code
            return if e.use_stderr() { ExitCode::from(exit::CONFIG as u8) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Verify(a) => commands::verify(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
