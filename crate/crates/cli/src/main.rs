//! `dyadic`: synthesize data, train, infer, evaluate, gradient-check and render.
//!
//! Exit codes: 0 success, 1 invalid input (flags, configs, missing files), 2 runtime failure.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dyadic_core::synthgen::DEFAULT_MIN_SPAN;

pub const THREADS_ENV: &str = "DYADIC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dyadic", version, about = "Dual-speaker talking-head modeling on synthetic conversations")]
#[command(after_help = "Environment:\n  DYADIC_THREADS  worker threads for clip-parallel work [default: 1]")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dyadic dataset and its manifest.
    SynthData(SynthArgs),
    /// Train a model on a manifest's train split, validating on its test split.
    Train(TrainArgs),
    /// Predict Speaker B's motion for clips.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
    /// Plot motion channels, audio envelopes and turns, with CSV twins.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub n_clips: usize,
    #[arg(long, default_value = "data")]
    pub out_dir: PathBuf,
    /// Train, test and ood fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub splits: String,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    /// Relative weights of 1, 2, 3, ... rounds per clip.
    #[arg(long, default_value = "1,1,1,1")]
    pub round_weights: String,
    /// Background noise on audio and coupling jitter on motion.
    #[arg(long, default_value_t = 0.005)]
    pub noise_std: f64,
    /// Smallest per-channel range used by the normalization statistics.
    #[arg(long, default_value_t = DEFAULT_MIN_SPAN)]
    pub min_span: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Base preset for both configs (full, toy, tiny).
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// JSON object of model-config overrides.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// JSON object of train-config overrides.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Overrides the train config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the train config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the train config's learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Best checkpoint (lowest validation loss).
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Per-epoch CSV log [default: train_log.csv next to the checkpoint].
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["manifest", "clip_dir"]))]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest; predicts every clip of --split.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split used with --manifest (train, test, ood).
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory of clip files; predicts --clip-id or every clip found.
    #[arg(long)]
    pub clip_dir: Option<PathBuf>,
    #[arg(long, requires = "clip_dir")]
    pub clip_id: Option<String>,
    /// Root holding features/<id>.a|b for the feature-file encoder.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value = "predictions")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of <id>.b.f32 + <id>.pred.json predictions.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "eval")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequence length of the random problem.
    #[arg(long, default_value_t = 24)]
    pub frames: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub abs_floor: f64,
    /// JSON report destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).multiple(true).args(["manifest", "clip_dir", "predictions"]))]
pub struct RenderArgs {
    /// Clip id to plot.
    #[arg(long)]
    pub id: String,
    /// Manifest holding the clip (ground truth, audio, turns).
    #[arg(long, conflicts_with = "clip_dir")]
    pub manifest: Option<PathBuf>,
    /// Directory of clip files (ground truth, audio, turns).
    #[arg(long)]
    pub clip_dir: Option<PathBuf>,
    /// Directory of predictions; plotted as the primary series.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value = "plots")]
    pub out_dir: PathBuf,
}

/// Input the user can fix: bad flags, configs or files.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<dyadic_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn thread_count() -> Result<usize, Invalid> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Invalid(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = thread_count()?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    match cli.command {
        Command::SynthData(a) => commands::synth_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Render(a) => commands::render(&a),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn validation_errors_map_to_one() {
        let e = anyhow::Error::new(Invalid("x".into()));
        assert_eq!(exit_code(&e), 1);
        let e = anyhow::Error::new(dyadic_core::Error::Coverage(vec!["a".into()]));
        assert_eq!(exit_code(&e), 1);
        let e = anyhow::Error::new(dyadic_core::Error::Numerical("nan".into()));
        assert_eq!(exit_code(&e), 2);
        let e = anyhow::anyhow!("disk full");
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn help_lists_defaults() {
        let help = Cli::command()
            .find_subcommand_mut("synth-data")
            .unwrap()
            .render_long_help()
            .to_string();
        assert!(help.contains("[default: 0.8,0.1,0.1]"), "{help}");
        assert!(help.contains("[default: 10]"));
    }
}
