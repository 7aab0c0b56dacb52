//! Command-line front end: scenario synthesis, batch processing, evaluation
//! reports and gradient checks.
//!
//! Exit codes: 0 on success, 2 for usage/validation problems, 1 for runtime
//! failures.

pub mod commands;
pub mod config;
pub mod wav;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::evaluate::cmd_evaluate;
pub use commands::gradcheck::cmd_gradcheck;
pub use commands::process::cmd_process;
pub use commands::simulate::cmd_simulate;
pub use commands::train::cmd_train;
use config::{EvaluateConfig, ProcessConfig, ScenarioKind, SimulateConfig, TrainConfig};
use wav::WavFormat;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, unreadable inputs, failed validation: exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failures after validation (I/O mid-run, diverging training): exit 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<stws_core::Error> for CliError {
    fn from(e: stws_core::Error) -> Self {
        match e {
            stws_core::Error::Data(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "stws",
    version,
    about = "Short-time Wiener acoustic echo cancellation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize scenario bundles (far/near/echo/mic WAVs plus metadata).
    Simulate(SimulateArgs),
    /// Cancel the echo in a far/mic WAV pair.
    Process(ProcessArgs),
    /// Score processed utterances against bundle ground truth.
    Evaluate(EvaluateArgs),
    /// Verify attention gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the attention stage on synthetic double talk.
    Train(TrainArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// JSON config; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Utterance length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, value_enum)]
    kind: Option<ScenarioKind>,
    /// Comma-separated SER values in dB, cycled over the batch.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    ser: Option<Vec<i32>>,
    #[arg(long)]
    nonlinear_fraction: Option<f64>,
    #[arg(long, value_enum)]
    format: Option<WavFormat>,
    /// Render exactly this scenario JSON instead of sampling.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ProcessArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    far: Option<PathBuf>,
    #[arg(long)]
    mic: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Enable the attention-enhanced statistics path (on|off).
    #[arg(long, value_parser = parse_on_off)]
    attention: Option<bool>,
    /// Attention checkpoint file.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Filter blocks per bin.
    #[arg(long)]
    m: Option<usize>,
    /// Sliding estimation window in frames.
    #[arg(long)]
    window_frames: Option<usize>,
    /// Ridge weight relative to tr(R)/m.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Seed for the default attention init when no checkpoint is given.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    format: Option<WavFormat>,
    /// Write per-frame filter norm diagnostics to this CSV.
    #[arg(long)]
    dump_filter: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bundle_dir: Option<PathBuf>,
    #[arg(long)]
    processed_dir: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Check a saved checkpoint instead of fresh seeded instances.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    window_frames: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    bin_stride: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    ser: Option<i32>,
    #[arg(long)]
    nonlinear_fraction: Option<f64>,
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(format!("expected on|off, got {other}")),
    }
}

macro_rules! merge_opt {
    ($cfg:expr, $args:expr, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $args.$field { $cfg.$field = Some(v); })+
    };
}

macro_rules! merge_val {
    ($cfg:expr, $args:expr, $(($cfg_field:ident, $arg_field:ident)),+ $(,)?) => {
        $(if let Some(v) = $args.$arg_field { $cfg.$cfg_field = v; })+
    };
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let mut cfg: SimulateConfig = args
                .config
                .as_deref()
                .map(config::load_config)
                .transpose()?
                .unwrap_or_default();
            merge_opt!(cfg, args, out_dir);
            merge_val!(
                cfg,
                args,
                (count, count),
                (seed, seed),
                (duration_s, duration),
                (kind, kind),
                (ser_db, ser),
                (nonlinear_fraction, nonlinear_fraction),
                (format, format)
            );
            if let Some(v) = args.scenario {
                cfg.scenario_file = Some(v);
            }
            let bundles = cmd_simulate(&cfg)?;
            for b in &bundles {
                println!(
                    "{}: {} t60 {:.1}s ser {} -> {}",
                    b.meta.id,
                    match b.meta.kind {
                        ScenarioKind::DoubleTalk => "DT",
                        ScenarioKind::FarEndSingleTalk => "ST_FE",
                    },
                    b.meta.scenario.t60,
                    b.meta
                        .measured_ser_db
                        .map(|s| format!("{s:.2} dB"))
                        .unwrap_or_else(|| "n/a".into()),
                    b.dir.display()
                );
            }
            println!("wrote {} bundles", bundles.len());
            Ok(())
        }
        Command::Process(args) => {
            let mut cfg: ProcessConfig = args
                .config
                .as_deref()
                .map(config::load_config)
                .transpose()?
                .unwrap_or_default();
            merge_opt!(cfg, args, far, mic, out, params, dump_filter);
            merge_val!(
                cfg,
                args,
                (attention, attention),
                (m, m),
                (window_frames, window_frames),
                (epsilon, epsilon),
                (seed, seed),
                (format, format)
            );
            let summary = cmd_process(&cfg)?;
            println!(
                "processed {} samples ({} frames), attention {}",
                summary.num_samples,
                summary.num_frames,
                if summary.attention { "on" } else { "off" }
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            let mut cfg: EvaluateConfig = args
                .config
                .as_deref()
                .map(config::load_config)
                .transpose()?
                .unwrap_or_default();
            merge_opt!(cfg, args, bundle_dir, processed_dir, csv, json);
            let summary = cmd_evaluate(&cfg)?;
            println!("evaluated {} utterances", summary.reports.len());
            if let Some(p) = &summary.csv_path {
                println!("csv: {}", p.display());
            }
            if let Some(p) = &summary.json_path {
                println!("aggregate: {}", p.display());
            }
            Ok(())
        }
        Command::Gradcheck(args) => {
            let outcome = cmd_gradcheck(args.seed, args.checkpoint.as_deref())?;
            println!("{}", outcome.report_text);
            if outcome.pass {
                Ok(())
            } else {
                Err(CliError::Runtime("gradient check failed".into()))
            }
        }
        Command::Train(args) => {
            let mut cfg: TrainConfig = args
                .config
                .as_deref()
                .map(config::load_config)
                .transpose()?
                .unwrap_or_default();
            merge_opt!(cfg, args, out);
            merge_val!(
                cfg,
                args,
                (scenarios, scenarios),
                (seed, seed),
                (duration_s, duration),
                (m, m),
                (window_frames, window_frames),
                (steps, steps),
                (lr, lr),
                (bin_stride, bin_stride),
                (ser_db, ser),
                (nonlinear_fraction, nonlinear_fraction)
            );
            let summary = cmd_train(&cfg)?;
            println!(
                "trained on {} slices: loss {:.4} -> {:.4}",
                summary.num_examples, summary.initial_loss, summary.final_loss
            );
            Ok(())
        }
    }
}

/// Entry point used by the `stws` binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
