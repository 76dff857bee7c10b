//! Command-line pipeline: prepare a corpus, train the extractor, train the
//! full model, synthesize, evaluate and plot.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use denoise_tts::model::Granularity;

use commands::{JointOptions, StageOptions, SynthOptions, WarmStart};
use config::{RunConfig, WORKERS_ENV};
use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "denoise-tts", version, about = "Text-to-speech trained on noisy speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AblationFlags {
    #[arg(long)]
    granularity: Option<Granularity>,
    /// Keep the extractor at its warm-start weights.
    #[arg(long)]
    fix_extractor: bool,
    /// Drop the adversarial CTC head.
    #[arg(long)]
    no_adversarial_ctc: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the noisy corpus and its manifest.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Step 1: pretrain the noise extractor on paired data.
    TrainExtractor {
        #[command(flatten)]
        common: Common,
        /// Continue from the stage's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps instead of the configured budget.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Step 2: train all modules jointly.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: AblationFlags,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        steps: Option<usize>,
        /// Start without a pretrained extractor.
        #[arg(long, conflicts_with = "warm_start")]
        cold_start: bool,
        /// Extractor checkpoint to start from (default: the run's extractor stage).
        #[arg(long)]
        warm_start: Option<PathBuf>,
        /// Names the run directory `joint-<label>`.
        #[arg(long)]
        label: Option<String>,
        /// Train and evaluate once per granularity, labeled by granularity.
        #[arg(long, conflicts_with_all = ["label", "granularity"])]
        sweep_granularity: bool,
    },
    /// Synthesize speech for a phoneme sequence with silence conditioning.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Space-separated phoneme symbols.
        #[arg(long)]
        phonemes: String,
        #[arg(long)]
        speaker: Option<String>,
        /// Comma-separated per-phoneme frame counts.
        #[arg(long, value_delimiter = ',')]
        durations: Option<Vec<usize>>,
        #[arg(long, default_value = "sample")]
        name: String,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        granularity: Option<Granularity>,
    },
    /// Objective evaluation on a manifest split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Loss curves for every trained stage.
    Plot {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.sync_seeds();
    cfg.validate()?;
    Ok(cfg)
}

fn apply_ablation(cfg: &mut RunConfig, a: &AblationFlags) {
    if let Some(g) = a.granularity {
        cfg.ablation.granularity = g;
    }
    cfg.ablation.fix_extractor |= a.fix_extractor;
    if a.no_adversarial_ctc {
        cfg.ablation.adversarial_ctc = false;
    }
    cfg.sync_seeds();
}

fn set_workers() -> Result<()> {
    if let Some(v) = std::env::var_os(WORKERS_ENV) {
        let n: usize = v
            .to_string_lossy()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    set_workers()?;
    match cli.command {
        Command::Prepare { common } => commands::prepare(&load(&common)?),
        Command::TrainExtractor { common, resume, steps } => {
            commands::train_extractor(&load(&common)?, &StageOptions { resume, steps })
        }
        Command::Train {
            common,
            ablation,
            resume,
            steps,
            cold_start,
            warm_start,
            label,
            sweep_granularity,
        } => {
            let mut cfg = load(&common)?;
            apply_ablation(&mut cfg, &ablation);
            let opts = JointOptions {
                stage: StageOptions { resume, steps },
                warm: match (cold_start, warm_start) {
                    (true, _) => WarmStart::Cold,
                    (false, Some(p)) => WarmStart::Path(p),
                    (false, None) => WarmStart::Default,
                },
                label,
            };
            if sweep_granularity {
                commands::sweep_granularity(&cfg, &opts)
            } else {
                commands::train_joint(&cfg, &opts).map(|_| ())
            }
        }
        Command::Synth {
            common,
            phonemes,
            speaker,
            durations,
            name,
            label,
            checkpoint,
            granularity,
        } => commands::synth(
            &load(&common)?,
            &SynthOptions {
                phonemes,
                speaker,
                durations,
                name,
                label,
                checkpoint,
                granularity,
            },
        )
        .map(|_| ()),
        Command::Eval {
            common,
            label,
            checkpoint,
        } => commands::eval(&load(&common)?, label.as_deref(), checkpoint.as_deref()).map(|_| ()),
        Command::Plot { common } => commands::plot(&load(&common)?).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
