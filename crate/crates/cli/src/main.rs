use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sepad_core::config::ExperimentConfig;
use sepad_core::metrics::{render_report, ReportFormat};
use sepad_core::runner;
use sepad_core::training::TrainMode;

/// Separation-based representation learning for anomalous sound detection.
///
/// Log verbosity follows RUST_LOG (default `info`).
#[derive(Parser, Debug)]
#[command(name = "sepad", version)]
struct Cli {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Start from the CPU-sized desk preset instead of the full-size defaults.
    #[arg(long, global = true)]
    desk: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus described by `dataset.synth`.
    Synth,
    /// Train one separator.
    Train {
        #[arg(long)]
        machine: Option<String>,
        #[arg(long, default_value = "proposed_nontarget_sep")]
        mode: TrainMode,
    },
    /// Embed train and test clips, fit the Gaussian and score the test clips.
    Score {
        #[arg(long)]
        machine: Option<String>,
        #[arg(long, default_value = "proposed_nontarget_sep")]
        mode: TrainMode,
        /// Checkpoint to score with; defaults to the one `train` writes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate score CSVs into AUC, pAUC and Omega reports.
    Eval {
        /// Score files; defaults to every per-machine file of `--mode`.
        #[arg(long = "scores", num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long, default_value = "proposed_nontarget_sep")]
        mode: TrainMode,
        /// System name used in the report.
        #[arg(long)]
        system: Option<String>,
    },
    /// Train, score and evaluate several modes and write a combined report.
    Compare {
        /// Modes to compare (repeat or comma-separate); defaults to `eval.modes`.
        #[arg(long = "mode", value_delimiter = ',')]
        modes: Vec<TrainMode>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if cli.desk => ExperimentConfig::desk(),
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg.resolve()?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth => {
            let path = runner::cmd_synth(&cfg).with_context(|| format!("synthesising into {}", cfg.out_dir.display()))?;
            println!("{}", path.display());
        }
        Command::Train { machine, mode } => {
            let t = runner::cmd_train(&cfg, machine.as_deref(), mode)?;
            println!("{}", t.checkpoint.display());
            println!("{}", t.history_path.display());
        }
        Command::Score {
            machine,
            mode,
            checkpoint,
        } => {
            let s = runner::cmd_score(&cfg, machine.as_deref(), mode, checkpoint.as_deref())?;
            println!("{}", s.scores_path.display());
            println!(
                "gaussian: dim {} n_fit {} |mu| {:.6} cond {:.3e}",
                s.summary.dim, s.summary.n_fit, s.summary.mean_norm, s.summary.condition_number
            );
        }
        Command::Eval { scores, mode, system } => {
            let files = if scores.is_empty() {
                let manifest = runner::ensure_manifest(&cfg)?;
                runner::selected_machines(&cfg, &manifest)
                    .iter()
                    .map(|m| runner::machine_dir(&cfg, mode, m).join("scores.csv"))
                    .collect()
            } else {
                scores
            };
            let out = cfg.out_dir.join(mode.as_str());
            let system = system.unwrap_or_else(|| mode.as_str().to_string());
            let report = runner::cmd_eval(&cfg, &system, &files, &out)?;
            print!("{}", render_report(&[report], ReportFormat::Markdown));
        }
        Command::Compare { modes } => {
            let modes = if modes.is_empty() { cfg.eval.modes.clone() } else { modes };
            if modes.is_empty() {
                bail!("no modes to compare");
            }
            let runs = runner::cmd_compare(&cfg, &modes)?;
            let reports: Vec<_> = runs.into_iter().map(|r| r.report).collect();
            print!("{}", render_report(&reports, ReportFormat::Markdown));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
