//! `reaseq`: run the offline pipeline or any single stage of it.
//!
//! Each stage subcommand executes exactly one stage against the run
//! directory, erroring when an upstream artifact is missing; `run` walks the
//! whole graph. Stages whose manifests still match their inputs are skipped.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reaseq::pipeline::{run, Preset, RunConfig};

#[derive(Parser)]
#[command(name = "reaseq", version, about = "Offline pipeline for knowledge-grounded sequential recommendation")]
struct Cli {
    /// TOML run configuration; defaults to the chosen preset.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Built-in configuration: desk (minutes on one machine) or paper
    /// (full-size training constants).
    #[arg(long, global = true, default_value = "desk")]
    preset: String,

    /// Root seed override; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory for artifacts and manifests [default: runs/<preset>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run every configured stage in dependency order.
    Run,
    /// Generate the synthetic world with planted ground truth.
    GenWorld,
    /// Mine knowledge for every item (built-in agent or HTTP endpoint).
    Agents,
    /// Encode item knowledge into dense representations.
    Encode,
    /// Train the RQ-VAE and extract semantic ids.
    Tokenize,
    /// Flag suspected beyond-log gaps and build token sequences.
    Locate,
    /// Train the masked-diffusion fill model.
    TrainDllm,
    /// Replace fill slots with predicted representation vectors.
    Fill,
    /// Train the dual-pathway CTR ranker.
    TrainRanker,
    /// Score held-out impressions and compute metrics.
    Eval,
    /// Render the run report.
    Report,
}

impl Command {
    fn stage_selection(self) -> Option<&'static str> {
        match self {
            Command::Run => None,
            Command::GenWorld => Some("world"),
            Command::Agents => Some("agents"),
            Command::Encode => Some("encode"),
            Command::Tokenize => Some("tokenize"),
            Command::Locate => Some("locate"),
            Command::TrainDllm => Some("train-dllm"),
            Command::Fill => Some("fill"),
            Command::TrainRanker => Some("train-ranker"),
            Command::Eval => Some("eval"),
            Command::Report => Some("report"),
        }
    }
}

fn execute(cli: Cli) -> reaseq::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(cli.preset.parse()?),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    // A stage subcommand narrows the selection; `run` keeps the configured one.
    if let Some(stage) = cli.command.stage_selection() {
        cfg.stages = vec![stage.to_string()];
    }
    let out = cli.out.unwrap_or_else(|| {
        PathBuf::from(match cfg.preset {
            Preset::Desk => "runs/desk",
            Preset::Paper => "runs/paper",
        })
    });
    let summary = run(&cfg, &out)?;
    for outcome in &summary.outcomes {
        println!(
            "{:<13} {}",
            outcome.stage,
            if outcome.ran { "ran" } else { "up to date" }
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
