use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tdpcr_cli::commands;
use tdpcr_cli::config::Config;
use tdpcr_cli::exit_code;

#[derive(Parser)]
#[command(name = "tdpcr", version, about = "Cloud removal and land-cover segmentation with SAR/optical prompt-guided fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set run.steps=200` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the command (dataset, run or study).
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint: phase-1 init for `train`, the model for `eval` and `viz-prompt`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (into --out, or the data directory).
    GenData(Common),
    /// Train one run (phase 1, phase 2 or the segmentation probe).
    Train(Common),
    /// Evaluate a checkpoint and write metrics and image strips.
    Eval(Common),
    /// Run the five-row ablation and the paradigm comparison.
    Ablate(Common),
    /// Project the prompt map of one scene to RGB.
    VizPrompt(Common),
}

fn resolve(c: &Common, kind: &str) -> tdpcr_core::Result<Config> {
    let mut sets = c.overrides.clone();
    let seed_key = match kind {
        "gen-data" => Some("dataset.seed"),
        "train" => Some("run.seed"),
        "ablate" => Some("study.seed"),
        _ => None,
    };
    if let (Some(seed), Some(key)) = (c.seed, seed_key) {
        sets.push(format!("{key}={seed}"));
    }
    let ckpt_key = match kind {
        "train" => Some("run.init_checkpoint"),
        "eval" => Some("eval.checkpoint"),
        "viz-prompt" => Some("viz.checkpoint"),
        _ => None,
    };
    if let (Some(p), Some(key)) = (&c.ckpt, ckpt_key) {
        sets.push(format!("{key}={}", toml_string(p)));
    }
    if let Some(out) = &c.out {
        sets.push(format!("out={}", toml_string(out)));
    }
    Config::load(c.config.as_deref(), &sets)
}

fn toml_string(p: &std::path::Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match &cli.command {
        Command::GenData(c) => ("gen-data", c),
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Ablate(c) => ("ablate", c),
        Command::VizPrompt(c) => ("viz-prompt", c),
    };
    let result = resolve(common, kind).and_then(|cfg| match kind {
        "gen-data" => commands::gen_data(&cfg).map(|_| ()),
        "train" => commands::train(&cfg),
        "eval" => commands::eval(&cfg),
        "ablate" => commands::ablate(&cfg),
        _ => commands::viz_prompt(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
