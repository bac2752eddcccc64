use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use kpirl::harness::{run, Command, ExperimentConfig, Preset};

#[derive(Parser)]
#[command(name = "irl", version, about = "Keypoint-based inverse RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate demonstrations and, for learned-model presets, sine data.
    GenData(Args),
    /// Fit the keypoint dynamics MLP and report held-out NMSE.
    TrainDynamics(Args),
    /// Learn cost weights with gradient-based IRL.
    TrainIrl(Args),
    /// Learn cost weights with apprenticeship learning.
    Baseline(Args),
    /// Plan the test targets with one cost and save the trajectories.
    Plan(Args),
    /// Compare all costs on the test targets and write the summary tables.
    Eval(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Config file of `key = value` lines.
    #[arg(long, short, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a preset instead of a config file.
    #[arg(long)]
    preset: Option<Preset>,
    /// Run a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Cmd {
    fn split(self) -> (Command, Args) {
        match self {
            Cmd::GenData(a) => (Command::GenData, a),
            Cmd::TrainDynamics(a) => (Command::TrainDynamics, a),
            Cmd::TrainIrl(a) => (Command::TrainIrl, a),
            Cmd::Baseline(a) => (Command::Baseline, a),
            Cmd::Plan(a) => (Command::Plan, a),
            Cmd::Eval(a) => (Command::Eval, a),
        }
    }
}

fn build_config(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(p)) => ExperimentConfig::preset(p),
        (None, None) => bail!("pass --config FILE or --preset NAME"),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (command, args) = Cli::parse().command.split();
    let cfg = build_config(&args)?;
    let outcome = run(&cfg, command).with_context(|| format!("irl {command} failed"))?;
    for m in &outcome.messages {
        println!("{m}");
    }
    println!("{} files under {}", outcome.files.len(), cfg.out_dir.display());
    Ok(())
}
