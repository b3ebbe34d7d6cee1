//! `fedadapt` command-line stage runner.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedadapt::harness::{run_stage, ExperimentConfig, Stage, StageOptions};

#[derive(Parser)]
#[command(name = "fedadapt", version, about = "Federated adapter tuning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input checkpoint, overriding the config and the default location.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic dataset fixtures.
    GenData(Common),
    /// Masked-label SSL pretraining of the encoder.
    PretrainEncoder(Common),
    /// Train the decoder on the source domain with the encoder base frozen.
    PretrainDecoder(Common),
    /// Federated adapter tuning on the target domain.
    Fedtune(Common),
    /// Centralized adapter tuning on the target domain.
    CentralizedTune(Common),
    /// Federated versus centralized tuning for each adapter variant.
    Ablation(Common),
    /// Evaluate a checkpoint on the source and target eval sets.
    Eval(Common),
    /// Parameter accounting per adapter variant.
    ParamsReport {
        #[command(flatten)]
        common: Common,
        /// Use the full-scale shapes and backbone sizes.
        #[arg(long)]
        full_scale: bool,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, common, full_scale) = match cli.command {
        Command::GenData(c) => (Stage::GenData, c, false),
        Command::PretrainEncoder(c) => (Stage::PretrainEncoder, c, false),
        Command::PretrainDecoder(c) => (Stage::PretrainDecoder, c, false),
        Command::Fedtune(c) => (Stage::Fedtune, c, false),
        Command::CentralizedTune(c) => (Stage::CentralizedTune, c, false),
        Command::Ablation(c) => (Stage::Ablation, c, false),
        Command::Eval(c) => (Stage::Eval, c, false),
        Command::ParamsReport { common, full_scale } => (Stage::ParamsReport, common, full_scale),
    };
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = common.out {
        cfg.out_dir = out;
    }
    let opts = StageOptions {
        checkpoint: common.checkpoint,
        full_scale,
    };
    let manifest = run_stage(stage, &cfg, &opts).with_context(|| format!("stage {}", stage.name()))?;
    log::info!("{} done; outputs in {}", stage.name(), cfg.out_dir.display());
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}
