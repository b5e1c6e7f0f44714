use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pigps_cli::config::ExperimentConfig;
use pigps_cli::{report, runner};

#[derive(Parser)]
#[command(name = "pigps", about = "Trajectory-optimization experiments with guided policy search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment config over its repetition seeds.
    Run {
        /// Path to the experiment config (TOML).
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a saved policy checkpoint under a config's protocol.
    Eval {
        /// Path to the policy checkpoint (JSON).
        checkpoint: PathBuf,
        /// Path to the experiment config (TOML).
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare two or more completed run directories.
    Compare {
        /// Run directories, each containing manifest.json and seed_*/.
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Replace the config's repetition seeds with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root directory (default: ./runs, or the config's run.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Patch a config value before validation, e.g. gps.epochs=80.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn load_config(path: &PathBuf, common: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_path(path, &common.overrides)?;
    if let Some(seed) = common.seed {
        config.run.seeds = vec![seed];
    }
    Ok(config)
}

fn out_root(config: &ExperimentConfig, common: &CommonArgs) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| config.run.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { config, common } => {
            let config = load_config(&config, &common)?;
            let out = runner::run_experiment(&config, &out_root(&config, &common), true)?;
            println!("run complete: {}", out.run_dir.display());
            for dir in &out.seed_dirs {
                println!("  {}", dir.display());
            }
        }
        Command::Eval {
            checkpoint,
            config,
            common,
        } => {
            let config = load_config(&config, &common)?;
            let report = runner::eval_checkpoint(&checkpoint, &config)?;
            let payload = serde_json::json!({
                "checkpoint": checkpoint.display().to_string(),
                "kind": report.kind,
                "environment": config.environment.kind.to_string(),
                "n_eval": config.evaluation.n_eval,
                "eval_seed": config.evaluation.eval_seed,
                "mean_cost": report.evaluation.mean_cost,
                "success_rate": report.evaluation.success_rate,
            });
            let text = serde_json::to_string_pretty(&payload)?;
            if let Some(out) = &common.out {
                std::fs::write(out, &text)?;
            }
            println!("{text}");
        }
        Command::Compare { dirs, out } => {
            let report = report::compare_runs(&dirs)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(out) = &out {
                std::fs::write(out, &text)?;
            }
            println!("{text}");
        }
    }
    Ok(())
}
