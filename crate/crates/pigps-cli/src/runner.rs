//! Experiment execution: one output directory per run, one subdirectory
//! per repetition seed, metrics flushed after every iteration, periodic
//! policy checkpoints, and a manifest that pins the evaluation protocol
//! for later comparison. Wall-clock timings go to a separate file so the
//! metric files stay byte-reproducible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pigps_core::envs::{Environment, InstanceDistribution};
use pigps_core::gps::{evaluate, Evaluation, GpsRun};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, LoadedPolicy};
use crate::config::{EnvKind, ExperimentConfig};
use crate::metrics::MetricsWriter;

pub const MANIFEST_SCHEMA: &str = "pigps-run/v1";
pub const SUMMARY_SCHEMA: &str = "pigps-summary/v1";

/// Everything two runs must agree on for their numbers to be comparable.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct Protocol {
    pub environment: String,
    pub horizon: usize,
    pub local_iterations: usize,
    pub global_iterations: usize,
    pub instances_per_iteration: usize,
    pub samples_per_instance: usize,
    pub initial_bounds: Vec<[f64; 2]>,
    pub target_bounds: Vec<[f64; 2]>,
    pub n_eval: usize,
    pub eval_seed: u64,
}

/// The algorithm label attached to a run; differences here are the point
/// of a comparison.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct AlgorithmLabel {
    pub optimizer: String,
    pub variant: String,
    pub epsilon: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct Manifest {
    pub schema: String,
    pub name: String,
    pub protocol: Protocol,
    pub algorithm: AlgorithmLabel,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct SeedSummary {
    pub schema: String,
    pub seed: u64,
    pub status: String,
    pub iterations_completed: usize,
    pub final_mean_cost: Option<f64>,
    pub evaluation: Option<EvalSummary>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
pub struct EvalSummary {
    pub n_eval: usize,
    pub eval_seed: u64,
    pub mean_cost: f64,
    pub success_rate: f64,
}

pub struct RunOutput {
    pub run_dir: PathBuf,
    pub seed_dirs: Vec<PathBuf>,
}

pub fn manifest_for(config: &ExperimentConfig) -> Manifest {
    let horizon = match config.environment.kind {
        EnvKind::PointMass => config.point_mass_env().horizon,
        EnvKind::Latch => config.latch_env().horizon,
    };
    Manifest {
        schema: MANIFEST_SCHEMA.to_owned(),
        name: config.run.name.clone(),
        protocol: Protocol {
            environment: config.environment.kind.to_string(),
            horizon,
            local_iterations: config.gps.local_iterations,
            global_iterations: config.gps.global_iterations,
            instances_per_iteration: config.gps.instances_per_iteration,
            samples_per_instance: config.gps.samples_per_instance,
            initial_bounds: config.instances.initial.clone(),
            target_bounds: config.instances.target.clone(),
            n_eval: config.evaluation.n_eval,
            eval_seed: config.evaluation.eval_seed,
        },
        algorithm: AlgorithmLabel {
            optimizer: config.gps.optimizer.to_string(),
            variant: config.gps.variant.to_string(),
            epsilon: config.gps.epsilon,
        },
        seeds: config.run.seeds.clone(),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))
}

/// Runs every configured seed, writing `<out>/<name>/seed_<s>/` trees.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_root: &Path,
    progress: bool,
) -> anyhow::Result<RunOutput> {
    let run_dir = out_root.join(&config.run.name);
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| anyhow::anyhow!("creating {}: {e}", run_dir.display()))?;
    write_json(&manifest_for(config), &run_dir.join("manifest.json"))?;
    std::fs::write(run_dir.join("config.toml"), config.to_toml()?)?;

    let mut timing = String::new();
    let mut seed_dirs = Vec::new();
    let total_start = Instant::now();
    for &seed in &config.run.seeds {
        let seed_dir = run_dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir)
            .map_err(|e| anyhow::anyhow!("creating {}: {e}", seed_dir.display()))?;
        let start = Instant::now();
        let result = match config.environment.kind {
            EnvKind::PointMass => run_seed(config, config.point_mass_env(), seed, &seed_dir, progress),
            EnvKind::Latch => run_seed(config, config.latch_env(), seed, &seed_dir, progress),
        };
        writeln!(
            timing,
            "seed {seed}: {:.3} s{}",
            start.elapsed().as_secs_f64(),
            if result.is_err() { " (failed)" } else { "" }
        )?;
        // Timings are wall-clock and belong outside the reproducible files.
        std::fs::write(run_dir.join("timing.txt"), &timing)?;
        result.map_err(|e| anyhow::anyhow!("seed {seed}: {e}"))?;
        seed_dirs.push(seed_dir);
    }
    writeln!(timing, "total: {:.3} s", total_start.elapsed().as_secs_f64())?;
    std::fs::write(run_dir.join("timing.txt"), &timing)?;
    Ok(RunOutput { run_dir, seed_dirs })
}

fn run_seed<E: Environment>(
    config: &ExperimentConfig,
    base_env: E,
    seed: u64,
    seed_dir: &Path,
    progress: bool,
) -> anyhow::Result<()> {
    let distribution = config.instance_distribution()?;
    let gps_config = config.gps_config(seed)?;
    let total = gps_config.local_iterations + gps_config.global_iterations;
    let mut writer = MetricsWriter::create(&seed_dir.join("metrics.csv"))?;

    let flush_failure = |iterations: usize, message: &str| -> anyhow::Result<()> {
        write_json(
            &SeedSummary {
                schema: SUMMARY_SCHEMA.to_owned(),
                seed,
                status: "error".to_owned(),
                iterations_completed: iterations,
                final_mean_cost: None,
                evaluation: None,
                error: Some(message.to_owned()),
            },
            &seed_dir.join("summary.json"),
        )
    };

    let mut run = match GpsRun::new(gps_config, base_env.clone(), distribution.clone()) {
        Ok(run) => run,
        Err(e) => {
            flush_failure(0, &e.to_string())?;
            anyhow::bail!("{e}");
        }
    };

    let mut final_mean_cost = None;
    loop {
        let done = run.iteration();
        match run.step() {
            Ok(Some(record)) => {
                writer.append(record)?;
                let mean: f64 = record.instances.iter().map(|m| m.mean_cost).sum::<f64>()
                    / record.instances.len().max(1) as f64;
                final_mean_cost = Some(mean);
                if progress {
                    eprintln!(
                        "seed {seed}: iteration {}/{total}, mean cost {mean:.4}",
                        record.iteration + 1
                    );
                }
                let completed = record.iteration + 1;
                if completed % config.run.checkpoint_every == 0 && completed < total {
                    let file = checkpoint::encode_mlp(run.global_policy());
                    checkpoint::save(&file, &seed_dir.join(format!("global_iter_{completed:04}.json")))?;
                }
            }
            Ok(None) => break,
            Err(e) => {
                flush_failure(done, &e.to_string())?;
                anyhow::bail!("iteration {done}: {e}");
            }
        }
    }

    checkpoint::save(
        &checkpoint::encode_mlp(run.global_policy()),
        &seed_dir.join("global_final.json"),
    )?;
    for (m, local) in run.local_policies().iter().enumerate() {
        checkpoint::save(
            &checkpoint::encode_lin_gauss(local),
            &seed_dir.join(format!("local_{m}_final.json")),
        )?;
    }

    let evaluation = if run.records().is_empty() {
        None
    } else {
        let eval = evaluate(
            run.global_policy(),
            &base_env,
            &distribution,
            config.evaluation.n_eval,
            config.evaluation.eval_seed,
        )?;
        Some(EvalSummary {
            n_eval: config.evaluation.n_eval,
            eval_seed: config.evaluation.eval_seed,
            mean_cost: eval.mean_cost,
            success_rate: eval.success_rate,
        })
    };

    write_json(
        &SeedSummary {
            schema: SUMMARY_SCHEMA.to_owned(),
            seed,
            status: "ok".to_owned(),
            iterations_completed: run.iteration(),
            final_mean_cost,
            evaluation,
            error: None,
        },
        &seed_dir.join("summary.json"),
    )?;
    Ok(())
}

pub struct EvalReport {
    pub kind: &'static str,
    pub evaluation: Evaluation,
}

/// Evaluates a checkpointed policy under a config's environment,
/// instance distribution, and evaluation protocol.
pub fn eval_checkpoint(
    checkpoint_path: &Path,
    config: &ExperimentConfig,
) -> anyhow::Result<EvalReport> {
    let loaded = checkpoint::load(checkpoint_path)?;
    let distribution = config.instance_distribution()?;
    let evaluation = match config.environment.kind {
        EnvKind::PointMass => eval_on(&loaded, &config.point_mass_env(), &distribution, config)?,
        EnvKind::Latch => eval_on(&loaded, &config.latch_env(), &distribution, config)?,
    };
    Ok(EvalReport {
        kind: loaded.kind(),
        evaluation,
    })
}

fn eval_on<E: Environment>(
    loaded: &LoadedPolicy,
    env: &E,
    distribution: &InstanceDistribution,
    config: &ExperimentConfig,
) -> anyhow::Result<Evaluation> {
    let policy = loaded.as_policy();
    if policy.state_dim() != env.state_dim() || policy.action_dim() != env.action_dim() {
        anyhow::bail!(
            "checkpoint dims {}x{} do not fit environment \"{}\" ({}x{})",
            policy.state_dim(),
            policy.action_dim(),
            config.environment.kind,
            env.state_dim(),
            env.action_dim()
        );
    }
    Ok(evaluate(
        policy,
        env,
        distribution,
        config.evaluation.n_eval,
        config.evaluation.eval_seed,
    )?)
}
