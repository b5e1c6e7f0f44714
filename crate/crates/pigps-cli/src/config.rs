//! Experiment configuration: a versioned TOML schema covering environment
//! selection, instance bounds, loop hyperparameters, the evaluation
//! protocol, and run plumbing, with dotted-path overrides applied before
//! deserialization and validation that reports every violation at once.

use std::fmt;
use std::path::Path;

use pigps_core::envs::{InstanceDistribution, LatchEnv, PointMassEnv};
use pigps_core::gps::{Curriculum, GpsConfig, LocalOptimizer, Variant};
use pigps_core::pi2::KlBound;
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA: &str = "pigps-experiment/v1";

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub environment: EnvironmentSection,
    pub instances: InstancesSection,
    #[serde(default)]
    pub gps: GpsSection,
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    pub kind: EnvKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointMass,
    Latch,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::PointMass => write!(f, "point_mass"),
            EnvKind::Latch => write!(f, "latch"),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InstancesSection {
    /// Four `[low, high]` intervals for `[px, py, vx, vy]`.
    pub initial: Vec<[f64; 2]>,
    /// Two `[low, high]` intervals for the goal or latch position.
    pub target: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GpsSection {
    pub local_iterations: usize,
    pub global_iterations: usize,
    pub instances_per_iteration: usize,
    pub samples_per_instance: usize,
    pub epsilon: f64,
    pub optimizer: OptimizerKind,
    pub variant: VariantKind,
    pub initial_noise: f64,
    pub global_noise_boost: f64,
    pub kl_penalty_scale: f64,
    pub covariance_floor: f64,
    pub dynamics_prior_strength: f64,
    pub cost_fd_step: f64,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub global_learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curriculum: Option<CurriculumSection>,
}

impl Default for GpsSection {
    fn default() -> Self {
        let d = GpsConfig::default();
        Self {
            local_iterations: d.local_iterations,
            global_iterations: d.global_iterations,
            instances_per_iteration: d.instances_per_iteration,
            samples_per_instance: d.samples_per_instance,
            epsilon: d.kl_bound.epsilon(),
            optimizer: OptimizerKind::Pi2,
            variant: VariantKind::PiGps,
            initial_noise: d.initial_noise,
            global_noise_boost: d.global_noise_boost,
            kl_penalty_scale: d.kl_penalty_scale,
            covariance_floor: d.covariance_floor,
            dynamics_prior_strength: d.dynamics_prior_strength,
            cost_fd_step: d.cost_fd_step,
            hidden: d.hidden,
            learning_rate: d.learning_rate,
            global_learning_rate: d.global_learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            momentum: d.momentum,
            curriculum: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Pi2,
    Lqr,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Pi2 => write!(f, "pi2"),
            OptimizerKind::Lqr => write!(f, "lqr"),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    PiGps,
    PiGpsW,
    Reps,
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantKind::PiGps => write!(f, "pi_gps"),
            VariantKind::PiGpsW => write!(f, "pi_gps_w"),
            VariantKind::Reps => write!(f, "reps"),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSection {
    pub start_fraction: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub n_eval: usize,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub checkpoint_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".to_owned(),
            seeds: vec![0],
            checkpoint_every: 10,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applying `key=value` overrides onto the raw tree
    /// first so overridden configs validate exactly like written ones.
    pub fn from_toml(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut tree = toml::Value::Table(text.parse::<toml::Table>()?);
        for entry in overrides {
            apply_override(&mut tree, entry)?;
        }
        let config: ExperimentConfig = tree.try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut problems = Vec::new();
        if self.schema != CONFIG_SCHEMA {
            problems.push(format!(
                "schema: expected \"{CONFIG_SCHEMA}\", got \"{}\"",
                self.schema
            ));
        }
        if let Some(h) = self.environment.horizon {
            if h == 0 {
                problems.push("environment.horizon: must be at least 1".to_owned());
            }
        }
        if self.instances.initial.len() != 4 {
            problems.push(format!(
                "instances.initial: need 4 intervals, got {}",
                self.instances.initial.len()
            ));
        }
        if self.instances.target.len() != 2 {
            problems.push(format!(
                "instances.target: need 2 intervals, got {}",
                self.instances.target.len()
            ));
        }
        for (name, bounds) in [
            ("instances.initial", &self.instances.initial),
            ("instances.target", &self.instances.target),
        ] {
            for (i, [lo, hi]) in bounds.iter().enumerate() {
                if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                    problems.push(format!("{name}[{i}]: invalid interval [{lo}, {hi}]"));
                }
            }
        }
        let g = &self.gps;
        if g.instances_per_iteration == 0 {
            problems.push("gps.instances_per_iteration: must be at least 1".to_owned());
        }
        if g.samples_per_instance < 2 {
            problems.push("gps.samples_per_instance: must be at least 2".to_owned());
        }
        if !(g.epsilon > 0.0) {
            problems.push(format!("gps.epsilon: must be positive, got {}", g.epsilon));
        }
        if !(g.initial_noise > 0.0) {
            problems.push(format!(
                "gps.initial_noise: must be positive, got {}",
                g.initial_noise
            ));
        }
        if !(g.global_noise_boost > 0.0) {
            problems.push(format!(
                "gps.global_noise_boost: must be positive, got {}",
                g.global_noise_boost
            ));
        }
        if g.kl_penalty_scale < 0.0 {
            problems.push(format!(
                "gps.kl_penalty_scale: must be nonnegative, got {}",
                g.kl_penalty_scale
            ));
        }
        if !(g.covariance_floor > 0.0) {
            problems.push(format!(
                "gps.covariance_floor: must be positive, got {}",
                g.covariance_floor
            ));
        }
        if g.dynamics_prior_strength < 0.0 {
            problems.push(format!(
                "gps.dynamics_prior_strength: must be nonnegative, got {}",
                g.dynamics_prior_strength
            ));
        }
        if !(g.cost_fd_step > 0.0) {
            problems.push(format!(
                "gps.cost_fd_step: must be positive, got {}",
                g.cost_fd_step
            ));
        }
        if !(g.learning_rate > 0.0) || !(g.global_learning_rate > 0.0) {
            problems.push(format!(
                "gps.learning_rate / gps.global_learning_rate: must be positive, got {} / {}",
                g.learning_rate, g.global_learning_rate
            ));
        }
        if g.epochs == 0 {
            problems.push("gps.epochs: must be at least 1".to_owned());
        }
        if g.batch_size == 0 {
            problems.push("gps.batch_size: must be at least 1".to_owned());
        }
        if !(0.0..1.0).contains(&g.momentum) {
            problems.push(format!(
                "gps.momentum: must be in [0, 1), got {}",
                g.momentum
            ));
        }
        if let Some(c) = &g.curriculum {
            if !(c.start_fraction > 0.0 && c.start_fraction <= 1.0) {
                problems.push(format!(
                    "gps.curriculum.start_fraction: must be in (0, 1], got {}",
                    c.start_fraction
                ));
            }
        }
        if g.optimizer == OptimizerKind::Lqr
            && (g.instances_per_iteration != 1 || g.global_iterations != 0)
        {
            problems.push(
                "gps.optimizer: lqr supports only instances_per_iteration = 1 with \
                 global_iterations = 0"
                    .to_owned(),
            );
        }
        if self.evaluation.n_eval == 0 {
            problems.push("evaluation.n_eval: must be at least 1".to_owned());
        }
        if self.run.seeds.is_empty() {
            problems.push("run.seeds: need at least one seed".to_owned());
        }
        if self.run.checkpoint_every == 0 {
            problems.push("run.checkpoint_every: must be at least 1".to_owned());
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            problems.push(format!(
                "run.name: must be a nonempty path component, got \"{}\"",
                self.run.name
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            anyhow::bail!("invalid configuration:\n  - {}", problems.join("\n  - "))
        }
    }

    /// The configured loop hyperparameters for one repetition seed.
    pub fn gps_config(&self, seed: u64) -> anyhow::Result<GpsConfig> {
        let g = &self.gps;
        let config = GpsConfig {
            local_iterations: g.local_iterations,
            global_iterations: g.global_iterations,
            instances_per_iteration: g.instances_per_iteration,
            samples_per_instance: g.samples_per_instance,
            kl_bound: KlBound::new(g.epsilon)?,
            optimizer: match g.optimizer {
                OptimizerKind::Pi2 => LocalOptimizer::Pi2,
                OptimizerKind::Lqr => LocalOptimizer::Lqr,
            },
            variant: match g.variant {
                VariantKind::PiGps => Variant::PiGps,
                VariantKind::PiGpsW => Variant::PiGpsW,
                VariantKind::Reps => Variant::Reps,
            },
            initial_noise: g.initial_noise,
            global_noise_boost: g.global_noise_boost,
            kl_penalty_scale: g.kl_penalty_scale,
            covariance_floor: g.covariance_floor,
            dynamics_prior_strength: g.dynamics_prior_strength,
            cost_fd_step: g.cost_fd_step,
            hidden: g.hidden.clone(),
            learning_rate: g.learning_rate,
            global_learning_rate: g.global_learning_rate,
            epochs: g.epochs,
            batch_size: g.batch_size,
            momentum: g.momentum,
            curriculum: g.curriculum.map(|c| Curriculum {
                start_fraction: c.start_fraction,
            }),
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn instance_distribution(&self) -> anyhow::Result<InstanceDistribution> {
        Ok(InstanceDistribution::new(
            self.instances.initial.iter().map(|&[a, b]| (a, b)).collect(),
            self.instances.target.iter().map(|&[a, b]| (a, b)).collect(),
        )?)
    }

    pub fn point_mass_env(&self) -> PointMassEnv {
        let mut env = PointMassEnv::default();
        if let Some(h) = self.environment.horizon {
            env.horizon = h;
        }
        env
    }

    pub fn latch_env(&self) -> LatchEnv {
        let mut env = LatchEnv::default();
        if let Some(h) = self.environment.horizon {
            env.horizon = h;
        }
        env
    }
}

/// Applies one `dotted.path=value` override to a parsed TOML tree. The
/// value is parsed as TOML (so numbers, booleans, and arrays work) and
/// falls back to a plain string.
fn apply_override(tree: &mut toml::Value, entry: &str) -> anyhow::Result<()> {
    let (path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| anyhow::anyhow!("override \"{entry}\" is not of the form key=value"))?;
    let path = path.trim();
    if path.is_empty() {
        anyhow::bail!("override \"{entry}\" has an empty key");
    }
    let value: toml::Value = match format!("x = {raw_value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").expect("key x was just parsed"),
        Err(_) => toml::Value::String(raw_value.to_owned()),
    };

    let mut node = tree;
    let segments: Vec<&str> = path.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow::anyhow!("override \"{path}\": \"{segment}\" is not a table"))?;
        node = table
            .entry((*segment).to_owned())
            .or_insert(toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| anyhow::anyhow!("override \"{path}\": parent is not a table"))?;
    table.insert(segments[segments.len() - 1].to_owned(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
schema = "pigps-experiment/v1"

[environment]
kind = "point_mass"

[instances]
initial = [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]
target = [[1.0, 1.0], [1.0, 1.0]]

[evaluation]
n_eval = 5
eval_seed = 7
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config = ExperimentConfig::from_toml(MINIMAL, &[]).unwrap();
        assert_eq!(config.gps.local_iterations, 2);
        assert_eq!(config.gps.samples_per_instance, 10);
        assert_eq!(config.run.seeds, vec![0]);
        assert_eq!(config.environment.kind, EnvKind::PointMass);
    }

    #[test]
    fn round_trip_is_identity() {
        let config = ExperimentConfig::from_toml(MINIMAL, &[]).unwrap();
        let text = config.to_toml().unwrap();
        let again = ExperimentConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(config, again);
    }

    #[test]
    fn overrides_patch_nested_keys_before_validation() {
        let config = ExperimentConfig::from_toml(
            MINIMAL,
            &[
                "gps.samples_per_instance=25".to_owned(),
                "gps.hidden=[16, 16]".to_owned(),
                "run.name=custom".to_owned(),
                "gps.variant=\"reps\"".to_owned(),
            ],
        )
        .unwrap();
        assert_eq!(config.gps.samples_per_instance, 25);
        assert_eq!(config.gps.hidden, vec![16, 16]);
        assert_eq!(config.run.name, "custom");
        assert_eq!(config.gps.variant, VariantKind::Reps);
    }

    #[test]
    fn validation_reports_every_violation_at_once() {
        let err = ExperimentConfig::from_toml(
            MINIMAL,
            &[
                "gps.samples_per_instance=1".to_owned(),
                "gps.epsilon=-2.0".to_owned(),
                "evaluation.n_eval=0".to_owned(),
            ],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("samples_per_instance"), "{err}");
        assert!(err.contains("epsilon"), "{err}");
        assert!(err.contains("n_eval"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("[evaluation]", "[evaluation]\ntypo_field = 3");
        assert!(ExperimentConfig::from_toml(&bad, &[]).is_err());
    }

    #[test]
    fn lqr_multi_instance_is_rejected() {
        let err = ExperimentConfig::from_toml(
            MINIMAL,
            &[
                "gps.optimizer=\"lqr\"".to_owned(),
                "gps.instances_per_iteration=3".to_owned(),
            ],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("lqr"), "{err}");
    }

    #[test]
    fn string_override_without_quotes_falls_back_to_string() {
        let config = ExperimentConfig::from_toml(MINIMAL, &["run.name=plain".to_owned()]).unwrap();
        assert_eq!(config.run.name, "plain");
    }
}
