//! The outer loop tying everything together: local-sampling initialization
//! on a fixed instance set, then on-policy training where each iteration
//! draws fresh task instances, rolls out the noisy network policy, takes
//! one KL-bounded update step per instance, and distills the
//! updated controllers back into the network.

// Resolves float math in no_std builds; test builds link std and shadow it.
#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::controllers::{trajectory_kl, LinGaussPolicy, Policy, SampleSet, DEFAULT_COVARIANCE_FLOOR};
use crate::envs::{rollout, rollout_mean, Environment, InstanceDistribution};
use crate::error::{Error, Result};
use crate::lqr::{expand_cost, fit_dynamics, lqr_backward_kl, LinearDynamics};
use crate::mlp::{
    distillation_set, reps_train, train_supervised, update_noise, weighted_action_noise,
    weighted_distillation_set, MlpPolicy, SupervisedSet, TrainConfig,
};
use crate::pi2::{pi2_update, KlBound, KlPenalty};
use crate::rng::{
    derive_rng, derive_seed, STREAM_EVAL, STREAM_INIT, STREAM_INSTANCE, STREAM_ROLLOUT,
    STREAM_TRAIN,
};

/// Position gain of the fixed tracking feedback; the velocity gain is
/// `2·√10` so the closed loop is critically damped on a unit mass.
pub const TRACKING_POSITION_GAIN: f64 = 10.0;

/// Fraction of the horizon the scripted reference takes to reach its
/// target before holding.
pub const SCRIPTED_REACH_FRACTION: f64 = 0.6;

/// Which local optimizer improves the per-instance controllers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalOptimizer {
    /// Sample-reweighting path-integral update.
    Pi2,
    /// Backward pass on fitted linear dynamics.
    Lqr,
}

/// How updated controls are fed back into the network policy during
/// on-policy iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Fit local controllers, distill their means with unit sample weight.
    PiGps,
    /// Fit local controllers, weight each sample by its softmax probability.
    PiGpsW,
    /// No local fit: regress onto raw sampled actions, probability-weighted.
    Reps,
}

/// Linear widening of the instance distribution over the on-policy phase,
/// from `start_fraction` of the full bounds up to the full bounds.
#[derive(Clone, Copy, Debug)]
pub struct Curriculum {
    /// Fraction of the instance bounds used at the first on-policy
    /// iteration, in (0, 1].
    pub start_fraction: f64,
}

/// Everything the outer loop needs to run.
#[derive(Clone, Debug)]
pub struct GpsConfig {
    /// Iterations of local-policy sampling on the fixed instance set.
    pub local_iterations: usize,
    /// Iterations of on-policy sampling on fresh instances.
    pub global_iterations: usize,
    /// Instances per iteration (and size of the fixed initial set).
    pub instances_per_iteration: usize,
    /// Rollouts per instance per iteration.
    pub samples_per_instance: usize,
    /// Per-timestep KL budget for the local update.
    pub kl_bound: KlBound,
    /// Local optimizer choice.
    pub optimizer: LocalOptimizer,
    /// Distillation variant for the on-policy phase.
    pub variant: Variant,
    /// Initial exploration noise standard deviation.
    pub initial_noise: f64,
    /// Multiplier on the noise standard deviation when switching from
    /// local sampling to on-policy sampling.
    pub global_noise_boost: f64,
    /// KL-penalty weight during initialization, relative to the mean
    /// per-step cost magnitude.
    pub kl_penalty_scale: f64,
    /// Smallest eigenvalue allowed in updated policy covariances.
    pub covariance_floor: f64,
    /// Pseudo-sample weight shrinking each dynamics fit toward the
    /// previous iteration's fit.
    pub dynamics_prior_strength: f64,
    /// Finite-difference step for the cost expansion.
    pub cost_fd_step: f64,
    /// Hidden layer widths of the network policy.
    pub hidden: Vec<usize>,
    /// Learning rate during initialization.
    pub learning_rate: f64,
    /// Learning rate during on-policy iterations.
    pub global_learning_rate: f64,
    /// Training epochs per distillation.
    pub epochs: usize,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Momentum coefficient.
    pub momentum: f64,
    /// Optional widening schedule for the instance distribution.
    pub curriculum: Option<Curriculum>,
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
}

impl Default for GpsConfig {
    fn default() -> Self {
        Self {
            local_iterations: 2,
            global_iterations: 5,
            instances_per_iteration: 5,
            samples_per_instance: 10,
            kl_bound: KlBound::new(1.0).unwrap(),
            optimizer: LocalOptimizer::Pi2,
            variant: Variant::PiGps,
            initial_noise: 0.5,
            global_noise_boost: 1.5,
            kl_penalty_scale: 0.1,
            covariance_floor: DEFAULT_COVARIANCE_FLOOR,
            dynamics_prior_strength: 1.0,
            cost_fd_step: 1e-4,
            hidden: alloc::vec![40, 40],
            learning_rate: 5e-3,
            global_learning_rate: 1e-3,
            epochs: 50,
            batch_size: 64,
            momentum: 0.9,
            curriculum: None,
            seed: 0,
        }
    }
}

impl GpsConfig {
    /// Checks every field, collecting the first violation as an error.
    pub fn validate(&self) -> Result<()> {
        fn bad(name: &'static str, reason: alloc::string::String) -> Error {
            Error::InvalidParameter { name, reason }
        }
        if self.instances_per_iteration == 0 {
            return Err(bad("instances_per_iteration", alloc::format!("must be ≥ 1")));
        }
        if self.samples_per_instance < 2 {
            return Err(bad(
                "samples_per_instance",
                alloc::format!("must be ≥ 2, got {}", self.samples_per_instance),
            ));
        }
        if !(self.initial_noise > 0.0) {
            return Err(bad(
                "initial_noise",
                alloc::format!("must be positive, got {}", self.initial_noise),
            ));
        }
        if !(self.global_noise_boost > 0.0) {
            return Err(bad(
                "global_noise_boost",
                alloc::format!("must be positive, got {}", self.global_noise_boost),
            ));
        }
        if !(self.kl_penalty_scale >= 0.0) {
            return Err(bad(
                "kl_penalty_scale",
                alloc::format!("must be nonnegative, got {}", self.kl_penalty_scale),
            ));
        }
        if !(self.covariance_floor > 0.0) {
            return Err(bad(
                "covariance_floor",
                alloc::format!("must be positive, got {}", self.covariance_floor),
            ));
        }
        if !(self.dynamics_prior_strength >= 0.0) {
            return Err(bad(
                "dynamics_prior_strength",
                alloc::format!("must be nonnegative, got {}", self.dynamics_prior_strength),
            ));
        }
        if !(self.cost_fd_step > 0.0) {
            return Err(bad(
                "cost_fd_step",
                alloc::format!("must be positive, got {}", self.cost_fd_step),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.global_learning_rate > 0.0) {
            return Err(bad(
                "learning_rate",
                alloc::format!(
                    "rates must be positive, got {} and {}",
                    self.learning_rate,
                    self.global_learning_rate
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", alloc::format!("must be ≥ 1")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad(
                "momentum",
                alloc::format!("must be in [0, 1), got {}", self.momentum),
            ));
        }
        if let Some(c) = self.curriculum {
            if !(c.start_fraction > 0.0 && c.start_fraction <= 1.0) {
                return Err(bad(
                    "curriculum.start_fraction",
                    alloc::format!("must be in (0, 1], got {}", c.start_fraction),
                ));
            }
        }
        if self.optimizer == LocalOptimizer::Lqr
            && (self.global_iterations > 0 || self.instances_per_iteration != 1)
        {
            return Err(bad(
                "optimizer",
                alloc::format!(
                    "the LQR optimizer supports only single-instance local sampling \
                     (instances_per_iteration 1, global_iterations 0)"
                ),
            ));
        }
        Ok(())
    }

    fn train_config(&self, iteration: usize, global_phase: bool) -> TrainConfig {
        TrainConfig {
            learning_rate: if global_phase {
                self.global_learning_rate
            } else {
                self.learning_rate
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed: derive_seed(self.seed, &[STREAM_TRAIN, iteration as u64 + 1]),
        }
    }
}

/// Per-instance numbers recorded each iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceMetrics {
    /// Stable identifier of the instance within the run.
    pub instance_id: u64,
    /// Mean total trajectory cost over the instance's rollouts.
    pub mean_cost: f64,
    /// Fraction of the instance's rollouts that met the success predicate.
    pub success_rate: f64,
    /// Smallest per-timestep temperature of the update.
    pub min_eta: f64,
    /// Largest per-timestep temperature of the update.
    pub max_eta: f64,
    /// Estimated trajectory KL of the updated controller from the network
    /// policy at the sampled states.
    pub kl_to_global: f64,
}

/// One iteration's metrics across its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// Zero-based iteration index, counted across both phases.
    pub iteration: usize,
    /// One entry per instance, in sampling order.
    pub instances: Vec<InstanceMetrics>,
}

/// Constant full-state feedback that tracks position and velocity with
/// critically damped gains, ignoring any extra state dimensions.
pub fn tracking_gains(state_dim: usize, action_dim: usize) -> DMatrix<f64> {
    let kp = TRACKING_POSITION_GAIN;
    let kv = 2.0 * kp.sqrt();
    let mut gains = DMatrix::zeros(action_dim, state_dim);
    for a in 0..action_dim {
        if a < state_dim {
            gains[(a, a)] = -kp;
        }
        if action_dim + a < state_dim {
            gains[(a, action_dim + a)] = -kv;
        }
    }
    gains
}

fn minimum_jerk(tau: f64) -> (f64, f64, f64) {
    let t2 = tau * tau;
    let t3 = t2 * tau;
    let t4 = t3 * tau;
    let t5 = t4 * tau;
    (
        10.0 * t3 - 15.0 * t4 + 6.0 * t5,
        30.0 * t2 - 60.0 * t3 + 30.0 * t4,
        60.0 * tau - 180.0 * t2 + 120.0 * t3,
    )
}

/// Stand-in for a demonstration: a controller whose feedforward traces a
/// minimum-jerk path from the start position to the environment's scripted
/// target, reaching it at [`SCRIPTED_REACH_FRACTION`] of the horizon and
/// holding, with the fixed tracking feedback and isotropic noise.
pub fn scripted_init_policy<E: Environment>(env: &E, noise_std: f64) -> Result<LinGaussPolicy> {
    if !(noise_std > 0.0) {
        return Err(Error::InvalidParameter {
            name: "noise_std",
            reason: alloc::format!("must be positive, got {noise_std}"),
        });
    }
    let dx = env.state_dim();
    let du = env.action_dim();
    let horizon = env.horizon();
    let gains = tracking_gains(dx, du);
    let start = env.initial_state().rows(0, du).into_owned();
    let target = env.scripted_target();
    let delta = &target - &start;
    let reach_time = SCRIPTED_REACH_FRACTION * horizon as f64 * env.dt();
    let kp = TRACKING_POSITION_GAIN;
    let kv = 2.0 * kp.sqrt();

    let mut feedforwards = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let time = t as f64 * env.dt();
        let tau = (time / reach_time).min(1.0);
        let (s, ds, dds) = if tau < 1.0 {
            minimum_jerk(tau)
        } else {
            (1.0, 0.0, 0.0)
        };
        let r = &start + &delta * s;
        let dr = &delta * (ds / reach_time);
        let ddr = &delta * (dds / (reach_time * reach_time));
        feedforwards.push(ddr + r * kp + dr * kv);
    }
    let covariance = DMatrix::identity(du, du) * (noise_std * noise_std);
    LinGaussPolicy::new(
        alloc::vec![gains; horizon],
        feedforwards,
        alloc::vec![covariance; horizon],
    )
}

/// Noiseless evaluation outcome.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Mean total cost across the evaluation instances.
    pub mean_cost: f64,
    /// Fraction of instances whose mean-action rollout succeeded.
    pub success_rate: f64,
    /// Per-instance (success, total cost) in draw order.
    pub outcomes: Vec<(bool, f64)>,
}

/// Rolls the policy's mean actions out on `n_eval` instances drawn from
/// `distribution`, deterministically per seed.
pub fn evaluate<E: Environment, P: Policy + ?Sized>(
    policy: &P,
    base_env: &E,
    distribution: &InstanceDistribution,
    n_eval: usize,
    seed: u64,
) -> Result<Evaluation> {
    if n_eval == 0 {
        return Err(Error::InvalidParameter {
            name: "n_eval",
            reason: alloc::format!("must be ≥ 1"),
        });
    }
    let mut rng = derive_rng(seed, &[STREAM_EVAL]);
    let mut outcomes = Vec::with_capacity(n_eval);
    let mut cost_sum = 0.0;
    let mut successes = 0usize;
    for _ in 0..n_eval {
        let instance = distribution.sample_instance(&mut rng);
        let env = base_env.with_instance(&instance)?;
        let trajectory = rollout_mean(&env, policy)?;
        let success = env.is_success(&trajectory);
        let cost = trajectory.total_cost();
        successes += success as usize;
        cost_sum += cost;
        outcomes.push((success, cost));
    }
    Ok(Evaluation {
        mean_cost: cost_sum / n_eval as f64,
        success_rate: successes as f64 / n_eval as f64,
        outcomes,
    })
}

/// The outer loop's state: the network policy, the per-instance local
/// controllers of the initialization phase, and the records so far.
/// [`GpsRun::step`] advances one iteration at a time so callers can flush
/// metrics and checkpoints between iterations.
pub struct GpsRun<E: Environment> {
    config: GpsConfig,
    base_env: E,
    distribution: InstanceDistribution,
    global: MlpPolicy,
    feedback_gains: DMatrix<f64>,
    init_envs: Vec<E>,
    locals: Vec<LinGaussPolicy>,
    dynamics_fits: Vec<Option<LinearDynamics>>,
    records: Vec<IterationRecord>,
    iteration: usize,
    next_instance_id: u64,
}

struct InstanceStep {
    local: Option<LinGaussPolicy>,
    etas: (f64, f64),
    kl_to_global: f64,
}

impl<E: Environment> GpsRun<E> {
    /// Validates the config, draws the fixed instance set, scripts its
    /// local controllers, and initializes the network policy.
    pub fn new(config: GpsConfig, base_env: E, distribution: InstanceDistribution) -> Result<Self> {
        config.validate()?;
        let mut init_envs = Vec::new();
        let mut locals = Vec::new();
        let mut next_instance_id = 0;
        if config.local_iterations > 0 {
            let mut rng = derive_rng(config.seed, &[STREAM_INIT]);
            for _ in 0..config.instances_per_iteration {
                let env = base_env.with_instance(&distribution.sample_instance(&mut rng))?;
                locals.push(scripted_init_policy(&env, config.initial_noise)?);
                init_envs.push(env);
                next_instance_id += 1;
            }
        }
        let global = MlpPolicy::new(
            base_env.state_dim(),
            &config.hidden,
            base_env.action_dim(),
            base_env.horizon(),
            config.initial_noise,
            derive_seed(config.seed, &[STREAM_INIT, 1]),
        )?;
        let feedback_gains = tracking_gains(base_env.state_dim(), base_env.action_dim());
        let dynamics_fits = alloc::vec![None; locals.len()];
        Ok(Self {
            config,
            base_env,
            distribution,
            global,
            feedback_gains,
            init_envs,
            locals,
            dynamics_fits,
            records: Vec::new(),
            iteration: 0,
            next_instance_id,
        })
    }

    /// The network policy in its current state.
    pub fn global_policy(&self) -> &MlpPolicy {
        &self.global
    }

    /// The local controllers of the initialization instances.
    pub fn local_policies(&self) -> &[LinGaussPolicy] {
        &self.locals
    }

    /// The environments of the initialization instances.
    pub fn init_envs(&self) -> &[E] {
        &self.init_envs
    }

    /// All records so far, one per completed iteration.
    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Total iterations the run will execute.
    pub fn total_iterations(&self) -> usize {
        self.config.local_iterations + self.config.global_iterations
    }

    /// Runs every remaining initialization iteration.
    pub fn run_local_phase(&mut self) -> Result<()> {
        while self.iteration < self.config.local_iterations {
            self.step()?;
        }
        Ok(())
    }

    /// Runs every remaining iteration of both phases.
    pub fn run_to_completion(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }

    /// Advances one iteration and returns its record, or `None` when the
    /// configured iterations are exhausted.
    pub fn step(&mut self) -> Result<Option<&IterationRecord>> {
        if self.iteration >= self.total_iterations() {
            return Ok(None);
        }
        if self.iteration < self.config.local_iterations {
            self.local_step()?;
        } else {
            if self.iteration == self.config.local_iterations && self.config.local_iterations > 0 {
                let boost = self.config.global_noise_boost;
                self.global = self.global.with_scaled_noise(boost * boost);
            }
            self.global_step()?;
        }
        self.iteration += 1;
        Ok(self.records.last())
    }

    fn sample_rollouts<P: Policy + ?Sized>(
        &self,
        env: &E,
        policy: &P,
        instance_index: usize,
    ) -> Result<SampleSet> {
        let mut trajectories = Vec::with_capacity(self.config.samples_per_instance);
        for i in 0..self.config.samples_per_instance {
            let mut rng = derive_rng(
                self.config.seed,
                &[
                    STREAM_ROLLOUT,
                    self.iteration as u64,
                    instance_index as u64,
                    i as u64,
                ],
            );
            trajectories.push(rollout(env, policy, &mut rng)?);
        }
        SampleSet::new(trajectories)
    }

    fn local_step(&mut self) -> Result<()> {
        let iteration = self.iteration;
        let mut sample_sets = Vec::with_capacity(self.locals.len());
        let mut steps = Vec::with_capacity(self.locals.len());
        for m in 0..self.locals.len() {
            let env = self.init_envs[m].clone();
            let samples = self.sample_rollouts(&env, &self.locals[m], m)?;
            let step = match self.config.optimizer {
                LocalOptimizer::Pi2 => {
                    let penalty = KlPenalty {
                        weight: self.config.kl_penalty_scale * mean_step_cost(&samples),
                        reference: &self.global,
                    };
                    let update = pi2_update(
                        &self.locals[m],
                        &samples,
                        self.config.kl_bound,
                        self.config.covariance_floor,
                        Some(penalty),
                    )?;
                    InstanceStep {
                        local: Some(update.policy),
                        etas: eta_range(update.weights.etas()),
                        kl_to_global: 0.0,
                    }
                }
                LocalOptimizer::Lqr => self.lqr_step(m, &env, &samples),
            };
            sample_sets.push(samples);
            steps.push(step);
        }

        let mut instances = Vec::with_capacity(steps.len());
        for (m, step) in steps.iter_mut().enumerate() {
            if let Some(local) = step.local.take() {
                self.locals[m] = local;
            }
            step.kl_to_global = trajectory_kl(&self.locals[m], &self.global, &sample_sets[m])?;
            instances.push(instance_metrics(
                m as u64,
                &sample_sets[m],
                &self.init_envs[m],
                step,
            ));
        }

        let data = distillation_set(&self.locals, &sample_sets)?;
        let trained = self.distill(&data, iteration, false)?;
        self.global = update_noise(&trained, &self.locals)?;
        self.records.push(IterationRecord {
            iteration,
            instances,
        });
        Ok(())
    }

    fn lqr_step(&mut self, m: usize, env: &E, samples: &SampleSet) -> InstanceStep {
        let previous = &self.locals[m];
        let result = fit_dynamics(
            samples,
            self.config.dynamics_prior_strength,
            self.dynamics_fits[m].as_ref(),
        )
        .and_then(|dynamics| {
            let cost = expand_cost(env, samples, self.config.cost_fd_step)?;
            let step = lqr_backward_kl(&dynamics, &cost, previous, self.config.kl_bound)?;
            Ok((dynamics, step))
        });
        match result {
            Ok((dynamics, step)) => {
                self.dynamics_fits[m] = Some(dynamics);
                InstanceStep {
                    local: Some(step.policy),
                    etas: (step.eta, step.eta),
                    kl_to_global: 0.0,
                }
            }
            // An infeasible backward pass keeps the previous controller so
            // the run continues; the zeroed temperature marks the skip.
            Err(_) => InstanceStep {
                local: None,
                etas: (0.0, 0.0),
                kl_to_global: 0.0,
            },
        }
    }

    fn global_step(&mut self) -> Result<()> {
        let iteration = self.iteration;
        let global_index = iteration - self.config.local_iterations;
        let distribution = self.curriculum_distribution(global_index);

        let mut rng = derive_rng(self.config.seed, &[STREAM_INSTANCE, iteration as u64]);
        let mut envs = Vec::with_capacity(self.config.instances_per_iteration);
        let mut ids = Vec::with_capacity(self.config.instances_per_iteration);
        for _ in 0..self.config.instances_per_iteration {
            envs.push(
                self.base_env
                    .with_instance(&distribution.sample_instance(&mut rng))?,
            );
            ids.push(self.next_instance_id);
            self.next_instance_id += 1;
        }

        let mut sample_sets = Vec::with_capacity(envs.len());
        for (m, env) in envs.iter().enumerate() {
            sample_sets.push(self.sample_rollouts(env, &self.global, m)?);
        }

        let train = self.config.train_config(iteration, true);
        let mut instances = Vec::with_capacity(envs.len());
        match self.config.variant {
            Variant::Reps => {
                let (outcome, tables) =
                    reps_train(&self.global, &sample_sets, self.config.kl_bound, &train)?;
                let trained = weighted_action_noise(
                    &outcome.policy,
                    &sample_sets,
                    &tables,
                    self.config.covariance_floor,
                )?;
                for ((samples, table), (id, env)) in
                    sample_sets.iter().zip(&tables).zip(ids.iter().zip(&envs))
                {
                    let step = InstanceStep {
                        local: None,
                        etas: eta_range(table.etas()),
                        kl_to_global: 0.0,
                    };
                    instances.push(instance_metrics(*id, samples, env, &step));
                }
                self.global = trained;
            }
            Variant::PiGps | Variant::PiGpsW => {
                let scaffold = self.sampler_scaffold()?;
                let mut locals = Vec::with_capacity(envs.len());
                let mut tables = Vec::with_capacity(envs.len());
                for ((samples, id), env) in sample_sets.iter().zip(&ids).zip(&envs) {
                    let update = pi2_update(
                        &scaffold,
                        samples,
                        self.config.kl_bound,
                        self.config.covariance_floor,
                        None,
                    )?;
                    let step = InstanceStep {
                        local: None,
                        etas: eta_range(update.weights.etas()),
                        kl_to_global: trajectory_kl(&update.policy, &self.global, samples)?,
                    };
                    instances.push(instance_metrics(*id, samples, env, &step));
                    locals.push(update.policy);
                    tables.push(update.weights);
                }
                let data = match self.config.variant {
                    Variant::PiGps => distillation_set(&locals, &sample_sets)?,
                    _ => weighted_distillation_set(&locals, &sample_sets, &tables)?,
                };
                let trained = self.distill(&data, iteration, true)?;
                self.global = update_noise(&trained, &locals)?;
            }
        }

        self.records.push(IterationRecord {
            iteration,
            instances,
        });
        Ok(())
    }

    /// Distills `data` into the network. The configured learning rate is
    /// divided by the set's mean precision scale so the parameter step
    /// stays the same size however sharp the local covariances get, and a
    /// diverging run is retried at a fifth of the rate.
    fn distill(&self, data: &SupervisedSet, iteration: usize, global_phase: bool) -> Result<MlpPolicy> {
        let mut config = self.config.train_config(iteration, global_phase);
        let du = self.base_env.action_dim() as f64;
        let mean_trace =
            data.points.iter().map(|p| p.precision.trace()).sum::<f64>() / data.len().max(1) as f64;
        config.learning_rate /= (mean_trace / du).max(1.0);
        for _ in 0..3 {
            match train_supervised(&self.global, data, &config) {
                Ok(outcome) => return Ok(outcome.policy),
                Err(Error::TrainingDiverged { .. }) => config.learning_rate /= 5.0,
                Err(other) => return Err(other),
            }
        }
        train_supervised(&self.global, data, &config).map(|o| o.policy)
    }

    /// Carrier for the network samples' update: the fixed tracking
    /// feedback with placeholder feedforwards and covariances, which the
    /// update replaces wholesale.
    fn sampler_scaffold(&self) -> Result<LinGaussPolicy> {
        let du = self.base_env.action_dim();
        LinGaussPolicy::new(
            alloc::vec![self.feedback_gains.clone(); self.base_env.horizon()],
            alloc::vec![DVector::zeros(du); self.base_env.horizon()],
            alloc::vec![DMatrix::identity(du, du); self.base_env.horizon()],
        )
    }

    fn curriculum_distribution(&self, global_index: usize) -> InstanceDistribution {
        match self.config.curriculum {
            None => self.distribution.clone(),
            Some(c) => {
                let total = self.config.global_iterations;
                let fraction = if total > 1 {
                    c.start_fraction
                        + (1.0 - c.start_fraction) * global_index as f64 / (total - 1) as f64
                } else {
                    1.0
                };
                self.distribution.scaled(fraction)
            }
        }
    }
}

fn mean_step_cost(samples: &SampleSet) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for trajectory in samples.trajectories() {
        for &cost in &trajectory.costs {
            total += cost.abs();
            count += 1;
        }
    }
    total / count.max(1) as f64
}

fn eta_range(etas: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &eta in etas {
        lo = lo.min(eta);
        hi = hi.max(eta);
    }
    (lo, hi)
}

fn instance_metrics<E: Environment>(
    instance_id: u64,
    samples: &SampleSet,
    env: &E,
    step: &InstanceStep,
) -> InstanceMetrics {
    let successes: usize = samples
        .trajectories()
        .iter()
        .map(|t| env.is_success(t) as usize)
        .sum();
    InstanceMetrics {
        instance_id,
        mean_cost: samples.mean_cost(),
        success_rate: successes as f64 / samples.len() as f64,
        min_eta: step.etas.0,
        max_eta: step.etas.1,
        kl_to_global: step.kl_to_global,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Instance, PointMassEnv};
    use alloc::vec;
    use approx::assert_relative_eq;

    fn point_mass_setup() -> (PointMassEnv, InstanceDistribution) {
        let env = PointMassEnv::default();
        let instance = Instance {
            initial_state: env.initial_state().clone(),
            target: env.scripted_target(),
        };
        let dist = InstanceDistribution::degenerate(&instance).unwrap();
        (env, dist)
    }

    fn smoke_config(seed: u64) -> GpsConfig {
        GpsConfig {
            local_iterations: 1,
            global_iterations: 1,
            instances_per_iteration: 2,
            samples_per_instance: 4,
            hidden: vec![8],
            epochs: 3,
            seed,
            ..GpsConfig::default()
        }
    }

    #[test]
    fn tracking_gains_hit_position_and_velocity_blocks() {
        let gains = tracking_gains(7, 2);
        assert_eq!(gains.nrows(), 2);
        assert_eq!(gains.ncols(), 7);
        assert_relative_eq!(gains[(0, 0)], -10.0);
        assert_relative_eq!(gains[(1, 1)], -10.0);
        assert_relative_eq!(gains[(0, 2)], -2.0 * 10.0_f64.sqrt());
        assert_relative_eq!(gains[(1, 3)], -2.0 * 10.0_f64.sqrt());
        assert_eq!(gains.column(4).amax(), 0.0);
        assert_eq!(gains.column(5).amax(), 0.0);
        assert_eq!(gains.column(6).amax(), 0.0);
    }

    #[test]
    fn minimum_jerk_endpoints() {
        let (s0, v0, a0) = minimum_jerk(0.0);
        let (s1, v1, a1) = minimum_jerk(1.0);
        assert_relative_eq!(s0, 0.0);
        assert_relative_eq!(v0, 0.0);
        assert_relative_eq!(a0, 0.0);
        assert_relative_eq!(s1, 1.0);
        assert_relative_eq!(v1, 0.0, epsilon = 1e-12);
        assert_relative_eq!(a1, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn scripted_policy_reaches_the_point_mass_goal() {
        let env = PointMassEnv::default();
        let policy = scripted_init_policy(&env, 0.1).unwrap();
        let trajectory = rollout_mean(&env, &policy).unwrap();
        assert!(env.is_success(&trajectory));
    }

    #[test]
    fn zero_iterations_leave_the_network_untouched() {
        let (env, dist) = point_mass_setup();
        let config = GpsConfig {
            local_iterations: 0,
            global_iterations: 0,
            ..smoke_config(3)
        };
        let mut run = GpsRun::new(config.clone(), env, dist).unwrap();
        let before = run.global_policy().clone();
        assert!(run.step().unwrap().is_none());
        assert!(run.records().is_empty());
        for (a, b) in before
            .layer_weights()
            .iter()
            .zip(run.global_policy().layer_weights())
        {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn records_are_seed_deterministic() {
        let (env, dist) = point_mass_setup();
        let mut first = GpsRun::new(smoke_config(7), env.clone(), dist.clone()).unwrap();
        first.run_to_completion().unwrap();
        let mut second = GpsRun::new(smoke_config(7), env, dist).unwrap();
        second.run_to_completion().unwrap();
        assert_eq!(first.records(), second.records());
    }

    #[test]
    fn different_seeds_give_different_rollouts() {
        let (env, dist) = point_mass_setup();
        let mut first = GpsRun::new(smoke_config(1), env.clone(), dist.clone()).unwrap();
        first.run_to_completion().unwrap();
        let mut second = GpsRun::new(smoke_config(2), env, dist).unwrap();
        second.run_to_completion().unwrap();
        assert_ne!(
            first.records()[0].instances[0].mean_cost,
            second.records()[0].instances[0].mean_cost
        );
    }

    #[test]
    fn instance_ids_continue_across_phases() {
        let (env, dist) = point_mass_setup();
        let mut run = GpsRun::new(smoke_config(5), env, dist).unwrap();
        run.run_to_completion().unwrap();
        let local_ids: Vec<u64> = run.records()[0]
            .instances
            .iter()
            .map(|i| i.instance_id)
            .collect();
        let global_ids: Vec<u64> = run.records()[1]
            .instances
            .iter()
            .map(|i| i.instance_id)
            .collect();
        assert_eq!(local_ids, vec![0, 1]);
        assert_eq!(global_ids, vec![2, 3]);
    }

    #[test]
    fn local_phase_improves_the_scripted_controller() {
        let (env, dist) = point_mass_setup();
        let config = GpsConfig {
            local_iterations: 4,
            global_iterations: 0,
            instances_per_iteration: 1,
            samples_per_instance: 20,
            initial_noise: 0.8,
            hidden: vec![8],
            epochs: 3,
            ..GpsConfig::default()
        };
        let mut run = GpsRun::new(config, env, dist).unwrap();
        run.run_to_completion().unwrap();
        let first = run.records().first().unwrap().instances[0].mean_cost;
        let last = run.records().last().unwrap().instances[0].mean_cost;
        assert!(last < first, "cost went from {first} to {last}");
    }

    #[test]
    fn evaluation_is_deterministic_and_recountable() {
        let (env, dist) = point_mass_setup();
        let policy = scripted_init_policy(&env, 0.1).unwrap();
        let a = evaluate(&policy, &env, &dist, 5, 42).unwrap();
        let b = evaluate(&policy, &env, &dist, 5, 42).unwrap();
        assert_eq!(a.outcomes, b.outcomes);
        let recount = a.outcomes.iter().filter(|(s, _)| *s).count() as f64 / 5.0;
        assert_relative_eq!(a.success_rate, recount);
        assert_relative_eq!(a.success_rate, 1.0);
    }

    #[test]
    fn lqr_rejects_multi_instance_configs() {
        let config = GpsConfig {
            optimizer: LocalOptimizer::Lqr,
            ..smoke_config(0)
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn curriculum_widens_linearly() {
        let (env, dist) = point_mass_setup();
        let config = GpsConfig {
            curriculum: Some(Curriculum {
                start_fraction: 0.25,
            }),
            global_iterations: 4,
            ..smoke_config(0)
        };
        let run = GpsRun::new(config, env, dist).unwrap();
        let d0 = run.curriculum_distribution(0);
        let d3 = run.curriculum_distribution(3);
        let full = run.distribution.clone();
        let width = |d: &InstanceDistribution, i: usize| {
            let (lo, hi) = d.initial_bounds()[i];
            hi - lo
        };
        for i in 0..4 {
            assert_relative_eq!(width(&d0, i), 0.25 * width(&full, i), epsilon = 1e-12);
            assert_relative_eq!(width(&d3, i), width(&full, i), epsilon = 1e-12);
        }
    }
}
