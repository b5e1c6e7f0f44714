//! The neural global policy: a fully-connected ReLU network for the action
//! mean plus a time-varying Gaussian noise covariance, trained by
//! precision-weighted regression onto local-policy actions.
//!
//! With Gaussian conditionals and the network covariance held fixed, the
//! KL distillation objective reduces (up to additive constants) to the
//! quadratic `Σ w_i (f(x_i) - μ_i)ᵀ Λ_i (f(x_i) - μ_i)`, which is what the
//! trainer minimizes by mini-batch gradient descent with momentum.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;

// Resolves float math in no_std builds; test builds link std and shadow it.
#[allow(unused_imports)]
use num_traits::Float;

use crate::controllers::{LinGaussPolicy, Policy, SampleSet};
use crate::error::{Error, Result};
use crate::linalg::{check_dim, floor_spd, inverse_spd, symmetrize};
use crate::pi2::{cost_to_go, solve_weights, KlBound, WeightTable};
use crate::rng::{derive_rng, STREAM_TRAIN};

/// Fully-connected policy: ReLU hidden layers, linear output, and a
/// per-timestep action noise covariance.
#[derive(Clone, Debug)]
pub struct MlpPolicy {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    noise_covs: Vec<DMatrix<f64>>,
}

impl MlpPolicy {
    /// Fresh network with layer sizes `state_dim → hidden... → action_dim`,
    /// uniform Xavier weight initialization in `±√(6/(fan_in+fan_out))`,
    /// zero biases, and isotropic noise `noise_std² I` at every timestep.
    pub fn new(
        state_dim: usize,
        hidden: &[usize],
        action_dim: usize,
        horizon: usize,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 || horizon == 0 {
            return Err(Error::InvalidParameter {
                name: "network dimensions",
                reason: alloc::format!(
                    "state_dim {state_dim}, action_dim {action_dim}, horizon {horizon} must all be nonzero"
                ),
            });
        }
        if !(noise_std > 0.0) {
            return Err(Error::InvalidParameter {
                name: "noise_std",
                reason: alloc::format!("must be positive, got {noise_std}"),
            });
        }
        let mut sizes = alloc::vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let mut rng = derive_rng(seed, &[STREAM_TRAIN, 0]);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| {
                use rand::Rng;
                rng.random_range(-limit..limit)
            });
            weights.push(w);
            biases.push(DVector::zeros(fan_out));
        }
        let noise = DMatrix::identity(action_dim, action_dim) * (noise_std * noise_std);
        Ok(Self {
            weights,
            biases,
            noise_covs: alloc::vec![noise; horizon],
        })
    }

    /// Rebuilds a policy from explicit parameters (checkpoint reload).
    pub fn from_parts(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        noise_covs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if weights.is_empty() || noise_covs.is_empty() {
            return Err(Error::InvalidParameter {
                name: "network parameters",
                reason: alloc::format!("need at least one layer and one timestep"),
            });
        }
        check_dim("bias count", weights.len(), biases.len())?;
        for (w, b) in weights.iter().zip(&biases) {
            check_dim("bias length", w.nrows(), b.len())?;
        }
        for pair in weights.windows(2) {
            check_dim("layer chaining", pair[0].nrows(), pair[1].ncols())?;
        }
        let action_dim = weights.last().map(|w| w.nrows()).unwrap_or(0);
        for c in &noise_covs {
            check_dim("noise covariance rows", action_dim, c.nrows())?;
            check_dim("noise covariance cols", action_dim, c.ncols())?;
        }
        Ok(Self {
            weights,
            biases,
            noise_covs,
        })
    }

    /// Per-layer weight matrices.
    pub fn layer_weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    /// Per-layer bias vectors.
    pub fn layer_biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    /// Per-timestep noise covariances.
    pub fn noise_covariances(&self) -> &[DMatrix<f64>] {
        &self.noise_covs
    }

    /// The same network with every noise covariance multiplied by
    /// `factor` (the standard deviation scales by `√factor`).
    pub fn with_scaled_noise(&self, factor: f64) -> Self {
        let mut scaled = self.clone();
        for c in &mut scaled.noise_covs {
            *c *= factor;
        }
        scaled
    }

    /// Deterministic network output for state `x`.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut a = x.clone();
        let last = self.weights.len() - 1;
        for (j, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = w * a + b;
            if j < last {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        a
    }

    /// Forward pass keeping every post-activation (index 0 is the input),
    /// for backpropagation.
    fn forward_trace(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut activations = alloc::vec![x.clone()];
        let last = self.weights.len() - 1;
        for (j, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = w * activations.last().unwrap() + b;
            if j < last {
                a.apply(|v| *v = v.max(0.0));
            }
            activations.push(a);
        }
        activations
    }
}

impl Policy for MlpPolicy {
    fn state_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    fn action_dim(&self) -> usize {
        self.weights.last().map(|w| w.nrows()).unwrap_or(0)
    }

    fn horizon(&self) -> usize {
        self.noise_covs.len()
    }

    fn mean_action(&self, _t: usize, x: &DVector<f64>) -> DVector<f64> {
        self.forward(x)
    }

    fn covariance(&self, t: usize) -> DMatrix<f64> {
        self.noise_covs[t].clone()
    }
}

/// One regression target: match the network output at `state` to
/// `target_mean` under the metric `precision`, scaled by `weight`.
#[derive(Clone, Debug)]
pub struct SupervisedPoint {
    /// Input state.
    pub state: DVector<f64>,
    /// Desired mean action.
    pub target_mean: DVector<f64>,
    /// Positive-definite error metric Λ.
    pub precision: DMatrix<f64>,
    /// Nonnegative sample weight.
    pub weight: f64,
}

/// A batch of supervised regression targets.
#[derive(Clone, Debug, Default)]
pub struct SupervisedSet {
    /// The regression points.
    pub points: Vec<SupervisedPoint>,
}

impl SupervisedSet {
    /// Number of points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True when the set holds no points.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mini-batch training hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    /// Gradient step size.
    pub learning_rate: f64,
    /// Full passes over the data.
    pub epochs: usize,
    /// Points per gradient step.
    pub batch_size: usize,
    /// Momentum coefficient on the parameter velocity.
    pub momentum: f64,
    /// Seed for the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            epochs: 50,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// A trained policy with the full-set loss before and after.
pub struct TrainOutcome {
    /// The trained policy.
    pub policy: MlpPolicy,
    /// Mean weighted loss over the set before training.
    pub initial_loss: f64,
    /// Mean weighted loss over the set after training.
    pub final_loss: f64,
}

/// Mean weighted precision-quadratic loss of `policy` over `data`:
/// `(1/B) Σ_i w_i (f(x_i) - μ_i)ᵀ Λ_i (f(x_i) - μ_i)`.
pub fn supervised_loss(policy: &MlpPolicy, data: &SupervisedSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let mut total = 0.0;
    for point in &data.points {
        let delta = policy.forward(&point.state) - &point.target_mean;
        total += point.weight * delta.dot(&(&point.precision * &delta));
    }
    Ok(total / data.len() as f64)
}

/// Analytic gradient of [`supervised_loss`] with respect to every weight
/// matrix and bias vector, returned alongside the loss.
pub fn supervised_gradient(
    policy: &MlpPolicy,
    data: &SupervisedSet,
) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>, f64)> {
    if data.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let layers = policy.weights.len();
    let mut grad_w: Vec<DMatrix<f64>> = policy
        .weights
        .iter()
        .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    let mut grad_b: Vec<DVector<f64>> = policy.biases.iter().map(|b| DVector::zeros(b.len())).collect();
    let mut loss = 0.0;

    for point in &data.points {
        let activations = policy.forward_trace(&point.state);
        let output = activations.last().unwrap();
        let delta_out = output - &point.target_mean;
        loss += point.weight * delta_out.dot(&(&point.precision * &delta_out));

        // dL/df for this point; backpropagate through the layers.
        let mut delta = (&point.precision * &delta_out) * (2.0 * point.weight);
        for j in (0..layers).rev() {
            grad_w[j] += &delta * activations[j].transpose();
            grad_b[j] += &delta;
            if j > 0 {
                let mut back = policy.weights[j].transpose() * &delta;
                // ReLU mask from the post-activation of the layer below.
                for (v, &a) in back.iter_mut().zip(activations[j].iter()) {
                    if a <= 0.0 {
                        *v = 0.0;
                    }
                }
                delta = back;
            }
        }
    }

    let scale = 1.0 / data.len() as f64;
    for g in &mut grad_w {
        *g *= scale;
    }
    for g in &mut grad_b {
        *g *= scale;
    }
    Ok((grad_w, grad_b, loss * scale))
}

/// Trains the network by shuffled mini-batch gradient descent with
/// momentum. Parameters revert to the input if the final full-set loss
/// fails to improve on the initial one, so the outcome never regresses.
pub fn train_supervised(
    policy: &MlpPolicy,
    data: &SupervisedSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if !(config.learning_rate > 0.0) || config.batch_size == 0 {
        return Err(Error::InvalidParameter {
            name: "train config",
            reason: alloc::format!(
                "learning_rate {} and batch_size {} must be positive",
                config.learning_rate,
                config.batch_size
            ),
        });
    }
    let initial_loss = supervised_loss(policy, data)?;
    let mut trained = policy.clone();
    let mut velocity_w: Vec<DMatrix<f64>> = trained
        .weights
        .iter()
        .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    let mut velocity_b: Vec<DVector<f64>> =
        trained.biases.iter().map(|b| DVector::zeros(b.len())).collect();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = SupervisedSet::default();

    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.points.clear();
            batch
                .points
                .extend(chunk.iter().map(|&i| data.points[i].clone()));
            let (grad_w, grad_b, batch_loss) = supervised_gradient(&trained, &batch)?;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            for ((w, v), g) in trained.weights.iter_mut().zip(&mut velocity_w).zip(&grad_w) {
                *v *= config.momentum;
                *v -= g * config.learning_rate;
                *w += &*v;
            }
            for ((b, v), g) in trained.biases.iter_mut().zip(&mut velocity_b).zip(&grad_b) {
                *v *= config.momentum;
                *v -= g * config.learning_rate;
                *b += &*v;
            }
        }
    }

    let final_loss = supervised_loss(&trained, data)?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: config.epochs,
        });
    }
    if final_loss <= initial_loss {
        Ok(TrainOutcome {
            policy: trained,
            initial_loss,
            final_loss,
        })
    } else {
        Ok(TrainOutcome {
            policy: policy.clone(),
            initial_loss,
            final_loss: initial_loss,
        })
    }
}

fn shuffle<R: rand::Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Replaces the network noise with the elementwise average of the local
/// policies' covariances at each timestep.
pub fn update_noise(policy: &MlpPolicy, locals: &[LinGaussPolicy]) -> Result<MlpPolicy> {
    let first = locals.first().ok_or(Error::EmptySampleSet)?;
    let horizon = policy.horizon();
    check_dim("noise horizon", horizon, first.horizon())?;
    let action_dim = policy.action_dim();
    let mut updated = policy.clone();
    for t in 0..horizon {
        let mut avg = DMatrix::zeros(action_dim, action_dim);
        for local in locals {
            check_dim("noise horizon", horizon, local.horizon())?;
            check_dim("noise action dim", action_dim, local.action_dim())?;
            avg += local.covariance_at(t);
        }
        updated.noise_covs[t] = symmetrize(&(avg / locals.len() as f64));
    }
    Ok(updated)
}

/// Distillation targets for the standard outer-loop step: every visited
/// state regresses onto the updated local policy's mean there, weighted by
/// the local precision, with unit sample weight.
pub fn distillation_set(
    locals: &[LinGaussPolicy],
    sample_sets: &[SampleSet],
) -> Result<SupervisedSet> {
    check_dim("distillation instances", locals.len(), sample_sets.len())?;
    let mut set = SupervisedSet::default();
    for (local, samples) in locals.iter().zip(sample_sets) {
        check_dim("distillation horizon", local.horizon(), samples.horizon())?;
        for t in 0..samples.horizon() {
            let precision = inverse_spd(local.covariance_at(t), "local policy covariance")?;
            for traj in samples.trajectories() {
                set.points.push(SupervisedPoint {
                    state: traj.states[t].clone(),
                    target_mean: local.mean_action(t, &traj.states[t]),
                    precision: precision.clone(),
                    weight: 1.0,
                });
            }
        }
    }
    Ok(set)
}

/// Like [`distillation_set`] but weighting each point by its sample
/// probability, rescaled to mean one so that uniform probabilities reduce
/// to the standard set.
pub fn weighted_distillation_set(
    locals: &[LinGaussPolicy],
    sample_sets: &[SampleSet],
    weight_tables: &[WeightTable],
) -> Result<SupervisedSet> {
    check_dim("distillation instances", locals.len(), sample_sets.len())?;
    check_dim("distillation instances", locals.len(), weight_tables.len())?;
    let mut set = SupervisedSet::default();
    for ((local, samples), table) in locals.iter().zip(sample_sets).zip(weight_tables) {
        check_dim("distillation horizon", local.horizon(), samples.horizon())?;
        let n = samples.len() as f64;
        for t in 0..samples.horizon() {
            let precision = inverse_spd(local.covariance_at(t), "local policy covariance")?;
            for (i, traj) in samples.trajectories().iter().enumerate() {
                set.points.push(SupervisedPoint {
                    state: traj.states[t].clone(),
                    target_mean: local.mean_action(t, &traj.states[t]),
                    precision: precision.clone(),
                    weight: n * table.probabilities()[(i, t)],
                });
            }
        }
    }
    Ok(set)
}

/// Trains the updated local policies into the network with
/// probability-weighted targets (the PI-GPS-W variant).
pub fn pigpsw_train(
    policy: &MlpPolicy,
    locals: &[LinGaussPolicy],
    sample_sets: &[SampleSet],
    weight_tables: &[WeightTable],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let set = weighted_distillation_set(locals, sample_sets, weight_tables)?;
    train_supervised(policy, &set, config)
}

/// Trains directly on the sampled actions reweighted by their softmax
/// probabilities, without fitting local policies (the REPS variant):
/// targets are the raw actions, the precision is the identity, and weights
/// are the probabilities rescaled to mean one.
pub fn reps_train(
    policy: &MlpPolicy,
    sample_sets: &[SampleSet],
    bound: KlBound,
    config: &TrainConfig,
) -> Result<(TrainOutcome, Vec<WeightTable>)> {
    if sample_sets.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let action_dim = policy.action_dim();
    let identity = DMatrix::identity(action_dim, action_dim);
    let mut set = SupervisedSet::default();
    let mut tables = Vec::with_capacity(sample_sets.len());
    for samples in sample_sets {
        let table = solve_weights(&cost_to_go(samples)?, bound)?;
        let n = samples.len() as f64;
        for t in 0..samples.horizon() {
            for (i, traj) in samples.trajectories().iter().enumerate() {
                set.points.push(SupervisedPoint {
                    state: traj.states[t].clone(),
                    target_mean: traj.actions[t].clone(),
                    precision: identity.clone(),
                    weight: n * table.probabilities()[(i, t)],
                });
            }
        }
        tables.push(table);
    }
    let outcome = train_supervised(policy, &set, config)?;
    Ok((outcome, tables))
}

/// Weighted-MLE noise update from raw sampled actions: per timestep, the
/// probability-weighted covariance of the actions around their weighted
/// mean, floored to stay positive definite. Used by the REPS variant,
/// which has no local covariances to average.
pub fn weighted_action_noise(
    policy: &MlpPolicy,
    sample_sets: &[SampleSet],
    weight_tables: &[WeightTable],
    covariance_floor: f64,
) -> Result<MlpPolicy> {
    check_dim("noise instances", sample_sets.len(), weight_tables.len())?;
    if sample_sets.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let horizon = policy.horizon();
    let action_dim = policy.action_dim();
    let mut updated = policy.clone();
    for t in 0..horizon {
        let mut avg = DMatrix::zeros(action_dim, action_dim);
        for (samples, table) in sample_sets.iter().zip(weight_tables) {
            check_dim("noise horizon", horizon, samples.horizon())?;
            let mut mean = DVector::zeros(action_dim);
            for (i, traj) in samples.trajectories().iter().enumerate() {
                mean += &traj.actions[t] * table.probabilities()[(i, t)];
            }
            let mut cov = DMatrix::zeros(action_dim, action_dim);
            for (i, traj) in samples.trajectories().iter().enumerate() {
                let d = &traj.actions[t] - &mean;
                cov += &d * d.transpose() * table.probabilities()[(i, t)];
            }
            avg += cov;
        }
        updated.noise_covs[t] = floor_spd(&(avg / sample_sets.len() as f64), covariance_floor);
    }
    Ok(updated)
}
