//! Path-integral policy improvement with a KL-bounded temperature.
//!
//! Each update reweights sampled rollouts by a per-timestep softmax of
//! negative cost-to-go, with the temperature chosen by minimizing a dual
//! function so the weights stay within a KL ball around uniform, then
//! refits the feedforward mean and covariance by weighted maximum
//! likelihood while holding the feedback gains fixed.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

// Resolves float math in no_std builds; test builds link std and shadow it.
#[allow(unused_imports)]
use num_traits::Float;

use crate::controllers::{policy_step_kl, LinGaussPolicy, Policy, SampleSet};
use crate::error::{Error, Result};
use crate::linalg::{check_dim, floor_spd};

/// Smallest temperature the dual search considers.
pub const ETA_MIN: f64 = 1e-4;
/// Largest temperature the dual search considers; also the value returned
/// when any temperature satisfies the bound.
pub const ETA_MAX: f64 = 1e6;

const GOLDEN_ITERATIONS: usize = 200;
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Maximum admissible per-timestep KL divergence between the reweighted
/// sample distribution and uniform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlBound {
    epsilon: f64,
}

impl KlBound {
    /// A bound of `epsilon` nats; must be positive (infinity disables the
    /// constraint).
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon > 0.0 {
            Ok(Self { epsilon })
        } else {
            Err(Error::InvalidParameter {
                name: "epsilon",
                reason: alloc::format!("must be positive, got {epsilon}"),
            })
        }
    }

    /// The bound in nats.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// N × T table of cost-to-go values `S_{i,t}`.
#[derive(Clone, Debug)]
pub struct CostToGoTable {
    s: DMatrix<f64>,
}

impl CostToGoTable {
    /// Builds the table from an N × T matrix of per-step costs by reverse
    /// accumulation, rejecting non-finite entries.
    pub fn from_step_costs(costs: &DMatrix<f64>) -> Result<Self> {
        let (n, horizon) = costs.shape();
        if n == 0 || horizon == 0 {
            return Err(Error::EmptySampleSet);
        }
        let mut s = DMatrix::zeros(n, horizon);
        for i in 0..n {
            let mut acc = 0.0;
            for t in (0..horizon).rev() {
                let c = costs[(i, t)];
                if !c.is_finite() {
                    return Err(Error::NonFiniteCost {
                        sample: i,
                        timestep: t,
                    });
                }
                acc += c;
                s[(i, t)] = acc;
            }
        }
        Ok(Self { s })
    }

    /// Number of samples (rows).
    pub fn n_samples(&self) -> usize {
        self.s.nrows()
    }

    /// Number of timesteps (columns).
    pub fn horizon(&self) -> usize {
        self.s.ncols()
    }

    /// Cost-to-go values at timestep `t`, one per sample.
    pub fn column(&self, t: usize) -> Vec<f64> {
        self.s.column(t).iter().copied().collect()
    }

    /// The full table.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.s
    }
}

/// Cost-to-go from the per-step costs recorded in `samples`.
pub fn cost_to_go(samples: &SampleSet) -> Result<CostToGoTable> {
    let n = samples.len();
    let horizon = samples.horizon();
    let costs = DMatrix::from_fn(n, horizon, |i, t| samples.trajectories()[i].costs[t]);
    CostToGoTable::from_step_costs(&costs)
}

/// Softmax of `-S_i / eta`, stabilized by subtracting the smallest cost.
pub fn softmax_weights(s_col: &[f64], eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter {
            name: "eta",
            reason: alloc::format!("temperature must be positive, got {eta}"),
        });
    }
    if s_col.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "cost-to-go column",
        });
    }
    let s_min = s_col.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = s_col.iter().map(|&s| ((s_min - s) / eta).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    Ok(w)
}

/// KL divergence of a weight vector against the uniform distribution,
/// `Σ_i P_i log(N P_i)`, with `0 log 0 = 0`.
pub fn weight_kl_to_uniform(weights: &[f64]) -> f64 {
    let n = weights.len() as f64;
    weights
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (n * p).ln())
        .sum()
}

/// Shannon entropy of a weight vector in nats.
pub fn weight_entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Dual objective `g(η) = η ε + η log((1/N) Σ_i exp(-S_i / η))`, evaluated
/// stably by factoring out the smallest cost.
fn dual_value(s_col: &[f64], eta: f64, epsilon: f64) -> f64 {
    let n = s_col.len() as f64;
    let s_min = s_col.iter().cloned().fold(f64::INFINITY, f64::min);
    let sum: f64 = s_col.iter().map(|&s| ((s_min - s) / eta).exp()).sum();
    eta * epsilon - s_min + eta * (sum / n).ln()
}

/// KL of the softmax weights at `eta` against uniform; decreasing in `eta`
/// from `log N` (winner-take-all) down to zero.
fn weight_kl_at(s_col: &[f64], eta: f64) -> f64 {
    match softmax_weights(s_col, eta) {
        Ok(weights) => weight_kl_to_uniform(&weights),
        Err(_) => f64::NAN,
    }
}

/// Chooses the temperature for one timestep by minimizing the dual over
/// `η ∈ [ETA_MIN, ETA_MAX]` with a golden-section search in log space,
/// then polishing the result against the dual's stationarity condition.
///
/// The dual's slope is `ε − KL(weights(η) ‖ uniform)` with the KL strictly
/// decreasing in `η`, so an interior minimum is the root of `KL(η) = ε`.
/// A comparison search alone resolves the flat minimum only to about the
/// square root of machine precision; bisecting the monotone KL pins it to
/// full precision, which downstream shift-invariance relies on.
///
/// Identical costs short-circuit to `ETA_MAX`, where the weights are
/// uniform and satisfy any bound. An infinite bound likewise disables the
/// search and returns the most aggressive temperature, `ETA_MIN`.
pub fn solve_eta(s_col: &[f64], bound: KlBound) -> Result<f64> {
    if s_col.len() < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: s_col.len(),
        });
    }
    if s_col.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "cost-to-go column",
        });
    }
    let s_min = s_col.iter().cloned().fold(f64::INFINITY, f64::min);
    let s_max = s_col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if s_max == s_min {
        return Ok(ETA_MAX);
    }
    let epsilon = bound.epsilon();
    if epsilon.is_infinite() {
        return Ok(ETA_MIN);
    }
    let mut a = ETA_MIN.ln();
    let mut b = ETA_MAX.ln();
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = dual_value(s_col, c.exp(), epsilon);
    let mut fd = dual_value(s_col, d.exp(), epsilon);
    for _ in 0..GOLDEN_ITERATIONS {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = dual_value(s_col, c.exp(), epsilon);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = dual_value(s_col, d.exp(), epsilon);
        }
    }
    let coarse = (0.5 * (a + b)).exp();

    if weight_kl_at(s_col, ETA_MIN) <= epsilon {
        // Constraint slack across the whole bracket: the dual increases
        // everywhere and the coarse search already sits at the low end.
        return Ok(coarse);
    }
    let (mut lo, mut hi) = (ETA_MIN.ln(), ETA_MAX.ln());
    for _ in 0..GOLDEN_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if weight_kl_at(s_col, mid.exp()) > epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let polished = (0.5 * (lo + hi)).exp();
    // Trust the polish only where it agrees with the coarse optimum.
    if (polished.ln() - coarse.ln()).abs() < 1e-3 {
        Ok(polished)
    } else {
        Ok(coarse)
    }
}

/// Per-timestep sample probabilities with the temperatures that produced
/// them. Columns sum to one.
#[derive(Clone, Debug)]
pub struct WeightTable {
    p: DMatrix<f64>,
    etas: Vec<f64>,
}

impl WeightTable {
    /// N × T probability matrix.
    pub fn probabilities(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Probabilities at timestep `t`, one per sample.
    pub fn column(&self, t: usize) -> Vec<f64> {
        self.p.column(t).iter().copied().collect()
    }

    /// Temperature chosen at each timestep.
    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    /// Weight entropy (nats) at each timestep.
    pub fn entropies(&self) -> Vec<f64> {
        (0..self.p.ncols())
            .map(|t| weight_entropy(&self.column(t)))
            .collect()
    }
}

/// Solves the dual per timestep and evaluates the resulting softmax
/// weights for every column of the cost-to-go table.
pub fn solve_weights(table: &CostToGoTable, bound: KlBound) -> Result<WeightTable> {
    let n = table.n_samples();
    let horizon = table.horizon();
    let mut p = DMatrix::zeros(n, horizon);
    let mut etas = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let col = table.column(t);
        let eta = solve_eta(&col, bound)?;
        let w = softmax_weights(&col, eta)?;
        for (i, &wi) in w.iter().enumerate() {
            p[(i, t)] = wi;
        }
        etas.push(eta);
    }
    Ok(WeightTable { p, etas })
}

/// Optional KL penalty mixed into per-step costs before the update.
pub struct KlPenalty<'a> {
    /// Multiplier on the per-step divergence.
    pub weight: f64,
    /// Policy the sampler is penalized for deviating from.
    pub reference: &'a dyn Policy,
}

/// Result of one PI² step: the updated policy plus the weight table it
/// was computed from.
pub struct Pi2Step {
    /// Updated controller (feedback gains unchanged).
    pub policy: LinGaussPolicy,
    /// Sample probabilities and temperatures used for the refit.
    pub weights: WeightTable,
}

/// One PI² update of `policy` from rollouts it generated.
///
/// Per timestep: weights come from the KL-bounded softmax of cost-to-go;
/// the realized feedforwards `k_{i,t} = u_{i,t} - K_t x_{i,t}` are refit by
/// weighted mean and weighted outer-product covariance (floored to stay
/// positive definite); feedback gains are kept fixed. When `penalty` is
/// given, each per-step cost is augmented with
/// `weight · KL(policy ‖ reference)` at the visited state first.
pub fn pi2_update(
    policy: &LinGaussPolicy,
    samples: &SampleSet,
    bound: KlBound,
    covariance_floor: f64,
    penalty: Option<KlPenalty<'_>>,
) -> Result<Pi2Step> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: n,
        });
    }
    let horizon = samples.horizon();
    check_dim("update horizon", policy.horizon(), horizon)?;
    check_dim("update state dim", policy.state_dim(), samples.state_dim())?;
    check_dim("update action dim", policy.action_dim(), samples.action_dim())?;
    if !(covariance_floor > 0.0) {
        return Err(Error::InvalidParameter {
            name: "covariance_floor",
            reason: alloc::format!("must be positive, got {covariance_floor}"),
        });
    }

    let mut costs = DMatrix::from_fn(n, horizon, |i, t| samples.trajectories()[i].costs[t]);
    if let Some(KlPenalty { weight, reference }) = penalty {
        for (i, traj) in samples.trajectories().iter().enumerate() {
            for t in 0..horizon {
                let kl = policy_step_kl(policy, reference, t, &traj.states[t])?;
                costs[(i, t)] += weight * kl;
            }
        }
    }
    let table = CostToGoTable::from_step_costs(&costs)?;
    let weight_table = solve_weights(&table, bound)?;

    let action_dim = policy.action_dim();
    let mut updated = policy.clone();
    for t in 0..horizon {
        let weights = weight_table.column(t);

        let gain = policy.gain(t);
        let mut realized = Vec::with_capacity(n);
        for traj in samples.trajectories() {
            let k_i = &traj.actions[t] - gain * &traj.states[t];
            if k_i.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "realized feedforward",
                });
            }
            realized.push(k_i);
        }

        let mut mean = DVector::zeros(action_dim);
        for (w, k_i) in weights.iter().zip(&realized) {
            mean += k_i * *w;
        }
        let mut cov = DMatrix::zeros(action_dim, action_dim);
        for (w, k_i) in weights.iter().zip(&realized) {
            let d = k_i - &mean;
            cov += &d * d.transpose() * *w;
        }
        let cov = floor_spd(&cov, covariance_floor);

        updated.set_update(t, mean, cov);
    }

    Ok(Pi2Step {
        policy: updated,
        weights: weight_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::Trajectory;
    use alloc::vec;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn unit_costs_accumulate_backwards() {
        let costs = DMatrix::from_element(2, 3, 1.0);
        let table = CostToGoTable::from_step_costs(&costs).unwrap();
        for i in 0..2 {
            assert_eq!(table.values()[(i, 0)], 3.0);
            assert_eq!(table.values()[(i, 1)], 2.0);
            assert_eq!(table.values()[(i, 2)], 1.0);
        }
    }

    #[test]
    fn zero_costs_give_zero_table() {
        let table = CostToGoTable::from_step_costs(&DMatrix::zeros(3, 4)).unwrap();
        assert!(table.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_cost_names_sample_and_timestep() {
        let mut costs = DMatrix::zeros(3, 4);
        costs[(2, 1)] = f64::NAN;
        match CostToGoTable::from_step_costs(&costs) {
            Err(Error::NonFiniteCost { sample, timestep }) => {
                assert_eq!((sample, timestep), (2, 1));
            }
            other => panic!("expected non-finite cost error, got {other:?}"),
        }
    }

    #[test]
    fn equal_costs_weight_uniformly() {
        let w = softmax_weights(&[5.0, 5.0, 5.0, 5.0], 0.3).unwrap();
        for &p in &w {
            assert_relative_eq!(p, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn high_temperature_approaches_uniform() {
        let w = softmax_weights(&[0.0, 1.0, 2.0], 1e9).unwrap();
        for &p in &w {
            assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn weights_are_invariant_to_cost_shifts() {
        let s = [3.0, 1.0, 4.0, 1.5];
        let shifted: Vec<f64> = s.iter().map(|v| v + 123.456).collect();
        let a = softmax_weights(&s, 0.7).unwrap();
        let b = softmax_weights(&shifted, 0.7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_costs_return_eta_max() {
        let eta = solve_eta(&[0.0, 0.0], KlBound::new(0.5).unwrap()).unwrap();
        assert_eq!(eta, ETA_MAX);
        let w = softmax_weights(&[0.0, 0.0], eta).unwrap();
        assert_relative_eq!(w[0], 0.5);
        assert_relative_eq!(w[1], 0.5);
    }

    #[test]
    fn eta_scales_with_costs() {
        let bound = KlBound::new(0.1).unwrap();
        let s = [0.0, 1.0, 0.3];
        let scaled: Vec<f64> = s.iter().map(|v| v * 10.0).collect();
        let eta = solve_eta(&s, bound).unwrap();
        let eta10 = solve_eta(&scaled, bound).unwrap();
        assert_relative_eq!(eta10 / eta, 10.0, epsilon = 1e-9);
        let w = softmax_weights(&s, eta).unwrap();
        let w10 = softmax_weights(&scaled, eta10).unwrap();
        for (a, b) in w.iter().zip(&w10) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn loose_bound_sharpens_weights() {
        let eta = solve_eta(&[0.0, 100.0], KlBound::new(50.0).unwrap()).unwrap();
        let w = softmax_weights(&[0.0, 100.0], eta).unwrap();
        assert!(w[0] > 0.999, "expected winner-take-all, got {w:?}");
    }

    fn two_sample_set(
        actions: [[f64; 1]; 2],
        costs: [f64; 2],
        horizon: usize,
    ) -> (LinGaussPolicy, SampleSet) {
        let policy = LinGaussPolicy::stationary(
            horizon,
            dmatrix![0.5],
            dvector![0.0],
            dmatrix![1.0],
        )
        .unwrap();
        let trajectories = actions
            .iter()
            .zip(costs)
            .map(|(a, c)| Trajectory {
                states: vec![dvector![1.0]; horizon + 1],
                actions: vec![dvector![a[0]]; horizon],
                noise: vec![dvector![0.0]; horizon],
                costs: vec![c; horizon],
            })
            .collect();
        (policy, SampleSet::new(trajectories).unwrap())
    }

    #[test]
    fn equal_costs_average_the_realized_feedforwards() {
        let (policy, samples) = two_sample_set([[1.0], [3.0]], [2.0, 2.0], 2);
        let step = pi2_update(&policy, &samples, KlBound::new(0.5).unwrap(), 1e-6, None).unwrap();
        // realized feedforwards: u - 0.5 * x = 0.5 and 2.5; mean 1.5
        for t in 0..2 {
            assert_relative_eq!(step.policy.feedforward(t)[0], 1.5, epsilon = 1e-12);
            let var = 0.5 * (1.0f64.powi(2) + 1.0f64.powi(2));
            assert_relative_eq!(step.policy.covariance_at(t)[(0, 0)], var, epsilon = 1e-9);
            assert_eq!(step.policy.gain(t), policy.gain(t));
        }
    }

    #[test]
    fn winner_take_all_copies_the_better_sample() {
        let (policy, samples) = two_sample_set([[1.0], [3.0]], [0.0, 1000.0], 1);
        let step =
            pi2_update(&policy, &samples, KlBound::new(10.0).unwrap(), 1e-6, None).unwrap();
        assert_relative_eq!(step.policy.feedforward(0)[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(step.policy.covariance_at(0)[(0, 0)], 1e-6, epsilon = 1e-12);
    }

    #[test]
    fn single_sample_is_rejected() {
        let (policy, samples) = two_sample_set([[1.0], [3.0]], [0.0, 1.0], 1);
        let one = SampleSet::new(vec![samples.trajectories()[0].clone()]).unwrap();
        assert!(matches!(
            pi2_update(&policy, &one, KlBound::new(1.0).unwrap(), 1e-6, None),
            Err(Error::TooFewSamples { .. })
        ));
    }
}
