//! Time-varying linear-Gaussian controllers and the policy abstraction
//! shared with the neural global policy.
//!
//! A local policy is a sequence of conditional Gaussians
//! `u_t ~ N(K_t x_t + k_t, C_t)`. Rollouts record the standard-normal
//! draws alongside the actions so later updates can recover the realized
//! feedforward perturbations exactly.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, factor_psd, gaussian_kl, min_symmetric_eigenvalue, symmetrize};

/// Smallest eigenvalue any stored action covariance is allowed to reach.
pub const DEFAULT_COVARIANCE_FLOOR: f64 = 1e-6;

/// Conditional action distribution shared by local and global policies.
///
/// Timesteps are zero-based: `t` ranges over `0..horizon()`.
pub trait Policy {
    /// Dimension of the state the policy conditions on.
    fn state_dim(&self) -> usize;
    /// Dimension of the produced action.
    fn action_dim(&self) -> usize;
    /// Number of controlled timesteps.
    fn horizon(&self) -> usize;
    /// Mean action at timestep `t` in state `x`.
    fn mean_action(&self, t: usize, x: &DVector<f64>) -> DVector<f64>;
    /// Action covariance at timestep `t`.
    fn covariance(&self, t: usize) -> DMatrix<f64>;
}

/// Mean action plus a scaled perturbation: `mean + chol(C_t) · z`.
///
/// Every sampled action in this crate is produced through this function so
/// that a recorded `z` reconstructs the action bit-for-bit.
pub fn perturbed_action<P: Policy + ?Sized>(
    policy: &P,
    t: usize,
    x: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("perturbed_action state", policy.state_dim(), x.len())?;
    check_dim("perturbed_action noise", policy.action_dim(), z.len())?;
    let l = factor_psd(&policy.covariance(t), "action covariance")?;
    Ok(policy.mean_action(t, x) + l * z)
}

/// Time-varying linear-Gaussian controller `N(K_t x + k_t, C_t)`.
#[derive(Clone, Debug)]
pub struct LinGaussPolicy {
    gains: Vec<DMatrix<f64>>,
    feedforwards: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

impl LinGaussPolicy {
    /// Builds a controller from per-timestep gains `K_t`, feedforwards
    /// `k_t`, and covariances `C_t`, validating shape consistency and that
    /// every covariance is symmetric positive semidefinite.
    pub fn new(
        gains: Vec<DMatrix<f64>>,
        feedforwards: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if gains.is_empty() {
            return Err(Error::InvalidParameter {
                name: "horizon",
                reason: alloc::format!("need at least one timestep, got 0"),
            });
        }
        check_dim("feedforward count", gains.len(), feedforwards.len())?;
        check_dim("covariance count", gains.len(), covariances.len())?;
        let action_dim = gains[0].nrows();
        let state_dim = gains[0].ncols();
        for (t, ((gain, ff), cov)) in gains
            .iter()
            .zip(feedforwards.iter())
            .zip(covariances.iter())
            .enumerate()
        {
            check_dim("gain rows", action_dim, gain.nrows())?;
            check_dim("gain cols", state_dim, gain.ncols())?;
            check_dim("feedforward len", action_dim, ff.len())?;
            check_dim("covariance rows", action_dim, cov.nrows())?;
            check_dim("covariance cols", action_dim, cov.ncols())?;
            let all_finite = gain.iter().chain(ff.iter()).chain(cov.iter()).all(|v| v.is_finite());
            if !all_finite {
                return Err(Error::NonFinite {
                    what: "controller parameters",
                });
            }
            let sym = symmetrize(cov);
            let scale = sym.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
            if min_symmetric_eigenvalue(&sym) < -1e-9 * scale {
                return Err(Error::NotPositiveDefinite {
                    what: "action covariance",
                });
            }
            let _ = t;
        }
        Ok(Self {
            gains,
            feedforwards,
            covariances: covariances.iter().map(symmetrize).collect(),
        })
    }

    /// Constant-parameter controller: the same `(K, k, C)` at every step.
    pub fn stationary(
        horizon: usize,
        gain: DMatrix<f64>,
        feedforward: DVector<f64>,
        covariance: DMatrix<f64>,
    ) -> Result<Self> {
        Self::new(
            alloc::vec![gain; horizon],
            alloc::vec![feedforward; horizon],
            alloc::vec![covariance; horizon],
        )
    }

    /// Feedback gain `K_t`.
    pub fn gain(&self, t: usize) -> &DMatrix<f64> {
        &self.gains[t]
    }

    /// Feedforward `k_t`.
    pub fn feedforward(&self, t: usize) -> &DVector<f64> {
        &self.feedforwards[t]
    }

    /// Action covariance `C_t`.
    pub fn covariance_at(&self, t: usize) -> &DMatrix<f64> {
        &self.covariances[t]
    }

    /// Replaces the feedforward and covariance at `t`, keeping `K_t`.
    pub(crate) fn set_update(&mut self, t: usize, feedforward: DVector<f64>, covariance: DMatrix<f64>) {
        self.feedforwards[t] = feedforward;
        self.covariances[t] = covariance;
    }

    /// Replaces the full parameter set at `t`.
    pub(crate) fn set_step(
        &mut self,
        t: usize,
        gain: DMatrix<f64>,
        feedforward: DVector<f64>,
        covariance: DMatrix<f64>,
    ) {
        self.gains[t] = gain;
        self.feedforwards[t] = feedforward;
        self.covariances[t] = covariance;
    }

    /// Scales every covariance by `factor` (used for noise schedules).
    pub fn scale_covariances(&mut self, factor: f64) {
        for c in &mut self.covariances {
            *c *= factor;
        }
    }

    /// Draws an action `K_t x + k_t + chol(C_t) z` with `z` from `rng`,
    /// returning both the action and the standard-normal draw.
    pub fn sample_action<R: rand::Rng>(
        &self,
        t: usize,
        x: &DVector<f64>,
        rng: &mut R,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let z = crate::linalg::standard_normal_vector(rng, self.action_dim());
        let action = perturbed_action(self, t, x, &z)?;
        Ok((action, z))
    }
}

impl Policy for LinGaussPolicy {
    fn state_dim(&self) -> usize {
        self.gains[0].ncols()
    }

    fn action_dim(&self) -> usize {
        self.gains[0].nrows()
    }

    fn horizon(&self) -> usize {
        self.gains.len()
    }

    fn mean_action(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.gains[t] * x + &self.feedforwards[t]
    }

    fn covariance(&self, t: usize) -> DMatrix<f64> {
        self.covariances[t].clone()
    }
}

/// One rollout: `T+1` states, `T` actions with their standard-normal
/// draws, and `T` per-step costs.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Visited states `x_0 .. x_T`.
    pub states: Vec<DVector<f64>>,
    /// Commanded actions `u_0 .. u_{T-1}`.
    pub actions: Vec<DVector<f64>>,
    /// Standard-normal draws behind each action.
    pub noise: Vec<DVector<f64>>,
    /// Per-step costs `l(x_t, u_t)`.
    pub costs: Vec<f64>,
}

impl Trajectory {
    /// Number of controlled steps.
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Sum of the per-step costs.
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        check_dim("trajectory states", t + 1, self.states.len())?;
        check_dim("trajectory noise", t, self.noise.len())?;
        check_dim("trajectory costs", t, self.costs.len())?;
        Ok(())
    }
}

/// A batch of rollouts gathered under one sampling policy on one task
/// instance, with consistent dimensions across samples.
#[derive(Clone, Debug)]
pub struct SampleSet {
    trajectories: Vec<Trajectory>,
    state_dim: usize,
    action_dim: usize,
    horizon: usize,
}

impl SampleSet {
    /// Wraps rollouts after checking that every trajectory has the same
    /// horizon and dimensions.
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories.first().ok_or(Error::EmptySampleSet)?;
        first.validate()?;
        let horizon = first.horizon();
        let state_dim = first.states[0].len();
        let action_dim = first.actions[0].len();
        for traj in &trajectories {
            traj.validate()?;
            check_dim("sample horizon", horizon, traj.horizon())?;
            for x in &traj.states {
                check_dim("sample state dim", state_dim, x.len())?;
            }
            for u in &traj.actions {
                check_dim("sample action dim", action_dim, u.len())?;
            }
        }
        Ok(Self {
            trajectories,
            state_dim,
            action_dim,
            horizon,
        })
    }

    /// Number of rollouts.
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    /// True when the set holds no rollouts (never after construction).
    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// State dimension common to all rollouts.
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Action dimension common to all rollouts.
    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Controlled steps per rollout.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// The underlying rollouts.
    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Mean total cost across rollouts.
    pub fn mean_cost(&self) -> f64 {
        self.trajectories.iter().map(Trajectory::total_cost).sum::<f64>() / self.len() as f64
    }

    /// Mean state at timestep `t` across rollouts.
    pub fn mean_state(&self, t: usize) -> DVector<f64> {
        let mut m = DVector::zeros(self.state_dim);
        for traj in &self.trajectories {
            m += &traj.states[t];
        }
        m / self.len() as f64
    }

    /// Mean action at timestep `t` across rollouts.
    pub fn mean_action(&self, t: usize) -> DVector<f64> {
        let mut m = DVector::zeros(self.action_dim);
        for traj in &self.trajectories {
            m += &traj.actions[t];
        }
        m / self.len() as f64
    }
}

/// Gaussian KL between two policies' action distributions at state `x`
/// and timestep `t`: `KL(p(u|x) ‖ q(u|x))`.
pub fn policy_step_kl<P: Policy + ?Sized, Q: Policy + ?Sized>(
    p: &P,
    q: &Q,
    t: usize,
    x: &DVector<f64>,
) -> Result<f64> {
    check_dim("kl action dim", p.action_dim(), q.action_dim())?;
    check_dim("kl state dim", p.state_dim(), x.len())?;
    check_dim("kl state dim", q.state_dim(), x.len())?;
    gaussian_kl(
        &p.mean_action(t, x),
        &p.covariance(t),
        &q.mean_action(t, x),
        &q.covariance(t),
    )
}

/// Trajectory KL estimate `Σ_t E[KL(p ‖ q)]`, the expectation taken over
/// the states visited by `samples`.
pub fn trajectory_kl<P: Policy + ?Sized, Q: Policy + ?Sized>(
    p: &P,
    q: &Q,
    samples: &SampleSet,
) -> Result<f64> {
    check_dim("kl horizon", p.horizon(), samples.horizon())?;
    check_dim("kl horizon", q.horizon(), samples.horizon())?;
    let n = samples.len() as f64;
    let mut total = 0.0;
    for t in 0..samples.horizon() {
        let mut step = 0.0;
        for traj in samples.trajectories() {
            step += policy_step_kl(p, q, t, &traj.states[t])?;
        }
        total += step / n;
    }
    Ok(total)
}
