//! Simulated benchmark environments: a smooth 2D point-mass reaching task
//! and a latch task whose displacement dynamics and cost are discontinuous.
//!
//! Environments are immutable configurations. Rollouts are pure given an
//! RNG, record the unclamped commanded actions together with the noise that
//! produced them, and evaluate costs on the commanded action (the dynamics
//! clamp to the action box internally).

use alloc::vec::Vec;

use nalgebra::DVector;

// Resolves float math in no_std builds; test builds link std and shadow it.
#[allow(unused_imports)]
use num_traits::Float;

use crate::controllers::{perturbed_action, Policy, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{check_dim, standard_normal_vector};

/// One concrete task condition: where the agent starts and where its
/// objective (goal or latch) sits.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// Agent start: planar position and velocity `[px, py, vx, vy]`.
    pub initial_state: DVector<f64>,
    /// Planar objective position (reaching goal or latch location).
    pub target: DVector<f64>,
}

/// Axis-aligned uniform distribution over task instances.
#[derive(Clone, Debug)]
pub struct InstanceDistribution {
    initial_bounds: Vec<(f64, f64)>,
    target_bounds: Vec<(f64, f64)>,
}

impl InstanceDistribution {
    /// Bounds are `(low, high)` pairs per coordinate; `low == high` pins
    /// the coordinate, `low > high` is rejected.
    pub fn new(initial_bounds: Vec<(f64, f64)>, target_bounds: Vec<(f64, f64)>) -> Result<Self> {
        check_dim("initial-state bounds", 4, initial_bounds.len())?;
        check_dim("target bounds", 2, target_bounds.len())?;
        for &(lo, hi) in initial_bounds.iter().chain(target_bounds.iter()) {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidParameter {
                    name: "instance bounds",
                    reason: alloc::format!("invalid interval [{lo}, {hi}]"),
                });
            }
        }
        Ok(Self {
            initial_bounds,
            target_bounds,
        })
    }

    /// Distribution concentrated on a single instance.
    pub fn degenerate(instance: &Instance) -> Result<Self> {
        Self::new(
            instance.initial_state.iter().map(|&v| (v, v)).collect(),
            instance.target.iter().map(|&v| (v, v)).collect(),
        )
    }

    /// Per-coordinate bounds on the initial state.
    pub fn initial_bounds(&self) -> &[(f64, f64)] {
        &self.initial_bounds
    }

    /// Per-coordinate bounds on the target.
    pub fn target_bounds(&self) -> &[(f64, f64)] {
        &self.target_bounds
    }

    /// Shrinks every interval toward its midpoint by `fraction` (1 keeps
    /// the full range, 0 collapses to the center) for curriculum widening.
    pub fn scaled(&self, fraction: f64) -> Self {
        let shrink = |bounds: &[(f64, f64)]| {
            bounds
                .iter()
                .map(|&(lo, hi)| {
                    let mid = 0.5 * (lo + hi);
                    let half = 0.5 * (hi - lo) * fraction;
                    (mid - half, mid + half)
                })
                .collect()
        };
        Self {
            initial_bounds: shrink(&self.initial_bounds),
            target_bounds: shrink(&self.target_bounds),
        }
    }

    /// Uniform draw within the bounds; deterministic per RNG state.
    pub fn sample_instance<R: rand::Rng>(&self, rng: &mut R) -> Instance {
        let draw = |bounds: &[(f64, f64)], rng: &mut R| {
            DVector::from_iterator(
                bounds.len(),
                bounds.iter().map(|&(lo, hi)| {
                    if lo == hi {
                        lo
                    } else {
                        rng.random_range(lo..hi)
                    }
                }),
            )
        };
        Instance {
            initial_state: draw(&self.initial_bounds, rng),
            target: draw(&self.target_bounds, rng),
        }
    }
}

/// A discrete-time control task with quadratic-or-worse step costs and a
/// boolean success predicate on the final state.
///
/// State layout convention: planar position occupies components 0..2 and
/// planar velocity components 2..4; task-specific components follow.
pub trait Environment: Clone {
    /// State dimension.
    fn state_dim(&self) -> usize;
    /// Action dimension.
    fn action_dim(&self) -> usize;
    /// Number of controlled timesteps.
    fn horizon(&self) -> usize;
    /// Integration timestep in seconds.
    fn dt(&self) -> f64;
    /// Start state for the configured instance.
    fn initial_state(&self) -> DVector<f64>;
    /// Advances one step; the action is clamped to the action box before
    /// integration. Errors if the next state is not finite.
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    /// Per-step cost of commanding `u` in state `x` at timestep `t`.
    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> f64;
    /// Whether the rollout achieved the task.
    fn is_success(&self, trajectory: &Trajectory) -> bool;
    /// The same environment reconfigured for another task instance.
    fn with_instance(&self, instance: &Instance) -> Result<Self>;
    /// Planar point the scripted initialization steers toward.
    fn scripted_target(&self) -> DVector<f64>;
}

fn clamp_action(u: &DVector<f64>, limit: f64) -> DVector<f64> {
    u.map(|v| v.clamp(-limit, limit))
}

fn ensure_finite_state(x: &DVector<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "environment state",
        })
    }
}

/// Planar double integrator steering toward a goal position.
///
/// State `[px, py, vx, vy]`, action = acceleration. Step cost
/// `w_pos ‖p - goal‖² + w_vel ‖v‖² + w_u ‖u‖²`; success is stopping the
/// position within `success_radius` of the goal by the final step.
#[derive(Clone, Debug)]
pub struct PointMassEnv {
    /// Integration step.
    pub dt: f64,
    /// Controlled timesteps.
    pub horizon: usize,
    /// Goal position.
    pub goal: DVector<f64>,
    /// Start state `[px, py, vx, vy]`.
    pub start: DVector<f64>,
    /// Position-error cost weight.
    pub w_pos: f64,
    /// Velocity cost weight.
    pub w_vel: f64,
    /// Control-effort cost weight.
    pub w_u: f64,
    /// Per-component action box `[-limit, limit]`.
    pub action_limit: f64,
    /// Goal-distance threshold defining success.
    pub success_radius: f64,
}

impl Default for PointMassEnv {
    fn default() -> Self {
        Self {
            dt: 0.05,
            horizon: 100,
            goal: DVector::from_column_slice(&[1.0, 1.0]),
            start: DVector::zeros(4),
            w_pos: 1.0,
            w_vel: 0.1,
            w_u: 1e-3,
            action_limit: 10.0,
            success_radius: 0.1,
        }
    }
}

impl Environment for PointMassEnv {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn initial_state(&self) -> DVector<f64> {
        self.start.clone()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", 4, x.len())?;
        check_dim("action", 2, u.len())?;
        let u = clamp_action(u, self.action_limit);
        let dt = self.dt;
        let next = DVector::from_column_slice(&[
            x[0] + x[2] * dt + 0.5 * u[0] * dt * dt,
            x[1] + x[3] * dt + 0.5 * u[1] * dt * dt,
            x[2] + u[0] * dt,
            x[3] + u[1] * dt,
        ]);
        ensure_finite_state(&next)?;
        Ok(next)
    }

    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>, _t: usize) -> f64 {
        let dp0 = x[0] - self.goal[0];
        let dp1 = x[1] - self.goal[1];
        let pos = dp0 * dp0 + dp1 * dp1;
        let vel = x[2] * x[2] + x[3] * x[3];
        let ctrl = u.norm_squared();
        self.w_pos * pos + self.w_vel * vel + self.w_u * ctrl
    }

    fn is_success(&self, trajectory: &Trajectory) -> bool {
        let last = trajectory.states.last().expect("trajectory has states");
        let dp0 = last[0] - self.goal[0];
        let dp1 = last[1] - self.goal[1];
        (dp0 * dp0 + dp1 * dp1).sqrt() <= self.success_radius
    }

    fn with_instance(&self, instance: &Instance) -> Result<Self> {
        check_dim("instance initial state", 4, instance.initial_state.len())?;
        check_dim("instance target", 2, instance.target.len())?;
        let mut env = self.clone();
        env.start = instance.initial_state.clone();
        env.goal = instance.target.clone();
        Ok(env)
    }

    fn scripted_target(&self) -> DVector<f64> {
        self.goal.clone()
    }
}

/// Planar double integrator with a latch that must be pushed through a
/// required displacement.
///
/// State `[px, py, vx, vy, d, lx, ly]`: agent position and velocity, the
/// accumulated latch displacement `d`, and the latch position (constant
/// over a rollout, exposed in the state so a global policy can condition
/// on it). While the agent is within `engage_radius` of the latch, `d`
/// grows with the velocity component along the push axis — a hard
/// conditional in the dynamics. The cost carries no information about the
/// latch before engagement: a flat penalty applies at every step past the
/// deadline until `d` reaches `required_displacement`.
#[derive(Clone, Debug)]
pub struct LatchEnv {
    /// Integration step.
    pub dt: f64,
    /// Controlled timesteps.
    pub horizon: usize,
    /// Latch position.
    pub latch: DVector<f64>,
    /// Agent start `[px, py, vx, vy]`.
    pub start: DVector<f64>,
    /// Unit direction the latch travels when pushed.
    pub push_axis: DVector<f64>,
    /// Engagement radius δ around the latch.
    pub engage_radius: f64,
    /// Displacement needed for success.
    pub required_displacement: f64,
    /// Flat penalty per step past the deadline while unlatched.
    pub failure_penalty: f64,
    /// Timestep after which the penalty applies.
    pub deadline: usize,
    /// Control-effort cost weight.
    pub w_u: f64,
    /// Velocity cost weight.
    pub w_vel: f64,
    /// Per-component action box `[-limit, limit]`.
    pub action_limit: f64,
    /// Sideways offset of the scripted reach point from the latch line,
    /// as a multiple of the engage radius.
    pub scripted_offset: f64,
}

impl Default for LatchEnv {
    fn default() -> Self {
        Self {
            dt: 0.05,
            horizon: 100,
            latch: DVector::from_column_slice(&[1.0, 0.0]),
            start: DVector::zeros(4),
            push_axis: DVector::from_column_slice(&[1.0, 0.0]),
            engage_radius: 0.15,
            required_displacement: 0.2,
            failure_penalty: 50.0,
            deadline: 50,
            w_u: 1e-3,
            w_vel: 1e-2,
            action_limit: 10.0,
            scripted_offset: 1.5,
        }
    }
}

impl LatchEnv {
    /// Accumulated latch displacement in a state vector.
    pub fn displacement(x: &DVector<f64>) -> f64 {
        x[4]
    }
}

impl Environment for LatchEnv {
    fn state_dim(&self) -> usize {
        7
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::from_column_slice(&[
            self.start[0],
            self.start[1],
            self.start[2],
            self.start[3],
            0.0,
            self.latch[0],
            self.latch[1],
        ])
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", 7, x.len())?;
        check_dim("action", 2, u.len())?;
        let u = clamp_action(u, self.action_limit);
        let dt = self.dt;
        let dx = x[0] - x[5];
        let dy = x[1] - x[6];
        let engaged = (dx * dx + dy * dy).sqrt() <= self.engage_radius;
        let push_rate = x[2] * self.push_axis[0] + x[3] * self.push_axis[1];
        let d_next = if engaged {
            x[4] + dt * push_rate.max(0.0)
        } else {
            x[4]
        };
        let next = DVector::from_column_slice(&[
            x[0] + x[2] * dt + 0.5 * u[0] * dt * dt,
            x[1] + x[3] * dt + 0.5 * u[1] * dt * dt,
            x[2] + u[0] * dt,
            x[3] + u[1] * dt,
            d_next,
            x[5],
            x[6],
        ]);
        ensure_finite_state(&next)?;
        Ok(next)
    }

    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> f64 {
        let vel = x[2] * x[2] + x[3] * x[3];
        let mut c = self.w_u * u.norm_squared() + self.w_vel * vel;
        if t >= self.deadline && x[4] < self.required_displacement {
            c += self.failure_penalty;
        }
        c
    }

    fn is_success(&self, trajectory: &Trajectory) -> bool {
        let last = trajectory.states.last().expect("trajectory has states");
        Self::displacement(last) >= self.required_displacement
    }

    fn with_instance(&self, instance: &Instance) -> Result<Self> {
        check_dim("instance initial state", 4, instance.initial_state.len())?;
        check_dim("instance target", 2, instance.target.len())?;
        let mut env = self.clone();
        env.start = instance.initial_state.clone();
        env.latch = instance.target.clone();
        Ok(env)
    }

    fn scripted_target(&self) -> DVector<f64> {
        // Overshoot along the push axis so a pass through the engagement
        // ball can accumulate the full required displacement; the sideways
        // offset keeps the scripted path from solving the task outright.
        let overshoot = self.engage_radius + self.required_displacement;
        let perp = DVector::from_column_slice(&[-self.push_axis[1], self.push_axis[0]]);
        &self.latch + &self.push_axis * overshoot + perp * (self.scripted_offset * self.engage_radius)
    }
}

/// Rolls out `policy` on `env` with injected exploration noise, recording
/// states, unclamped actions, noise draws, and per-step costs.
pub fn rollout<E: Environment, P: Policy + ?Sized, R: rand::Rng>(
    env: &E,
    policy: &P,
    rng: &mut R,
) -> Result<Trajectory> {
    check_dim("rollout state dim", env.state_dim(), policy.state_dim())?;
    check_dim("rollout action dim", env.action_dim(), policy.action_dim())?;
    check_dim("rollout horizon", env.horizon(), policy.horizon())?;
    let horizon = env.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut noise = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(horizon);
    let mut x = env.initial_state();
    for t in 0..horizon {
        let z = standard_normal_vector(rng, policy.action_dim());
        let u = perturbed_action(policy, t, &x, &z)?;
        let c = env.cost(&x, &u, t);
        if !c.is_finite() {
            return Err(Error::NonFiniteCost {
                sample: 0,
                timestep: t,
            });
        }
        let next = env.step(&x, &u)?;
        states.push(x);
        actions.push(u);
        noise.push(z);
        costs.push(c);
        x = next;
    }
    states.push(x);
    Ok(Trajectory {
        states,
        actions,
        noise,
        costs,
    })
}

/// Noiseless rollout following the policy mean (zero recorded noise).
pub fn rollout_mean<E: Environment, P: Policy + ?Sized>(env: &E, policy: &P) -> Result<Trajectory> {
    check_dim("rollout state dim", env.state_dim(), policy.state_dim())?;
    check_dim("rollout action dim", env.action_dim(), policy.action_dim())?;
    check_dim("rollout horizon", env.horizon(), policy.horizon())?;
    let horizon = env.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut noise = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(horizon);
    let mut x = env.initial_state();
    for t in 0..horizon {
        let u = policy.mean_action(t, &x);
        let c = env.cost(&x, &u, t);
        if !c.is_finite() {
            return Err(Error::NonFiniteCost {
                sample: 0,
                timestep: t,
            });
        }
        let next = env.step(&x, &u)?;
        states.push(x);
        actions.push(u);
        noise.push(DVector::zeros(policy.action_dim()));
        costs.push(c);
        x = next;
    }
    states.push(x);
    Ok(Trajectory {
        states,
        actions,
        noise,
        costs,
    })
}
