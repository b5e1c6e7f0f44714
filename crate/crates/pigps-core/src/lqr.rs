//! KL-constrained LQR on fitted time-varying linear dynamics: the
//! model-based local optimizer used as the comparison baseline.
//!
//! The improvement step fits linear-Gaussian dynamics to the rollouts,
//! expands the cost to second order around the sample means by central
//! finite differences, and runs a backward pass on the cost augmented with
//! the negative log-density of the previous policy. A single temperature
//! `η`, found by bisection, scales the cost so the expected trajectory-sum
//! KL to the previous policy lands inside a window around the bound.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

// Resolves float math in no_std builds; test builds link std and shadow it.
#[allow(unused_imports)]
use num_traits::Float;

use crate::controllers::{LinGaussPolicy, Policy, SampleSet};
use crate::envs::{Environment, PointMassEnv};
use crate::error::{Error, Result};
use crate::linalg::{check_dim, cholesky_spd, floor_spd, inverse_spd, log_det_spd, symmetrize};
use crate::pi2::KlBound;

/// Time-varying linear-Gaussian dynamics model
/// `x' ~ N(A_t x + B_t u + c_t, Σ_t)` with a Gaussian initial-state
/// marginal used when propagating expected KL.
#[derive(Clone, Debug)]
pub struct LinearDynamics {
    /// State transition matrices `A_t`.
    pub transitions: Vec<DMatrix<f64>>,
    /// Control matrices `B_t`.
    pub controls: Vec<DMatrix<f64>>,
    /// Drift offsets `c_t`.
    pub offsets: Vec<DVector<f64>>,
    /// Process-noise covariances `Σ_t`.
    pub noise_covs: Vec<DMatrix<f64>>,
    /// Mean of the initial state.
    pub init_mean: DVector<f64>,
    /// Covariance of the initial state.
    pub init_cov: DMatrix<f64>,
}

impl LinearDynamics {
    /// Number of modeled timesteps.
    pub fn horizon(&self) -> usize {
        self.transitions.len()
    }

    /// State dimension.
    pub fn state_dim(&self) -> usize {
        self.init_mean.len()
    }

    /// Action dimension.
    pub fn action_dim(&self) -> usize {
        self.controls[0].ncols()
    }
}

/// Second-order expansion of the per-step cost in absolute coordinates:
/// `l(x, u) ≈ ½ xᵀ Cxx x + ½ uᵀ Cuu u + uᵀ Cux x + cxᵀ x + cuᵀ u + const`.
#[derive(Clone, Debug)]
pub struct QuadraticCostExpansion {
    /// State Hessian blocks `Cxx_t`.
    pub cxx: Vec<DMatrix<f64>>,
    /// Action Hessian blocks `Cuu_t`.
    pub cuu: Vec<DMatrix<f64>>,
    /// Cross blocks `Cux_t` (action rows, state columns).
    pub cux: Vec<DMatrix<f64>>,
    /// State gradients `cx_t`.
    pub cx: Vec<DVector<f64>>,
    /// Action gradients `cu_t`.
    pub cu: Vec<DVector<f64>>,
}

impl QuadraticCostExpansion {
    /// Number of expanded timesteps.
    pub fn horizon(&self) -> usize {
        self.cxx.len()
    }
}

/// Fits per-timestep linear dynamics by regressing `x_{t+1}` on
/// `(x_t, u_t, 1)` across samples, with a small ridge term and — when a
/// previous fit is supplied — normal-inverse-Wishart-style shrinkage of
/// strength `prior_strength` pseudo-samples toward it.
pub fn fit_dynamics(
    samples: &SampleSet,
    prior_strength: f64,
    prior: Option<&LinearDynamics>,
) -> Result<LinearDynamics> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: n,
        });
    }
    let dx = samples.state_dim();
    let du = samples.action_dim();
    let horizon = samples.horizon();
    let dr = dx + du + 1;
    if let Some(p) = prior {
        check_dim("dynamics prior horizon", horizon, p.horizon())?;
        check_dim("dynamics prior state dim", dx, p.state_dim())?;
        check_dim("dynamics prior action dim", du, p.action_dim())?;
    }

    let mut transitions = Vec::with_capacity(horizon);
    let mut controls = Vec::with_capacity(horizon);
    let mut offsets = Vec::with_capacity(horizon);
    let mut noise_covs = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let mut gram = DMatrix::<f64>::zeros(dr, dr);
        let mut cross = DMatrix::<f64>::zeros(dr, dx);
        let mut scale = 0.0f64;
        for traj in samples.trajectories() {
            let mut w = DVector::<f64>::zeros(dr);
            w.rows_mut(0, dx).copy_from(&traj.states[t]);
            w.rows_mut(dx, du).copy_from(&traj.actions[t]);
            w[dr - 1] = 1.0;
            scale = scale.max(w.amax());
            gram += &w * w.transpose();
            cross += &w * traj.states[t + 1].transpose();
        }
        let ridge = 1e-9 * scale.max(1.0) * scale.max(1.0);
        for i in 0..dr {
            gram[(i, i)] += ridge;
        }
        if let Some(p) = prior {
            let nu = prior_strength;
            let mut w_prior = DMatrix::<f64>::zeros(dr, dx);
            w_prior
                .rows_mut(0, dx)
                .copy_from(&p.transitions[t].transpose());
            w_prior.rows_mut(dx, du).copy_from(&p.controls[t].transpose());
            w_prior.row_mut(dr - 1).copy_from(&p.offsets[t].transpose());
            for i in 0..dr {
                gram[(i, i)] += nu;
            }
            cross += w_prior * nu;
        }
        let chol = cholesky_spd(&gram, "dynamics regression gram matrix")?;
        let weights = chol.solve(&cross);

        let a_t = weights.rows(0, dx).transpose();
        let b_t = weights.rows(dx, du).transpose();
        let c_t = weights.row(dr - 1).transpose();

        let mut resid_cov = DMatrix::<f64>::zeros(dx, dx);
        for traj in samples.trajectories() {
            let pred = &a_t * &traj.states[t] + &b_t * &traj.actions[t] + &c_t;
            let r = &traj.states[t + 1] - pred;
            resid_cov += &r * r.transpose();
        }
        resid_cov /= n as f64;

        transitions.push(a_t);
        controls.push(b_t);
        offsets.push(c_t);
        noise_covs.push(floor_spd(&resid_cov, 0.0));
    }

    let init_mean = samples.mean_state(0);
    let mut init_cov = DMatrix::<f64>::zeros(dx, dx);
    for traj in samples.trajectories() {
        let d = &traj.states[0] - &init_mean;
        init_cov += &d * d.transpose();
    }
    init_cov /= n as f64;

    Ok(LinearDynamics {
        transitions,
        controls,
        offsets,
        noise_covs,
        init_mean,
        init_cov: floor_spd(&init_cov, 0.0),
    })
}

/// Expands the environment cost to second order around the per-timestep
/// sample means by central finite differences with step `fd_step`.
///
/// On costs with hard conditionals (the latch penalty) the expansion sees
/// no gradient until the means straddle the discontinuity — the structural
/// blind spot of this baseline, left intact on purpose.
pub fn expand_cost<E: Environment>(
    env: &E,
    samples: &SampleSet,
    fd_step: f64,
) -> Result<QuadraticCostExpansion> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidParameter {
            name: "fd_step",
            reason: alloc::format!("must be positive, got {fd_step}"),
        });
    }
    check_dim("expansion state dim", env.state_dim(), samples.state_dim())?;
    check_dim("expansion action dim", env.action_dim(), samples.action_dim())?;
    check_dim("expansion horizon", env.horizon(), samples.horizon())?;
    let dx = samples.state_dim();
    let du = samples.action_dim();
    let dz = dx + du;
    let h = fd_step;

    let mut cxx = Vec::with_capacity(samples.horizon());
    let mut cuu = Vec::with_capacity(samples.horizon());
    let mut cux = Vec::with_capacity(samples.horizon());
    let mut cx = Vec::with_capacity(samples.horizon());
    let mut cu = Vec::with_capacity(samples.horizon());

    for t in 0..samples.horizon() {
        let x_bar = samples.mean_state(t);
        let u_bar = samples.mean_action(t);
        let eval = |dxv: &DVector<f64>, duv: &DVector<f64>| {
            env.cost(&(&x_bar + dxv), &(&u_bar + duv), t)
        };
        let base = eval(&DVector::zeros(dx), &DVector::zeros(du));

        // Joint coordinates z = (x, u): gradient and Hessian by central
        // differences, then split into blocks.
        let at = |steps: &[(usize, f64)]| {
            let mut dxv = DVector::zeros(dx);
            let mut duv = DVector::zeros(du);
            for &(i, s) in steps {
                if i < dx {
                    dxv[i] += s;
                } else {
                    duv[i - dx] += s;
                }
            }
            eval(&dxv, &duv)
        };

        let mut grad = DVector::<f64>::zeros(dz);
        let mut hess = DMatrix::<f64>::zeros(dz, dz);
        for i in 0..dz {
            let plus = at(&[(i, h)]);
            let minus = at(&[(i, -h)]);
            grad[i] = (plus - minus) / (2.0 * h);
            hess[(i, i)] = (plus - 2.0 * base + minus) / (h * h);
        }
        for i in 0..dz {
            for j in 0..i {
                let pp = at(&[(i, h), (j, h)]);
                let pm = at(&[(i, h), (j, -h)]);
                let mp = at(&[(i, -h), (j, h)]);
                let mm = at(&[(i, -h), (j, -h)]);
                let v = (pp - pm - mp + mm) / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        if grad.iter().any(|v| !v.is_finite()) || hess.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "cost expansion",
            });
        }

        let hxx = hess.view((0, 0), (dx, dx)).into_owned();
        let huu = hess.view((dx, dx), (du, du)).into_owned();
        let hux = hess.view((dx, 0), (du, dx)).into_owned();
        let gx = grad.rows(0, dx).into_owned();
        let gu = grad.rows(dx, du).into_owned();

        // Re-center from (x̄, ū)-relative to absolute coordinates.
        cx.push(&gx - &hxx * &x_bar - hux.transpose() * &u_bar);
        cu.push(&gu - &huu * &u_bar - &hux * &x_bar);
        cxx.push(symmetrize(&hxx));
        cuu.push(symmetrize(&huu));
        cux.push(hux);
    }

    Ok(QuadraticCostExpansion {
        cxx,
        cuu,
        cux,
        cx,
        cu,
    })
}

/// Outcome of one KL-constrained backward pass.
pub struct LqrStep {
    /// The improved policy.
    pub policy: LinGaussPolicy,
    /// Temperature the bisection settled on.
    pub eta: f64,
    /// Expected trajectory-sum KL(new ‖ prev) at that temperature.
    pub achieved_kl: f64,
}

/// Improves `prev` by a backward pass on `cost` scaled by `1/η` and
/// augmented with `-log prev(u|x)`, choosing `η` by bisection so the
/// expected trajectory-sum KL to `prev` under `dyn` falls within
/// `[0.9, 1.1] · T·ε`. An infinite bound skips the augmentation and
/// returns the unconstrained minimizer of the expanded cost.
pub fn lqr_backward_kl(
    dynamics: &LinearDynamics,
    cost: &QuadraticCostExpansion,
    prev: &LinGaussPolicy,
    bound: KlBound,
) -> Result<LqrStep> {
    let horizon = prev.horizon();
    check_dim("dynamics horizon", horizon, dynamics.horizon())?;
    check_dim("cost horizon", horizon, cost.horizon())?;
    check_dim("dynamics state dim", prev.state_dim(), dynamics.state_dim())?;
    check_dim("dynamics action dim", prev.action_dim(), dynamics.action_dim())?;

    if bound.epsilon().is_infinite() {
        let policy = backward_pass(dynamics, cost, None, prev)?;
        let achieved_kl = expected_trajectory_kl(dynamics, &policy, prev)?;
        return Ok(LqrStep {
            policy,
            eta: 0.0,
            achieved_kl,
        });
    }

    let eps_total = bound.epsilon() * horizon as f64;
    let evaluate = |eta: f64| -> Result<(LinGaussPolicy, f64)> {
        let policy = backward_pass(dynamics, cost, Some(eta), prev)?;
        let kl = expected_trajectory_kl(dynamics, &policy, prev)?;
        Ok((policy, kl))
    };

    let eta_lo = 1e-8;
    let eta_hi = 1e16;
    let (pol_lo, kl_lo) = evaluate(eta_lo)?;
    if kl_lo <= 1.1 * eps_total {
        // Even the most cost-greedy step stays within the bound.
        return Ok(LqrStep {
            policy: pol_lo,
            eta: eta_lo,
            achieved_kl: kl_lo,
        });
    }
    let (_, kl_hi) = evaluate(eta_hi)?;
    if kl_hi > 1.1 * eps_total {
        return Err(Error::BisectionFailed {
            target: eps_total,
            achievable_min: kl_hi,
            achievable_max: kl_lo,
        });
    }

    let mut lo = eta_lo.ln();
    let mut hi = eta_hi.ln();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (policy, kl) = evaluate(mid.exp())?;
        if kl >= 0.9 * eps_total && kl <= 1.1 * eps_total {
            return Ok(LqrStep {
                policy,
                eta: mid.exp(),
                achieved_kl: kl,
            });
        }
        if kl > eps_total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::BisectionFailed {
        target: eps_total,
        achievable_min: kl_hi,
        achievable_max: kl_lo,
    })
}

/// One backward Riccati-style pass. With `eta` given, the cost blocks are
/// scaled by `1/η` and the quadratic expansion of `-log prev(u|x)` is
/// added; with `eta == None` the raw expansion is used alone.
fn backward_pass(
    dynamics: &LinearDynamics,
    cost: &QuadraticCostExpansion,
    eta: Option<f64>,
    prev: &LinGaussPolicy,
) -> Result<LinGaussPolicy> {
    let horizon = prev.horizon();
    let dx = prev.state_dim();

    let mut vxx = DMatrix::<f64>::zeros(dx, dx);
    let mut vx = DVector::<f64>::zeros(dx);
    let mut policy = prev.clone();

    for t in (0..horizon).rev() {
        let inv_eta = eta.map(|e| 1.0 / e).unwrap_or(1.0);
        let mut cxx_t = &cost.cxx[t] * inv_eta;
        let mut cuu_t = &cost.cuu[t] * inv_eta;
        let mut cux_t = &cost.cux[t] * inv_eta;
        let mut cx_t = &cost.cx[t] * inv_eta;
        let mut cu_t = &cost.cu[t] * inv_eta;
        if eta.is_some() {
            let lambda = inverse_spd(prev.covariance_at(t), "previous policy covariance")?;
            let k_bar = prev.gain(t);
            let ff_bar = prev.feedforward(t);
            let lk = &lambda * k_bar;
            cxx_t += k_bar.transpose() * &lk;
            cuu_t += &lambda;
            cux_t -= &lk;
            cx_t += k_bar.transpose() * (&lambda * ff_bar);
            cu_t -= &lambda * ff_bar;
        }

        let a_t = &dynamics.transitions[t];
        let b_t = &dynamics.controls[t];
        let c_t = &dynamics.offsets[t];

        let qxx = &cxx_t + a_t.transpose() * &vxx * a_t;
        let quu = symmetrize(&(&cuu_t + b_t.transpose() * &vxx * b_t));
        let qux = &cux_t + b_t.transpose() * &vxx * a_t;
        let vc = &vxx * c_t + &vx;
        let qx = &cx_t + a_t.transpose() * &vc;
        let qu = &cu_t + b_t.transpose() * &vc;

        let quu_reg = regularize_pd(&quu)?;
        let quu_inv = inverse_spd(&quu_reg, "action-value Hessian")?;
        let gain = -(&quu_inv * &qux);
        let ff = -(&quu_inv * &qu);
        let cov = floor_spd(&quu_inv, crate::controllers::DEFAULT_COVARIANCE_FLOOR);

        vxx = symmetrize(&(&qxx + qux.transpose() * &gain));
        vx = &qx + qux.transpose() * &ff;

        policy.set_step(t, gain, ff, cov);
    }
    Ok(policy)
}

/// Levenberg-style regularization: adds the smallest power-of-ten multiple
/// of the identity that makes the matrix positive definite.
fn regularize_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = m.diagonal().amax().max(1.0);
    let mut mu = 0.0;
    loop {
        let mut candidate = m.clone();
        for i in 0..m.nrows() {
            candidate[(i, i)] += mu;
        }
        if cholesky_spd(&candidate, "regularized Hessian").is_ok() {
            return Ok(candidate);
        }
        mu = if mu == 0.0 { 1e-10 * scale } else { mu * 10.0 };
        if mu > 1e8 * scale {
            return Err(Error::NotPositiveDefinite {
                what: "action-value Hessian",
            });
        }
    }
}

/// Expected trajectory-sum `Σ_t E[KL(new(·|x_t) ‖ prev(·|x_t))]` with the
/// state marginal propagated as a Gaussian through the fitted dynamics
/// under the new policy.
pub fn expected_trajectory_kl(
    dynamics: &LinearDynamics,
    new: &LinGaussPolicy,
    prev: &LinGaussPolicy,
) -> Result<f64> {
    let horizon = new.horizon();
    check_dim("kl horizon", horizon, prev.horizon())?;
    check_dim("kl horizon", horizon, dynamics.horizon())?;
    let du = new.action_dim() as f64;

    let mut mu = dynamics.init_mean.clone();
    let mut sigma = dynamics.init_cov.clone();
    let mut total = 0.0;
    for t in 0..horizon {
        let c_new = new.covariance_at(t);
        let c_prev = prev.covariance_at(t);
        let prev_inv = inverse_spd(c_prev, "previous policy covariance")?;
        let dk = new.gain(t) - prev.gain(t);
        let dff = (&dk * &mu) + (new.feedforward(t) - prev.feedforward(t));
        let trace = (&prev_inv * c_new).trace();
        let maha = dff.dot(&(&prev_inv * &dff));
        let spread = (&prev_inv * &dk * &sigma * dk.transpose()).trace();
        let logdets = log_det_spd(c_prev, "previous policy covariance")?
            - log_det_spd(c_new, "new policy covariance")?;
        total += 0.5 * (trace + maha + spread - du + logdets);

        let a_cl = &dynamics.transitions[t] + &dynamics.controls[t] * new.gain(t);
        mu = &dynamics.transitions[t] * &mu
            + &dynamics.controls[t] * new.mean_action(t, &mu)
            + &dynamics.offsets[t];
        sigma = symmetrize(
            &(&a_cl * &sigma * a_cl.transpose()
                + &dynamics.controls[t] * new.covariance_at(t) * dynamics.controls[t].transpose()
                + &dynamics.noise_covs[t]),
        );
    }
    Ok(total)
}

/// Exact discrete-time linearization of the point-mass dynamics, with the
/// configured start as a deterministic initial marginal.
pub fn point_mass_dynamics(env: &PointMassEnv) -> LinearDynamics {
    let dt = env.dt;
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, dt, 0.0, //
            0.0, 1.0, 0.0, dt, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    );
    let b = DMatrix::from_row_slice(
        4,
        2,
        &[
            0.5 * dt * dt,
            0.0,
            0.0,
            0.5 * dt * dt,
            dt,
            0.0,
            0.0,
            dt,
        ],
    );
    LinearDynamics {
        transitions: alloc::vec![a; env.horizon],
        controls: alloc::vec![b; env.horizon],
        offsets: alloc::vec![DVector::zeros(4); env.horizon],
        noise_covs: alloc::vec![DMatrix::zeros(4, 4); env.horizon],
        init_mean: env.initial_state(),
        init_cov: DMatrix::zeros(4, 4),
    }
}

/// Exact quadratic expansion of the point-mass cost in absolute
/// coordinates.
pub fn point_mass_cost_expansion(env: &PointMassEnv) -> QuadraticCostExpansion {
    let mut cxx = DMatrix::<f64>::zeros(4, 4);
    cxx[(0, 0)] = 2.0 * env.w_pos;
    cxx[(1, 1)] = 2.0 * env.w_pos;
    cxx[(2, 2)] = 2.0 * env.w_vel;
    cxx[(3, 3)] = 2.0 * env.w_vel;
    let cuu = DMatrix::identity(2, 2) * (2.0 * env.w_u);
    let cx = DVector::from_column_slice(&[
        -2.0 * env.w_pos * env.goal[0],
        -2.0 * env.w_pos * env.goal[1],
        0.0,
        0.0,
    ]);
    QuadraticCostExpansion {
        cxx: alloc::vec![cxx; env.horizon],
        cuu: alloc::vec![cuu; env.horizon],
        cux: alloc::vec![DMatrix::zeros(2, 4); env.horizon],
        cx: alloc::vec![cx; env.horizon],
        cu: alloc::vec![DVector::zeros(2); env.horizon],
    }
}
