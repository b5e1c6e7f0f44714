//! Oracles and invariants for the cost-to-go weighting machinery: an
//! independent reverse-cumulative-sum, a direct two-point softmax
//! evaluation, a brute-force grid search for the temperature, a plain-loop
//! weighted-MLE recomputation, and the dual-feasibility / monotonicity /
//! shift-invariance properties.

use nalgebra::{DMatrix, DVector};
use pigps_core::controllers::{LinGaussPolicy, SampleSet, Trajectory};
use pigps_core::pi2::{
    cost_to_go, pi2_update, solve_eta, solve_weights, softmax_weights, weight_kl_to_uniform,
    CostToGoTable, KlBound, ETA_MAX, ETA_MIN,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample_set_from_costs(costs: &[Vec<f64>], du: usize) -> SampleSet {
    let horizon = costs[0].len();
    let trajectories = costs
        .iter()
        .map(|row| Trajectory {
            states: vec![DVector::zeros(2); horizon + 1],
            actions: vec![DVector::zeros(du); horizon],
            noise: vec![DVector::zeros(du); horizon],
            costs: row.clone(),
        })
        .collect();
    SampleSet::new(trajectories).unwrap()
}

#[test]
fn cost_to_go_matches_reverse_cumulative_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.random_range(2..8);
        let horizon = rng.random_range(1..9);
        let costs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..horizon).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();

        // Oracle: accumulate each row back to front with plain loops.
        let mut expected = vec![vec![0.0; horizon]; n];
        for (i, row) in costs.iter().enumerate() {
            let mut acc = 0.0;
            for t in (0..horizon).rev() {
                acc += row[t];
                expected[i][t] = acc;
            }
        }

        let set = sample_set_from_costs(&costs, 1);
        let table = cost_to_go(&set).unwrap();
        for i in 0..n {
            for t in 0..horizon {
                assert_eq!(table.values()[(i, t)], expected[i][t]);
            }
        }
    }
}

#[test]
fn two_point_softmax_matches_direct_evaluation() {
    let weights = softmax_weights(&[0.0, 1.0], 1.0).unwrap();
    let expected_first = 1.0 / (1.0 + (-1.0_f64).exp());
    let expected_second = (-1.0_f64).exp() / (1.0 + (-1.0_f64).exp());
    assert!((weights[0] - expected_first).abs() < 1e-15);
    assert!((weights[1] - expected_second).abs() < 1e-15);
    assert!((expected_first - 0.7311).abs() < 1e-4);
    assert!((expected_second - 0.2689).abs() < 1e-4);
}

/// Independent evaluation of the dual for the grid search below.
fn dual_oracle(eta: f64, costs: &[f64], epsilon: f64) -> f64 {
    let n = costs.len() as f64;
    let sum: f64 = costs.iter().map(|&s| (-s / eta).exp()).sum();
    eta * epsilon + eta * (sum / n).ln()
}

#[test]
fn two_point_temperature_matches_grid_search_oracle() {
    let costs = [0.0, 1.0];
    let epsilon = 0.1;

    let points = 1_000_000;
    let (log_lo, log_hi) = (ETA_MIN.ln(), ETA_MAX.ln());
    let mut best_eta = ETA_MIN;
    let mut best_value = f64::INFINITY;
    for k in 0..=points {
        let eta = (log_lo + (log_hi - log_lo) * k as f64 / points as f64).exp();
        let value = dual_oracle(eta, &costs, epsilon);
        if value < best_value {
            best_value = value;
            best_eta = eta;
        }
    }

    let eta = solve_eta(&costs, KlBound::new(epsilon).unwrap()).unwrap();
    assert!(
        (eta - best_eta).abs() / best_eta < 1e-3,
        "solver {eta} vs grid {best_eta}"
    );

    let weights = softmax_weights(&costs, eta).unwrap();
    assert!((weight_kl_to_uniform(&weights) - epsilon).abs() < 1e-3);
}

#[test]
fn update_matches_plain_loop_weighted_mle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let du = 2;
    let dx = 2;
    for _ in 0..100 {
        let n = rng.random_range(3..9);
        let horizon = rng.random_range(1..5);
        let gain = DMatrix::from_fn(du, dx, |_, _| rng.random_range(-1.0..1.0));
        let policy = LinGaussPolicy::stationary(
            horizon,
            gain.clone(),
            DVector::zeros(du),
            DMatrix::identity(du, du),
        )
        .unwrap();

        let trajectories: Vec<Trajectory> = (0..n)
            .map(|_| {
                let states: Vec<DVector<f64>> = (0..=horizon)
                    .map(|_| DVector::from_fn(dx, |_, _| rng.random_range(-2.0..2.0)))
                    .collect();
                Trajectory {
                    actions: (0..horizon)
                        .map(|_| DVector::from_fn(du, |_, _| rng.random_range(-3.0..3.0)))
                        .collect(),
                    noise: vec![DVector::zeros(du); horizon],
                    costs: (0..horizon).map(|_| rng.random_range(0.0..4.0)).collect(),
                    states,
                }
            })
            .collect();
        let set = SampleSet::new(trajectories.clone()).unwrap();
        let bound = KlBound::new(rng.random_range(0.05..1.5)).unwrap();
        let step = pi2_update(&policy, &set, bound, 1e-6, None).unwrap();

        // Brute-force recomputation with scalar loops: realized
        // feedforwards, their weighted mean, and the weighted
        // outer-product covariance around it.
        let probabilities = step.weights.probabilities();
        for t in 0..horizon {
            let mut feedforwards = vec![vec![0.0; du]; n];
            for i in 0..n {
                let x = &trajectories[i].states[t];
                let u = &trajectories[i].actions[t];
                for a in 0..du {
                    let mut fed = u[a];
                    for b in 0..dx {
                        fed -= gain[(a, b)] * x[b];
                    }
                    feedforwards[i][a] = fed;
                }
            }
            let mut mean = vec![0.0; du];
            for i in 0..n {
                for a in 0..du {
                    mean[a] += probabilities[(i, t)] * feedforwards[i][a];
                }
            }
            let mut cov = vec![vec![0.0; du]; du];
            for i in 0..n {
                for a in 0..du {
                    for b in 0..du {
                        cov[a][b] += probabilities[(i, t)]
                            * (feedforwards[i][a] - mean[a])
                            * (feedforwards[i][b] - mean[b]);
                    }
                }
            }

            // The library floors eigenvalues at 1e-6; the plain-loop oracle
            // has no eigendecomposition, so only compare when the raw
            // covariance is comfortably above the floor.
            let trace = cov[0][0] + cov[1][1];
            let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
            let min_eig = 0.5 * (trace - (trace * trace - 4.0 * det).max(0.0).sqrt());
            for a in 0..du {
                assert!(
                    (step.policy.feedforward(t)[a] - mean[a]).abs() < 1e-10,
                    "feedforward mismatch at t={t}"
                );
            }
            if min_eig > 1e-5 {
                for a in 0..du {
                    for b in 0..du {
                        assert!(
                            (step.policy.covariance_at(t)[(a, b)] - cov[a][b]).abs() < 1e-10,
                            "covariance mismatch at t={t}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn one_step_quadratic_problem_improves_in_expectation() {
    // One timestep, fixed state: actions drawn around an offset mean with
    // quadratic cost pulling toward the target action.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1000;
    let du = 2;
    let target = DVector::from_column_slice(&[1.0, -0.5]);
    let start_mean = DVector::from_column_slice(&[-1.0, 1.0]);
    let start_cov = DMatrix::identity(du, du) * 0.5;
    let policy = LinGaussPolicy::stationary(
        1,
        DMatrix::zeros(du, 2),
        start_mean.clone(),
        start_cov.clone(),
    )
    .unwrap();

    let trajectories: Vec<Trajectory> = (0..n)
        .map(|_| {
            let u = DVector::from_fn(du, |a, _| {
                start_mean[a] + 0.5_f64.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let diff = &u - &target;
            Trajectory {
                states: vec![DVector::zeros(2); 2],
                actions: vec![u],
                noise: vec![DVector::zeros(du)],
                costs: vec![diff.dot(&diff)],
            }
        })
        .collect();
    let set = SampleSet::new(trajectories).unwrap();
    let step = pi2_update(&policy, &set, KlBound::new(1.0).unwrap(), 1e-6, None).unwrap();

    let expected = |mean: &DVector<f64>, cov: &DMatrix<f64>| {
        let diff = mean - &target;
        diff.dot(&diff) + cov.trace()
    };
    let before = expected(&start_mean, &start_cov);
    let after = expected(step.policy.feedforward(0), step.policy.covariance_at(0));
    assert!(
        after < before,
        "expected cost went from {before} to {after}"
    );
}

/// Distinct cost-to-go columns with a guaranteed minimum gap, so the
/// winner-take-all weight distribution is reachable inside the bracket.
fn gapped_costs() -> impl Strategy<Value = Vec<f64>> {
    (2usize..50)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec(0.01f64..1.0, n),
                proptest::collection::vec(0.0f64..1.0, n),
            )
        })
        .prop_map(|(gaps, order_keys)| {
            let mut values: Vec<f64> = gaps
                .iter()
                .scan(0.0, |acc, g| {
                    *acc += g;
                    Some(*acc)
                })
                .collect();
            // Shuffle deterministically by pairing with the order keys.
            let mut paired: Vec<(f64, f64)> =
                order_keys.into_iter().zip(values.drain(..)).collect();
            paired.sort_by(|a, b| a.0.total_cmp(&b.0));
            paired.into_iter().map(|(_, v)| v).collect()
        })
}

proptest! {
    #[test]
    fn dual_feasibility_and_activity(costs in gapped_costs(), epsilon in 0.01f64..2.0) {
        let bound = KlBound::new(epsilon).unwrap();
        let eta = solve_eta(&costs, bound).unwrap();
        let weights = softmax_weights(&costs, eta).unwrap();
        let kl = weight_kl_to_uniform(&weights);
        prop_assert!(kl <= epsilon + 1e-4, "kl {kl} exceeds bound {epsilon}");
        if (costs.len() as f64).ln() > epsilon {
            prop_assert!((kl - epsilon).abs() <= 1e-3, "kl {kl} not active at {epsilon}");
        }
    }

    #[test]
    fn lower_cost_to_go_never_gets_less_weight(costs in gapped_costs(), epsilon in 0.01f64..2.0) {
        let eta = solve_eta(&costs, KlBound::new(epsilon).unwrap()).unwrap();
        let weights = softmax_weights(&costs, eta).unwrap();
        for i in 0..costs.len() {
            for j in 0..costs.len() {
                if costs[i] < costs[j] {
                    prop_assert!(weights[i] >= weights[j]);
                    // At aggressive temperatures both weights can underflow
                    // to exactly zero; demand strict ordering only while the
                    // better sample's weight is representable.
                    if weights[i] >= 1e-300 {
                        prop_assert!(weights[i] > weights[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn weights_are_invariant_to_uniform_cost_shifts(
        seed in 0u64..1000,
        shift in -50.0f64..50.0,
        epsilon in 0.05f64..1.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..8);
        let horizon = rng.random_range(1..5);
        let costs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..horizon).map(|_| rng.random_range(0.0..5.0)).collect())
            .collect();
        let shifted: Vec<Vec<f64>> = costs
            .iter()
            .map(|row| row.iter().map(|c| c + shift).collect())
            .collect();
        let bound = KlBound::new(epsilon).unwrap();
        let base = solve_weights(
            &cost_to_go(&sample_set_from_costs(&costs, 1)).unwrap(),
            bound,
        )
        .unwrap();
        let moved = solve_weights(
            &cost_to_go(&sample_set_from_costs(&shifted, 1)).unwrap(),
            bound,
        )
        .unwrap();
        for t in 0..horizon {
            for i in 0..n {
                prop_assert!(
                    (base.probabilities()[(i, t)] - moved.probabilities()[(i, t)]).abs() < 1e-9
                );
            }
        }
    }

    #[test]
    fn updated_covariances_respect_the_floor(seed in 0u64..500, floor in 1e-6f64..1e-2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..7);
        let du = 2;
        let policy = LinGaussPolicy::stationary(
            2,
            DMatrix::zeros(du, 2),
            DVector::zeros(du),
            DMatrix::identity(du, du),
        )
        .unwrap();
        let trajectories: Vec<Trajectory> = (0..n)
            .map(|_| Trajectory {
                states: vec![DVector::zeros(2); 3],
                actions: (0..2)
                    .map(|_| DVector::from_fn(du, |_, _| rng.random_range(-1.0..1.0)))
                    .collect(),
                noise: vec![DVector::zeros(du); 2],
                costs: (0..2).map(|_| rng.random_range(0.0..3.0)).collect(),
            })
            .collect();
        let set = SampleSet::new(trajectories).unwrap();
        let step = pi2_update(&policy, &set, KlBound::new(0.5).unwrap(), floor, None).unwrap();
        for t in 0..2 {
            let eigs = step.policy.covariance_at(t).clone().symmetric_eigenvalues();
            for &e in eigs.iter() {
                prop_assert!(e >= floor - 1e-12, "eigenvalue {e} below floor {floor}");
            }
        }
    }

    #[test]
    fn table_columns_are_probability_vectors(costs in gapped_costs(), epsilon in 0.01f64..2.0) {
        let table = CostToGoTable::from_step_costs(&DMatrix::from_fn(
            costs.len(),
            1,
            |i, _| costs[i],
        ))
        .unwrap();
        let weights = solve_weights(&table, KlBound::new(epsilon).unwrap()).unwrap();
        let sum: f64 = (0..costs.len()).map(|i| weights.probabilities()[(i, 0)]).sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        for i in 0..costs.len() {
            prop_assert!(weights.probabilities()[(i, 0)] >= 0.0);
        }
    }
}
