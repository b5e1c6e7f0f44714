//! Versioned policy checkpoints: both controller kinds serialize to one
//! JSON document carrying dimensions, the horizon, and row-major matrix
//! data, and load back into the exact policy that was saved.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use pigps_core::controllers::{LinGaussPolicy, Policy};
use pigps_core::mlp::MlpPolicy;
use serde::{Deserialize, Serialize};

pub const POLICY_SCHEMA: &str = "pigps-policy/v1";

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct CheckpointFile {
    pub schema: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    #[serde(flatten)]
    pub policy: CheckpointPolicy,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// Time-varying linear-Gaussian controller: per-timestep gains
    /// (`action_dim × state_dim`, row-major), feedforwards, and action
    /// covariances (`action_dim × action_dim`, row-major).
    LinGauss {
        gains: Vec<Vec<f64>>,
        feedforwards: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
    },
    /// Feedforward network: per-layer weights (`fan_out × fan_in`,
    /// row-major) and biases, plus per-timestep noise covariances.
    Mlp {
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        noise_covariances: Vec<Vec<f64>>,
    },
}

/// A policy loaded from disk, ready to evaluate.
#[derive(Debug)]
pub enum LoadedPolicy {
    LinGauss(LinGaussPolicy),
    Mlp(MlpPolicy),
}

impl LoadedPolicy {
    pub fn as_policy(&self) -> &dyn Policy {
        match self {
            LoadedPolicy::LinGauss(p) => p,
            LoadedPolicy::Mlp(p) => p,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LoadedPolicy::LinGauss(_) => "lin_gauss",
            LoadedPolicy::Mlp(_) => "mlp",
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut rows = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            rows.push(m[(r, c)]);
        }
    }
    rows
}

fn matrix_from_rows(nrows: usize, ncols: usize, data: &[f64], what: &str) -> anyhow::Result<DMatrix<f64>> {
    if data.len() != nrows * ncols {
        anyhow::bail!(
            "{what}: expected {nrows}x{ncols} = {} entries, got {}",
            nrows * ncols,
            data.len()
        );
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, data))
}

fn vector_from(len: usize, data: &[f64], what: &str) -> anyhow::Result<DVector<f64>> {
    if data.len() != len {
        anyhow::bail!("{what}: expected {len} entries, got {}", data.len());
    }
    Ok(DVector::from_column_slice(data))
}

pub fn encode_lin_gauss(policy: &LinGaussPolicy) -> CheckpointFile {
    let t_total = policy.horizon();
    CheckpointFile {
        schema: POLICY_SCHEMA.to_owned(),
        state_dim: policy.state_dim(),
        action_dim: policy.action_dim(),
        horizon: t_total,
        policy: CheckpointPolicy::LinGauss {
            gains: (0..t_total).map(|t| matrix_rows(policy.gain(t))).collect(),
            feedforwards: (0..t_total)
                .map(|t| policy.feedforward(t).iter().copied().collect())
                .collect(),
            covariances: (0..t_total)
                .map(|t| matrix_rows(policy.covariance_at(t)))
                .collect(),
        },
    }
}

pub fn encode_mlp(policy: &MlpPolicy) -> CheckpointFile {
    let weights = policy.layer_weights();
    let mut layer_sizes = vec![weights[0].ncols()];
    layer_sizes.extend(weights.iter().map(|w| w.nrows()));
    CheckpointFile {
        schema: POLICY_SCHEMA.to_owned(),
        state_dim: policy.state_dim(),
        action_dim: policy.action_dim(),
        horizon: policy.horizon(),
        policy: CheckpointPolicy::Mlp {
            layer_sizes,
            weights: weights.iter().map(matrix_rows).collect(),
            biases: policy
                .layer_biases()
                .iter()
                .map(|b| b.iter().copied().collect())
                .collect(),
            noise_covariances: policy.noise_covariances().iter().map(matrix_rows).collect(),
        },
    }
}

pub fn decode(file: &CheckpointFile) -> anyhow::Result<LoadedPolicy> {
    if file.schema != POLICY_SCHEMA {
        anyhow::bail!(
            "checkpoint schema: expected \"{POLICY_SCHEMA}\", got \"{}\"",
            file.schema
        );
    }
    let (dx, du, t_total) = (file.state_dim, file.action_dim, file.horizon);
    match &file.policy {
        CheckpointPolicy::LinGauss {
            gains,
            feedforwards,
            covariances,
        } => {
            if gains.len() != t_total || feedforwards.len() != t_total || covariances.len() != t_total {
                anyhow::bail!(
                    "controller checkpoint: horizon {t_total} but {} gains, {} feedforwards, {} covariances",
                    gains.len(),
                    feedforwards.len(),
                    covariances.len()
                );
            }
            let gains = gains
                .iter()
                .enumerate()
                .map(|(t, g)| matrix_from_rows(du, dx, g, &format!("gain at t={t}")))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let ffs = feedforwards
                .iter()
                .enumerate()
                .map(|(t, k)| vector_from(du, k, &format!("feedforward at t={t}")))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let covs = covariances
                .iter()
                .enumerate()
                .map(|(t, c)| matrix_from_rows(du, du, c, &format!("covariance at t={t}")))
                .collect::<anyhow::Result<Vec<_>>>()?;
            Ok(LoadedPolicy::LinGauss(LinGaussPolicy::new(gains, ffs, covs)?))
        }
        CheckpointPolicy::Mlp {
            layer_sizes,
            weights,
            biases,
            noise_covariances,
        } => {
            if layer_sizes.len() < 2 {
                anyhow::bail!("network checkpoint: need at least input and output layer sizes");
            }
            if layer_sizes[0] != dx || *layer_sizes.last().expect("nonempty") != du {
                anyhow::bail!(
                    "network checkpoint: layer sizes {layer_sizes:?} do not match dims {dx} -> {du}"
                );
            }
            if weights.len() + 1 != layer_sizes.len() || biases.len() != weights.len() {
                anyhow::bail!(
                    "network checkpoint: {} layer sizes but {} weight and {} bias blocks",
                    layer_sizes.len(),
                    weights.len(),
                    biases.len()
                );
            }
            if noise_covariances.len() != t_total {
                anyhow::bail!(
                    "network checkpoint: horizon {t_total} but {} noise covariances",
                    noise_covariances.len()
                );
            }
            let weights = weights
                .iter()
                .enumerate()
                .map(|(l, w)| {
                    matrix_from_rows(
                        layer_sizes[l + 1],
                        layer_sizes[l],
                        w,
                        &format!("weights of layer {l}"),
                    )
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let biases = biases
                .iter()
                .enumerate()
                .map(|(l, b)| vector_from(layer_sizes[l + 1], b, &format!("biases of layer {l}")))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let covs = noise_covariances
                .iter()
                .enumerate()
                .map(|(t, c)| matrix_from_rows(du, du, c, &format!("noise covariance at t={t}")))
                .collect::<anyhow::Result<Vec<_>>>()?;
            Ok(LoadedPolicy::Mlp(MlpPolicy::from_parts(weights, biases, covs)?))
        }
    }
}

pub fn save(file: &CheckpointFile, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(file)?;
    std::fs::write(path, text).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
    Ok(())
}

pub fn load(path: &Path) -> anyhow::Result<LoadedPolicy> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    decode(&file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn controller() -> LinGaussPolicy {
        let gains = (0..3)
            .map(|t| DMatrix::from_fn(2, 4, |r, c| (t * 8 + r * 4 + c) as f64 * 0.1 - 0.9))
            .collect();
        let ffs = (0..3)
            .map(|t| DVector::from_fn(2, |r, _| t as f64 + 0.5 * r as f64))
            .collect();
        let covs = (0..3)
            .map(|t| DMatrix::from_diagonal(&DVector::from_element(2, 0.3 + t as f64 * 0.01)))
            .collect();
        LinGaussPolicy::new(gains, ffs, covs).unwrap()
    }

    #[test]
    fn controller_round_trip_preserves_every_entry() {
        let policy = controller();
        let file = encode_lin_gauss(&policy);
        let text = serde_json::to_string(&file).unwrap();
        let back: CheckpointFile = serde_json::from_str(&text).unwrap();
        assert_eq!(file, back);
        let LoadedPolicy::LinGauss(reloaded) = decode(&back).unwrap() else {
            panic!("wrong kind");
        };
        for t in 0..3 {
            assert_relative_eq!(policy.gain(t), reloaded.gain(t), epsilon = 0.0);
            assert_relative_eq!(policy.feedforward(t), reloaded.feedforward(t), epsilon = 0.0);
            assert_relative_eq!(policy.covariance_at(t), reloaded.covariance_at(t), epsilon = 0.0);
        }
    }

    #[test]
    fn network_round_trip_preserves_forward_outputs() {
        let policy = MlpPolicy::new(4, &[8, 6], 2, 5, 0.4, 99).unwrap();
        let file = encode_mlp(&policy);
        let text = serde_json::to_string(&file).unwrap();
        let back: CheckpointFile = serde_json::from_str(&text).unwrap();
        let LoadedPolicy::Mlp(reloaded) = decode(&back).unwrap() else {
            panic!("wrong kind");
        };
        let x = DVector::from_vec(vec![0.3, -0.8, 1.2, 0.05]);
        assert_relative_eq!(policy.forward(&x), reloaded.forward(&x), epsilon = 0.0);
        assert_relative_eq!(
            policy.noise_covariances()[3],
            reloaded.noise_covariances()[3],
            epsilon = 0.0
        );
    }

    #[test]
    fn corrupted_dimensions_are_rejected_with_context() {
        let mut file = encode_lin_gauss(&controller());
        if let CheckpointPolicy::LinGauss { gains, .. } = &mut file.policy {
            gains[1].pop();
        }
        let err = decode(&file).unwrap_err().to_string();
        assert!(err.contains("gain at t=1"), "{err}");
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let mut file = encode_lin_gauss(&controller());
        file.schema = "pigps-policy/v0".to_owned();
        assert!(decode(&file).is_err());
    }
}
