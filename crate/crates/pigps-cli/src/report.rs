//! Cross-run comparison: aggregates per-seed learning curves into
//! per-iteration medians with quartile bands, checks that the runs used
//! the same evaluation protocol, and emits cost-ordering verdicts — or
//! withholds them when any run has too few seeds to support one. Every
//! number in the report is recomputed from the metric files alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{cost_curve, load_metrics};
use crate::runner::{AlgorithmLabel, Manifest, Protocol};

pub const REPORT_SCHEMA: &str = "pigps-report/v1";

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ComparisonReport {
    pub schema: String,
    pub protocol: Protocol,
    pub runs: Vec<RunCurve>,
    pub insufficient_seeds: bool,
    pub verdicts: Vec<Verdict>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct RunCurve {
    pub name: String,
    pub path: String,
    pub algorithm: AlgorithmLabel,
    pub seeds: Vec<u64>,
    pub iterations: Vec<usize>,
    pub median_cost: Vec<f64>,
    pub q25_cost: Vec<f64>,
    pub q75_cost: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct Verdict {
    /// Which aggregate the ranking is over.
    pub metric: String,
    /// Runs ordered from best (lowest cost) to worst, with the value.
    pub ranking: Vec<RankedRun>,
    /// Human-readable ordering, ties written as equalities.
    pub statement: String,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct RankedRun {
    pub name: String,
    pub value: f64,
}

/// Median with the averaged-middle convention for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of no values");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Linearly interpolated quantile of sorted order statistics.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of no values");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

struct LoadedRun {
    manifest: Manifest,
    path: PathBuf,
    seeds: Vec<u64>,
    /// One curve per seed; all share the run's iteration axis.
    curves: Vec<Vec<f64>>,
    iterations: Vec<usize>,
}

fn load_run(dir: &Path) -> anyhow::Result<LoadedRun> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", manifest_path.display()))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| anyhow::anyhow!("parsing {}: {e}", manifest_path.display()))?;

    let mut seeds = Vec::new();
    let mut curves = Vec::new();
    let mut iterations: Option<Vec<usize>> = None;
    for &seed in &manifest.seeds {
        let metrics_path = dir.join(format!("seed_{seed}")).join("metrics.csv");
        if !metrics_path.exists() {
            continue;
        }
        let rows = load_metrics(&metrics_path)?;
        let curve = cost_curve(&rows);
        let (its, costs): (Vec<usize>, Vec<f64>) = curve.into_iter().unzip();
        match &iterations {
            None => iterations = Some(its),
            Some(existing) if *existing == its => {}
            Some(_) => anyhow::bail!(
                "{}: seed {seed} covers different iterations than earlier seeds",
                dir.display()
            ),
        }
        seeds.push(seed);
        curves.push(costs);
    }
    if curves.is_empty() {
        anyhow::bail!("{}: no completed seeds with metrics found", dir.display());
    }
    Ok(LoadedRun {
        manifest,
        path: dir.to_path_buf(),
        seeds,
        curves,
        iterations: iterations.expect("at least one curve was loaded"),
    })
}

fn protocol_differences(a: &Protocol, b: &Protocol) -> Vec<String> {
    let to_map = |p: &Protocol| -> serde_json::Map<String, serde_json::Value> {
        match serde_json::to_value(p) {
            Ok(serde_json::Value::Object(map)) => map,
            _ => serde_json::Map::new(),
        }
    };
    let (ma, mb) = (to_map(a), to_map(b));
    ma.iter()
        .filter(|(key, va)| mb.get(*key) != Some(va))
        .map(|(key, _)| key.clone())
        .collect()
}

/// Compares two or more completed runs that share an evaluation protocol.
pub fn compare_runs(dirs: &[PathBuf]) -> anyhow::Result<ComparisonReport> {
    if dirs.len() < 2 {
        anyhow::bail!("compare needs at least two run directories, got {}", dirs.len());
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<anyhow::Result<Vec<_>>>()?;

    let reference = &runs[0];
    for other in &runs[1..] {
        let diffs = protocol_differences(&reference.manifest.protocol, &other.manifest.protocol);
        if !diffs.is_empty() {
            anyhow::bail!(
                "evaluation protocols differ between \"{}\" and \"{}\": {}",
                reference.manifest.name,
                other.manifest.name,
                diffs.join(", ")
            );
        }
        if other.iterations != reference.iterations {
            anyhow::bail!(
                "\"{}\" and \"{}\" record different iteration sets",
                reference.manifest.name,
                other.manifest.name
            );
        }
    }

    let mut notes = Vec::new();
    let mut insufficient = false;
    for run in &runs {
        if run.seeds.len() < 2 {
            insufficient = true;
            notes.push(format!(
                "run \"{}\" has {} seed(s); verdicts need at least 2 per run",
                run.manifest.name,
                run.seeds.len()
            ));
        }
    }

    let run_curves: Vec<RunCurve> = runs
        .iter()
        .map(|run| {
            let t_count = run.iterations.len();
            let mut med = Vec::with_capacity(t_count);
            let mut q25 = Vec::with_capacity(t_count);
            let mut q75 = Vec::with_capacity(t_count);
            for t in 0..t_count {
                let at_t: Vec<f64> = run.curves.iter().map(|c| c[t]).collect();
                med.push(median(&at_t));
                q25.push(quantile(&at_t, 0.25));
                q75.push(quantile(&at_t, 0.75));
            }
            RunCurve {
                name: run.manifest.name.clone(),
                path: run.path.display().to_string(),
                algorithm: run.manifest.algorithm.clone(),
                seeds: run.seeds.clone(),
                iterations: run.iterations.clone(),
                median_cost: med,
                q25_cost: q25,
                q75_cost: q75,
            }
        })
        .collect();

    let verdicts = if insufficient {
        notes.push("verdicts withheld: insufficient seeds".to_owned());
        Vec::new()
    } else {
        vec![
            ranking_verdict("final_median_cost", &run_curves, |c| {
                *c.median_cost.last().expect("nonempty curve")
            }),
            ranking_verdict("best_median_cost", &run_curves, |c| {
                c.median_cost.iter().copied().fold(f64::INFINITY, f64::min)
            }),
        ]
    };

    Ok(ComparisonReport {
        schema: REPORT_SCHEMA.to_owned(),
        protocol: reference.manifest.protocol.clone(),
        runs: run_curves,
        insufficient_seeds: insufficient,
        verdicts,
        notes,
    })
}

fn ranking_verdict(metric: &str, curves: &[RunCurve], value: impl Fn(&RunCurve) -> f64) -> Verdict {
    let mut ranking: Vec<RankedRun> = curves
        .iter()
        .map(|c| RankedRun {
            name: c.name.clone(),
            value: value(c),
        })
        .collect();
    ranking.sort_by(|a, b| a.value.total_cmp(&b.value));
    let mut statement = String::new();
    for (i, entry) in ranking.iter().enumerate() {
        if i > 0 {
            statement.push_str(if entry.value == ranking[i - 1].value {
                " = "
            } else {
                " < "
            });
        }
        statement.push_str(&entry.name);
    }
    Verdict {
        metric: metric.to_owned(),
        ranking,
        statement,
    }
}
