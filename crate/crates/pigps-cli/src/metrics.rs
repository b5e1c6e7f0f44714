//! Metrics persistence: one CSV row per (iteration, instance) with a fixed
//! column set, written incrementally so partial runs keep everything
//! produced so far, plus the parser the comparison report runs on.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use pigps_core::gps::IterationRecord;

pub const METRICS_HEADER: &str =
    "iteration,instance_id,mean_cost,success_rate,min_eta,max_eta,kl_to_global";

/// Incremental CSV writer that flushes after every iteration so a crashed
/// run leaves a readable file behind.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        let file = File::create(path)
            .map_err(|e| anyhow::anyhow!("creating {}: {e}", path.display()))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, record: &IterationRecord) -> anyhow::Result<()> {
        let mut block = String::new();
        for m in &record.instances {
            writeln!(
                block,
                "{},{},{},{},{},{},{}",
                record.iteration,
                m.instance_id,
                fmt_f64(m.mean_cost),
                fmt_f64(m.success_rate),
                fmt_f64(m.min_eta),
                fmt_f64(m.max_eta),
                fmt_f64(m.kl_to_global),
            )?;
        }
        self.out.write_all(block.as_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Shortest-representation float formatting (Rust's default `Display`),
/// which round-trips exactly and never depends on locale.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// One parsed metrics row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub instance_id: u64,
    pub mean_cost: f64,
    pub success_rate: f64,
    pub min_eta: f64,
    pub max_eta: f64,
    pub kl_to_global: f64,
}

pub fn parse_metrics(text: &str) -> anyhow::Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim_end() == METRICS_HEADER => {}
        other => anyhow::bail!(
            "metrics header mismatch: expected \"{METRICS_HEADER}\", got {other:?}"
        ),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            anyhow::bail!("metrics line {}: expected 7 fields, got {}", idx + 2, fields.len());
        }
        let parse = |what: &str, s: &str| -> anyhow::Result<f64> {
            s.parse::<f64>()
                .map_err(|e| anyhow::anyhow!("metrics line {}: {what}: {e}", idx + 2))
        };
        rows.push(MetricsRow {
            iteration: fields[0]
                .parse()
                .map_err(|e| anyhow::anyhow!("metrics line {}: iteration: {e}", idx + 2))?,
            instance_id: fields[1]
                .parse()
                .map_err(|e| anyhow::anyhow!("metrics line {}: instance_id: {e}", idx + 2))?,
            mean_cost: parse("mean_cost", fields[2])?,
            success_rate: parse("success_rate", fields[3])?,
            min_eta: parse("min_eta", fields[4])?,
            max_eta: parse("max_eta", fields[5])?,
            kl_to_global: parse("kl_to_global", fields[6])?,
        });
    }
    Ok(rows)
}

pub fn load_metrics(path: &Path) -> anyhow::Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    parse_metrics(&text)
}

/// Mean instance cost per iteration, in iteration order: the per-seed
/// learning curve the reports aggregate.
pub fn cost_curve(rows: &[MetricsRow]) -> Vec<(usize, f64)> {
    let mut curve: Vec<(usize, f64, usize)> = Vec::new();
    for row in rows {
        match curve.last_mut() {
            Some((it, sum, n)) if *it == row.iteration => {
                *sum += row.mean_cost;
                *n += 1;
            }
            _ => curve.push((row.iteration, row.mean_cost, 1)),
        }
    }
    curve
        .into_iter()
        .map(|(it, sum, n)| (it, sum / n as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use pigps_core::gps::InstanceMetrics;

    fn record(iteration: usize, costs: &[f64]) -> IterationRecord {
        IterationRecord {
            iteration,
            instances: costs
                .iter()
                .enumerate()
                .map(|(i, &c)| InstanceMetrics {
                    instance_id: i as u64,
                    mean_cost: c,
                    success_rate: 0.5,
                    min_eta: 0.125,
                    max_eta: 8.0,
                    kl_to_global: 1.5,
                })
                .collect(),
        }
    }

    #[test]
    fn written_rows_parse_back_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut writer = MetricsWriter::create(&path).unwrap();
        writer
            .append(&record(0, &[1.25, 0.0625e-3, 3.0e17]))
            .unwrap();
        writer.append(&record(1, &[0.1 + 0.2])).unwrap();
        drop(writer);

        let rows = load_metrics(&path).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].mean_cost, 1.25);
        assert_eq!(rows[1].mean_cost, 0.0625e-3);
        assert_eq!(rows[2].mean_cost, 3.0e17);
        assert_eq!(rows[3].mean_cost, 0.1 + 0.2);
        assert_eq!(rows[3].iteration, 1);
        assert_eq!(rows[0].min_eta, 0.125);
    }

    #[test]
    fn header_is_the_pinned_column_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        MetricsWriter::create(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "iteration,instance_id,mean_cost,success_rate,min_eta,max_eta,kl_to_global\n"
        );
    }

    #[test]
    fn curve_averages_instances_within_an_iteration() {
        let rows = parse_metrics(
            "iteration,instance_id,mean_cost,success_rate,min_eta,max_eta,kl_to_global\n\
             0,0,2,0,1,1,0\n0,1,4,0,1,1,0\n1,0,1,0,1,1,0\n",
        )
        .unwrap();
        assert_eq!(cost_curve(&rows), vec![(0, 3.0), (1, 1.0)]);
    }

    #[test]
    fn foreign_headers_are_rejected() {
        assert!(parse_metrics("iteration,cost\n0,1\n").is_err());
    }
}
