//! Result rows and parameter sweeps for the `bench` command.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::experiment::{run_experiment, ExperimentConfig, ExperimentError, RunOutput};
use crate::metrics::Metrics;
use crate::trace::Protocol;

/// One CSV line per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub protocol: String,
    pub ops_per_txn: u32,
    pub seed: u64,
    pub commits: u64,
    pub aborts: u64,
    pub retries: u64,
    pub mean_latency_us: f64,
    pub p99_latency_us: u64,
    pub throughput_tps: f64,
    pub msg_delays_per_commit: f64,
}

impl ResultRow {
    pub fn new(config: &ExperimentConfig, m: &Metrics) -> Self {
        Self {
            protocol: config
                .effective_protocol()
                .unwrap_or(config.protocol)
                .name()
                .to_string(),
            ops_per_txn: config.workload.ops_per_txn,
            seed: config.sim.seed,
            commits: m.committed,
            aborts: m.aborts,
            retries: m.retries,
            mean_latency_us: m.mean_latency_us,
            p99_latency_us: m.p99_latency_us,
            throughput_tps: m.throughput_tps,
            msg_delays_per_commit: m.msg_delays_per_commit,
        }
    }
}

pub fn write_csv(rows: &[ResultRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Throughput series as `second,commits` lines.
pub fn write_throughput_csv(m: &Metrics, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["second", "commits"])?;
    for (s, c) in m.throughput.iter().enumerate() {
        w.write_record([s.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Cartesian sweep over protocols, operation counts and seeds on top of a
/// base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub protocols: Vec<Protocol>,
    pub ops_per_txn: Vec<u32>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            base: ExperimentConfig::default(),
            protocols: vec![Protocol::HaCommit, Protocol::TwoPc, Protocol::RCommit],
            ops_per_txn: vec![1, 4, 16, 64],
            seeds: vec![1],
        }
    }
}

impl SweepConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn configs(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for p in &self.protocols {
            for ops in &self.ops_per_txn {
                for seed in &self.seeds {
                    let mut c = self.base.clone();
                    c.protocol = *p;
                    c.workload.ops_per_txn = *ops;
                    c.sim.seed = *seed;
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Runs every point of the sweep, in order.
pub fn run_sweep(
    sweep: &SweepConfig,
) -> Result<Vec<(ExperimentConfig, RunOutput)>, ExperimentError> {
    sweep
        .configs()
        .into_iter()
        .map(|c| run_experiment(&c).map(|out| (c, out)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_matches_columns() {
        let row = ResultRow {
            protocol: "hacommit".into(),
            ops_per_txn: 4,
            seed: 1,
            commits: 10,
            aborts: 0,
            retries: 0,
            mean_latency_us: 100.0,
            p99_latency_us: 100,
            throughput_tps: 5.0,
            msg_delays_per_commit: 2.0,
        };
        let mut buf = Vec::new();
        write_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "protocol,ops_per_txn,seed,commits,aborts,retries,mean_latency_us,p99_latency_us,throughput_tps,msg_delays_per_commit"
        );
    }

    #[test]
    fn sweep_is_cartesian() {
        let s = SweepConfig {
            seeds: vec![1, 2],
            ..Default::default()
        };
        assert_eq!(s.configs().len(), 3 * 4 * 2);
    }

    #[test]
    fn sweep_config_round_trips_through_json() {
        let s = SweepConfig::default();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<SweepConfig>(&text).unwrap(), s);
        let partial: SweepConfig =
            serde_json::from_str(r#"{"protocols": ["2pc"], "seeds": [3]}"#).unwrap();
        assert_eq!(partial.configs().len(), 4);
    }
}
