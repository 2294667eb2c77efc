//! Run metrics derived from an event trace.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::trace::{EventTrace, TraceKind};
use crate::types::{Decision, NodeId, ShardId, Time, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetricsOptions {
    pub start: Time,
    /// End of the measured interval; 0 means the last event.
    pub end: Time,
    /// Keep only commits in the middle half of `[start, end]`.
    pub elide: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// Logical transactions started by clients.
    pub issued: u64,
    /// Logical transactions with a committed attempt.
    pub committed: u64,
    /// Issued but never committed: gave up, in doubt or unfinished.
    pub aborted_final: u64,
    /// Attempts that ended in abort.
    pub aborts: u64,
    /// Attempts beyond the first.
    pub retries: u64,
    pub in_doubt: u64,
    pub gave_up: u64,
    /// Sorted commit latencies in the measured interval.
    pub latencies_us: Vec<Time>,
    pub mean_latency_us: f64,
    pub p99_latency_us: Time,
    /// Latency histogram with power-of-two bucket upper bounds.
    pub histogram: BTreeMap<Time, u64>,
    /// Commits per simulated second, by commit time.
    pub throughput: Vec<u64>,
    /// Commits per second touching each shard.
    pub shard_throughput: BTreeMap<ShardId, Vec<u64>>,
    pub throughput_tps: f64,
    pub msg_delays_per_commit: f64,
}

const SECOND: Time = 1_000_000;

fn bucket(latency: Time) -> Time {
    latency.max(1).next_power_of_two()
}

/// Nearest-rank percentile of sorted `values`.
pub fn percentile(values: &[Time], p: f64) -> Time {
    if values.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

pub fn compute_metrics(trace: &EventTrace, options: &MetricsOptions) -> Metrics {
    let last = trace.iter().last().map_or(0, |e| e.time);
    let end = if options.end == 0 { last } else { options.end };
    let (lo, hi) = if options.elide {
        let q = end.saturating_sub(options.start) / 4;
        (options.start + q, end - q)
    } else {
        (options.start, Time::MAX)
    };

    let mut txn_of: BTreeMap<TxnId, (NodeId, u64)> = BTreeMap::new();
    let mut issued = BTreeSet::new();
    let mut committed = BTreeSet::new();
    let mut m = Metrics::default();
    let mut delays = Vec::new();
    let seconds = (end / SECOND + 1) as usize;
    m.throughput = vec![0; seconds];

    for e in trace.iter() {
        match &e.kind {
            TraceKind::TxnIssued { txn, tid, attempt } => {
                txn_of.insert(*tid, (e.node, *txn));
                issued.insert((e.node, *txn));
                if *attempt > 1 {
                    m.retries += 1;
                }
            }
            TraceKind::Retry { .. } => m.aborts += 1,
            TraceKind::InDoubt { .. } => m.in_doubt += 1,
            TraceKind::GaveUp { .. } => m.gave_up += 1,
            TraceKind::CommitEnded {
                tid,
                decision: Decision::Commit,
                latency_us,
                delays: d,
                shards,
            } => {
                if let Some(t) = txn_of.get(tid) {
                    committed.insert(*t);
                }
                if e.time < lo || e.time > hi {
                    continue;
                }
                m.latencies_us.push(*latency_us);
                delays.push(*d);
                let sec = (e.time / SECOND) as usize;
                if sec < m.throughput.len() {
                    m.throughput[sec] += 1;
                    for s in shards {
                        m.shard_throughput
                            .entry(*s)
                            .or_insert_with(|| vec![0; seconds])[sec] += 1;
                    }
                }
            }
            _ => {}
        }
    }
    m.issued = issued.len() as u64;
    m.committed = committed.len() as u64;
    m.aborted_final = m.issued - m.committed;
    m.latencies_us.sort_unstable();
    for l in &m.latencies_us {
        *m.histogram.entry(bucket(*l)).or_default() += 1;
    }
    if !m.latencies_us.is_empty() {
        m.mean_latency_us =
            m.latencies_us.iter().sum::<Time>() as f64 / m.latencies_us.len() as f64;
        m.p99_latency_us = percentile(&m.latencies_us, 99.0);
        m.msg_delays_per_commit =
            delays.iter().map(|d| *d as f64).sum::<f64>() / delays.len() as f64;
    }
    let window = hi.min(end).saturating_sub(lo).max(1);
    m.throughput_tps = m.latencies_us.len() as f64 * SECOND as f64 / window as f64;
    m
}
