//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hacommit::audit::{audit, Check};
use hacommit::experiment::{run_experiment, ExperimentConfig, RunOutput};
use hacommit::serial::{check_serializable, committed_footprints, MAX_WINDOW};
use hacommit::sim::{FaultAction, FaultEvent};
use hacommit::topology::Topology;
use hacommit::trace::{EventTrace, Protocol, TraceKind};
use hacommit::types::{Decision, Key, NodeId, ShardId, Time, TxnId};
use hacommit::workload::WorkloadSpec;

use common::{client_failure, faulty_config, members, node_costs, writes_per_shard, MS};

const D: Time = 50;
const SECOND: Time = 1_000_000;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn commit_latencies(trace: &EventTrace) -> Vec<Time> {
    trace
        .iter()
        .filter_map(|e| match &e.kind {
            TraceKind::CommitEnded {
                decision: Decision::Commit,
                latency_us,
                ..
            } => Some(*latency_us),
            _ => None,
        })
        .collect()
}

fn fault_free(protocol: Protocol, ops: u32, txns: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        protocol,
        topology: Topology::new(8, 8, 3),
        workload: WorkloadSpec {
            txn_count: Some(txns),
            ops_per_txn: ops,
            ..Default::default()
        },
        ..Default::default()
    };
    c.sim.seed = 7;
    c
}

fn run(c: &ExperimentConfig) -> Result<RunOutput, String> {
    run_experiment(c).map_err(|e| e.to_string())
}

// 1 ---------------------------------------------------------------------

fn two_delay_commit() -> Outcome {
    let mut checked = 0;
    let mut visible = 0;
    for ops in [1, 2, 4, 8, 16, 32, 64] {
        let c = fault_free(Protocol::HaCommit, ops, 100);
        let out = run(&c)?;
        let got = commit_latencies(&out.trace);
        ensure!(got.len() == 100, "ops={ops}: {} commits", got.len());
        for (i, (lat, w)) in got.iter().zip(writes_per_shard(&c)).enumerate() {
            let cost = node_costs(&c.topology, &w, 3);
            let apply = w
                .keys()
                .map(|s| {
                    let mut cs: Vec<Time> = members(&c.topology, *s, 3)
                        .iter()
                        .map(|m| cost[m])
                        .collect();
                    cs.sort_unstable();
                    cs[1]
                })
                .min()
                .unwrap_or(0);
            ensure!(
                *lat == 2 * D + apply,
                "ops={ops} txn {i}: latency {lat}, expected {}",
                2 * D + apply
            );
            checked += 1;
        }
        let mut started = BTreeMap::new();
        for e in out.trace.iter() {
            match &e.kind {
                TraceKind::CommitStarted { tid, .. } => {
                    started.insert(*tid, e.time);
                }
                TraceKind::Applied {
                    tid,
                    decision: Decision::Commit,
                    ..
                } => {
                    let dt = e.time - started[tid];
                    ensure!(
                        dt == D,
                        "ops={ops}: {tid} visible at {} after {dt} us",
                        e.node
                    );
                    visible += 1;
                }
                _ => {}
            }
        }
        let report = audit(&out.trace);
        ensure!(report.passed(), "ops={ops}: {}", report.summary());
    }
    Ok(format!(
        "{checked} commits at 100 us + apply cost, {visible} replica applies at 50 us"
    ))
}

// 2 ---------------------------------------------------------------------

fn mean(v: &[Time]) -> f64 {
    v.iter().sum::<Time>() as f64 / v.len() as f64
}

fn latency_shape() -> Outcome {
    let ops = [1, 4, 16, 64];
    let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for p in [Protocol::HaCommit, Protocol::TwoPc, Protocol::RCommit] {
        for n in ops {
            let out = run(&fault_free(p, n, 100))?;
            let lat = commit_latencies(&out.trace);
            ensure!(
                lat.len() == 100,
                "{} ops={n}: {} commits",
                p.name(),
                lat.len()
            );
            means.entry(p.name()).or_default().push(mean(&lat));
        }
    }
    let ha = &means["hacommit"];
    let spread =
        ha.iter().cloned().fold(f64::MIN, f64::max) / ha.iter().cloned().fold(f64::MAX, f64::min);
    ensure!(spread <= 2.0, "hacommit spread {spread:.2} over {ha:?}");
    for p in ["2pc", "rcommit"] {
        ensure!(
            means[p].windows(2).all(|w| w[1] > w[0]),
            "{p} not strictly increasing: {:?}",
            means[p]
        );
    }
    let ratio = means["2pc"][3] / ha[3];
    ensure!(ratio >= 3.0, "2pc/hacommit at 64 ops is {ratio:.2}");
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.0}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    Ok(format!(
        "mean us at 1/4/16/64 ops: hacommit {} 2pc {} rcommit {}; 2pc/hacommit at 64 = {ratio:.2}",
        fmt(ha),
        fmt(&means["2pc"]),
        fmt(&means["rcommit"])
    ))
}

// 3 ---------------------------------------------------------------------

fn client_failure_repair() -> Outcome {
    let s = client_failure(1);
    let report = audit(&s.trace);
    ensure!(report.passed(), "{}", report.summary());
    ensure!(report.blocked.is_empty(), "blocked: {:?}", report.blocked);
    let mut decided: BTreeMap<TxnId, Vec<(NodeId, Decision)>> = BTreeMap::new();
    let mut applied: BTreeMap<TxnId, BTreeMap<NodeId, Decision>> = BTreeMap::new();
    let mut late_repairs = Vec::new();
    for e in s.trace.iter() {
        match &e.kind {
            TraceKind::RecoveryDecided { tid, decision, .. } => {
                decided.entry(*tid).or_default().push((e.node, *decision))
            }
            TraceKind::Applied { tid, decision, .. } => {
                applied.entry(*tid).or_default().insert(e.node, *decision);
            }
            TraceKind::RecoveryStarted { tid, .. }
                if applied.get(tid).is_some_and(|a| a.contains_key(&e.node)) =>
            {
                late_repairs.push((e.node, *tid))
            }
            _ => {}
        }
    }
    let accepted_at_zero: BTreeSet<NodeId> = s
        .trace
        .iter()
        .filter_map(|e| match &e.kind {
            TraceKind::Accepted { tid, ballot, .. }
                if *tid == s.half_committed && ballot.is_client() =>
            {
                Some(e.node)
            }
            _ => None,
        })
        .collect();
    ensure!(
        accepted_at_zero.len() == 3,
        "client COMMIT accepted at {accepted_at_zero:?}"
    );
    for tid in &s.open {
        let d = decided.get(tid).cloned().unwrap_or_default();
        ensure!(
            d.len() == 1 && d[0].1 == Decision::Abort,
            "{tid}: recovery decisions {d:?}"
        );
        ensure!(
            applied[tid].values().all(|x| *x == Decision::Abort),
            "{tid}: {:?}",
            applied[tid]
        );
    }
    let ten = s.half_committed;
    let d = decided.get(&ten).cloned().unwrap_or_default();
    ensure!(
        d.len() == 1 && d[0].1 == Decision::Commit,
        "half-committed: recovery decisions {d:?}"
    );
    ensure!(
        !accepted_at_zero.contains(&d[0].0),
        "repaired by {} which had accepted",
        d[0].0
    );
    let commits = applied.get(&ten).map_or(0, |a| {
        a.values().filter(|x| **x == Decision::Commit).count()
    });
    ensure!(commits == 5, "half-committed applied at {commits} of 5");
    ensure!(
        decided.values().all(|v| v.len() <= 1),
        "several successful rounds: {decided:?}"
    );
    ensure!(
        late_repairs.is_empty(),
        "repair after apply: {late_repairs:?}"
    );
    Ok(format!(
        "{} aborted by recovery, the half-committed one committed by {}, one successful round each",
        s.open.len(),
        d[0].0
    ))
}

// 4 ---------------------------------------------------------------------

fn replica_failures() -> Outcome {
    let crash = |at: Time, n: u32| FaultEvent {
        at,
        action: FaultAction::Crash { node: NodeId(n) },
    };
    let mut c = ExperimentConfig {
        protocol: Protocol::HaCommit,
        // shard 0 lives on nodes 1..=5; crashing 1, 2 and 3 loses its quorum
        // while every other shard keeps at least three live replicas
        topology: Topology::new(7, 4, 5),
        workload: WorkloadSpec {
            txn_count: None,
            duration: Some(240 * SECOND),
            ops_per_txn: 2,
            clients: 4,
            think_time: 50 * MS,
            ..Default::default()
        },
        ..Default::default()
    };
    c.sim.record_messages = false;
    c.sim.fault_schedule = vec![
        crash(50 * SECOND, 1),
        crash(100 * SECOND, 2),
        crash(180 * SECOND, 3),
    ];
    let out = run(&c)?;
    let report = audit(&out.trace);
    ensure!(report.passed(), "{}", report.summary());
    let before = report.violations.len();
    let tp = &out.metrics.throughput;
    ensure!(
        tp.len() >= 240,
        "throughput series has {} seconds",
        tp.len()
    );
    if let Some(s) = (0..180).find(|s| tp[*s] == 0) {
        return Err(format!("no commits in second {s}"));
    }
    let shard0 = out
        .metrics
        .shard_throughput
        .get(&ShardId(0))
        .cloned()
        .unwrap_or_default();
    ensure!(
        (0..180).all(|s| shard0[s] > 0),
        "shard 0 idle before quorum loss"
    );
    let after: u64 = shard0[181..240].iter().sum();
    ensure!(after == 0, "shard 0 committed {after} after losing quorum");
    let others: u64 = (1..4)
        .map(|s| {
            out.metrics.shard_throughput[&ShardId(s)][181..240]
                .iter()
                .sum::<u64>()
        })
        .sum();
    ensure!(others > 0, "healthy shards stopped too");
    let window = |lo: usize, hi: usize| tp[lo..hi].iter().sum::<u64>() as f64 / (hi - lo) as f64;
    Ok(format!(
        "{} violations; commits/s {:.0} before 50 s, {:.0} in 50-100 s, {:.0} in 100-180 s, {:.0} after (shard 0: 0)",
        before,
        window(0, 50),
        window(51, 100),
        window(101, 180),
        window(181, 240)
    ))
}

// 5 ---------------------------------------------------------------------

fn safety_sweep() -> Outcome {
    let mut runs = 0;
    let mut recoveries = 0;
    let mut blocked = 0;
    for p in Protocol::ALL {
        for seed in 0..250 {
            let out = run(&faulty_config(p, 10_000 + seed))?;
            let report = audit(&out.trace);
            ensure!(
                report.passed(),
                "{} seed {seed}: {}",
                p.name(),
                report.summary()
            );
            recoveries += report.recoveries.len();
            blocked += report.blocked.len();
            runs += 1;
        }
    }
    // positive control: a 2PC coordinator that dies between the phases
    let mut c = ExperimentConfig {
        protocol: Protocol::TwoPc,
        topology: Topology::new(3, 1, 1),
        workload: WorkloadSpec {
            txn_count: Some(1),
            ops_per_txn: 2,
            read_fraction: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    c.sim.fault_schedule = vec![FaultEvent {
        at: 600,
        action: FaultAction::Crash { node: NodeId(4) },
    }];
    c.participant = c.participant.clone().with_timeout(10 * MS);
    let report = audit(&run(&c)?.trace);
    ensure!(report.passed(), "blocking run: {}", report.summary());
    ensure!(
        report.blocked.len() == 1 && report.blocked[0].coordinator_crashed,
        "2PC blocking not detected: {:?}",
        report.blocked
    );
    Ok(format!(
        "{runs} runs, 0 violations, {recoveries} recovered transactions, {blocked} blocked; 2PC coordinator crash leaves {:?} locked",
        report.blocked[0].keys
    ))
}

// 6 ---------------------------------------------------------------------

fn serial_config(protocol: Protocol, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        protocol,
        topology: Topology::new(4, 4, 3),
        workload: WorkloadSpec {
            txn_count: Some(100),
            ops_per_txn: 3,
            key_space: 4,
            clients: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    c.sim.seed = seed;
    c.sim.record_messages = false;
    c
}

fn serializability() -> Outcome {
    let mut windows = 0;
    let mut committed = 0;
    for seed in 1..=50 {
        let out = run(&serial_config(Protocol::HaCommit, seed))?;
        let report = audit(&out.trace);
        ensure!(report.passed(), "seed {seed}: {}", report.summary());
        let txns = committed_footprints(&out.trace);
        let finals: BTreeMap<Key, TxnId> = out
            .final_state
            .iter()
            .map(|(k, r)| (k.clone(), r.writer))
            .collect();
        check_serializable(&txns, MAX_WINDOW, Some(&finals))
            .map_err(|e| format!("seed {seed}: {e}"))?;
        windows += txns.len().div_ceil(MAX_WINDOW);
        committed += txns.len();

        let rc = run(&serial_config(Protocol::HaCommitRc, seed))?;
        let report = audit(&rc.trace);
        ensure!(
            report.count(Check::DirtyRead) == 0 && report.passed(),
            "read-committed seed {seed}: {}",
            report.summary()
        );
    }
    Ok(format!("{committed} committed transactions, witness found for all {windows} windows; read-committed runs clean"))
}

// 7 ---------------------------------------------------------------------

fn fingerprint(out: &RunOutput) -> (Vec<u8>, Vec<u8>) {
    (
        out.trace.to_jsonl(),
        serde_json::to_vec(&out.metrics).expect("metrics serialize"),
    )
}

fn determinism() -> Outcome {
    let mut configs = vec![
        fault_free(Protocol::HaCommit, 16, 100),
        serial_config(Protocol::HaCommit, 3),
    ];
    configs.extend(Protocol::ALL.map(|p| faulty_config(p, 10_007)));
    for c in &configs {
        let (a, b) = (fingerprint(&run(c)?), fingerprint(&run(c)?));
        ensure!(
            a == b,
            "{} seed {} differs between runs",
            c.protocol.name(),
            c.sim.seed
        );
    }
    let (a, b) = (
        client_failure(1).trace.to_jsonl(),
        client_failure(1).trace.to_jsonl(),
    );
    ensure!(a == b, "client-failure scenario differs between runs");
    Ok(format!(
        "{} runs repeated byte-identically (trace and metrics)",
        configs.len() + 1
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        (
            "1 two-delay commit",
            Duration::from_secs(10),
            two_delay_commit,
        ),
        ("2 latency shape", Duration::from_secs(60), latency_shape),
        (
            "3 client-failure repair",
            Duration::from_secs(10),
            client_failure_repair,
        ),
        (
            "4 replica-failure timeline",
            Duration::from_secs(60),
            replica_failures,
        ),
        ("5 safety sweep", Duration::from_secs(600), safety_sweep),
        (
            "6 serializability",
            Duration::from_secs(120),
            serializability,
        ),
        ("7 determinism", Duration::from_secs(600), determinism),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let t = Instant::now();
        let result = f();
        let took = t.elapsed();
        let result = match result {
            Ok(detail) if took > limit => {
                Err(format!("{detail}; took {took:.1?}, limit {limit:?}"))
            }
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS criterion {name}: {detail} ({took:.1?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why} ({took:.1?})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
