use std::collections::BTreeMap;

use hacommit::audit::audit;
use hacommit::experiment::{build_simulation, run_experiment, ExperimentConfig};
use hacommit::participant::Replica;
use hacommit::sim::{FaultAction, FaultEvent, Until};
use hacommit::topology::Topology;
use hacommit::trace::{EventTrace, Protocol, TraceKind};
use hacommit::types::{Decision, NodeId, TxnId};
use hacommit::workload::WorkloadSpec;

/// One two-write transaction on a single shard held by nodes 1..=3 (node 1
/// alone for 2PC); the client is node 4.
fn single_txn(protocol: Protocol, faults: Vec<FaultEvent>) -> EventTrace {
    let replicas = if protocol == Protocol::TwoPc { 1 } else { 3 };
    let mut c = ExperimentConfig {
        protocol,
        topology: Topology::new(3, 1, replicas),
        workload: WorkloadSpec {
            txn_count: Some(1),
            ops_per_txn: 2,
            read_fraction: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    c.sim.fault_schedule = faults;
    c.participant = c.participant.clone().with_timeout(10_000);
    run_experiment(&c).unwrap().trace
}

fn crash(at: u64, node: u32) -> FaultEvent {
    FaultEvent {
        at,
        action: FaultAction::Crash { node: NodeId(node) },
    }
}

fn applied(trace: &EventTrace) -> BTreeMap<NodeId, Decision> {
    trace
        .iter()
        .filter_map(|e| match &e.kind {
            TraceKind::Applied { decision, .. } => Some((e.node, *decision)),
            _ => None,
        })
        .collect()
}

#[test]
fn two_pc_blocks_when_the_coordinator_dies_between_phases() {
    // votes reach the client at 520; its decision would leave at 730
    let trace = single_txn(Protocol::TwoPc, vec![crash(600, 4)]);
    let report = audit(&trace);
    assert!(report.passed(), "{:?}", report.violations);
    assert_eq!(report.blocked.len(), 1);
    let b = &report.blocked[0];
    assert_eq!(b.node, NodeId(1));
    assert!(b.coordinator_crashed);
    assert_eq!(b.keys.len(), 2);
    assert!(applied(&trace).is_empty());
}

#[test]
fn two_pc_participant_aborts_what_never_reached_prepare() {
    let trace = single_txn(Protocol::TwoPc, vec![crash(120, 4)]);
    let report = audit(&trace);
    assert!(report.passed());
    assert!(report.blocked.is_empty());
    assert_eq!(applied(&trace), [(NodeId(1), Decision::Abort)].into());
}

#[test]
fn rcommit_new_leader_finishes_a_logged_commit() {
    // the decision record reaches nodes 2 and 3 at 500
    let trace = single_txn(Protocol::RCommit, vec![crash(520, 1)]);
    let report = audit(&trace);
    assert!(report.passed(), "{:?}", report.violations);
    assert!(report.blocked.is_empty());
    assert_eq!(
        applied(&trace),
        [(NodeId(2), Decision::Commit), (NodeId(3), Decision::Commit)].into()
    );
}

#[test]
fn rcommit_new_leader_aborts_an_unlogged_decision() {
    let trace = single_txn(Protocol::RCommit, vec![crash(420, 1)]);
    let report = audit(&trace);
    assert!(report.passed(), "{:?}", report.violations);
    assert!(report.blocked.is_empty());
    assert_eq!(
        applied(&trace),
        [(NodeId(2), Decision::Abort), (NodeId(3), Decision::Abort)].into()
    );
}

/// Outcome of every attempt, keyed by (logical txn, attempt).
fn outcomes(trace: &EventTrace) -> BTreeMap<(u64, u32), Decision> {
    let mut attempt: BTreeMap<TxnId, (u64, u32)> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for e in trace.iter() {
        match &e.kind {
            TraceKind::TxnIssued {
                txn,
                tid,
                attempt: a,
            } => {
                attempt.insert(*tid, (*txn, *a));
            }
            TraceKind::Proposed { tid, decision, .. } => {
                out.entry(attempt[tid]).or_insert(*decision);
            }
            _ => {}
        }
    }
    out
}

#[test]
fn all_protocols_decide_alike_on_the_same_votes() {
    let mut seen = Vec::new();
    for protocol in [Protocol::HaCommit, Protocol::TwoPc, Protocol::RCommit] {
        let c = ExperimentConfig {
            protocol,
            topology: Topology::new(8, 8, 3),
            workload: WorkloadSpec {
                txn_count: Some(40),
                ops_per_txn: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut sim = build_simulation(&c).unwrap();
        for id in c.topology.replica_nodes() {
            // even shards refuse every third transaction sequence number
            sim.process_mut::<Replica>(id)
                .unwrap()
                .set_vote_check(Box::new(|tid, shard, _| {
                    shard.0 % 2 == 1 || tid.sequence() % 3 != 0
                }));
        }
        sim.run_until(Until::Time(1_000_000)).unwrap();
        let trace = sim.into_trace();
        assert!(audit(&trace).passed(), "{protocol:?}");
        let o = outcomes(&trace);
        assert!(
            o.values().any(|d| *d == Decision::Abort),
            "{protocol:?} saw no NO vote"
        );
        assert_eq!(
            o.values().filter(|d| **d == Decision::Commit).count(),
            40,
            "{protocol:?}"
        );
        seen.push((protocol, o));
    }
    for (p, o) in &seen[1..] {
        assert_eq!(o, &seen[0].1, "{p:?} differs from {:?}", seen[0].0);
    }
}
