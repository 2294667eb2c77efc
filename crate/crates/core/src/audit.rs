//! Offline safety auditor. Replays an event trace and reports every
//! violation of the commit and isolation guarantees with the indices of the
//! events involved.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::store::LockMode;
use crate::topology::ReplicaGroup;
use crate::trace::{EventTrace, TraceEvent, TraceKind};
use crate::types::{Ballot, Decision, Key, NodeId, ShardId, TxnId, Value, Vote};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// Two different outcomes decided for one transaction.
    Agreement,
    /// COMMIT decided without a YES vote from every participant shard.
    Validity,
    /// A different outcome accepted after one was reported or applied, or a
    /// report without a quorum of acknowledgements behind it.
    Stability,
    /// A shard's vote changed.
    VoteImmutability,
    /// An acceptor went back to a lower ballot.
    AcceptorMonotonicity,
    /// Conflicting locks held at once.
    LockExclusion,
    /// A read returned a value that was not committed at that replica.
    DirtyRead,
    /// Writes installed by an ABORT.
    Visibility,
    /// Recorded message-delay count differs from the causal chain.
    DelayCount,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: Check,
    pub tid: Option<TxnId>,
    pub events: Vec<u64>,
    pub detail: String,
}

/// A prepared transaction still holding locks when the trace ends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blocked {
    pub tid: TxnId,
    pub node: NodeId,
    pub keys: Vec<Key>,
    pub coordinator_crashed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
    pub blocked: Vec<Blocked>,
    pub decided: usize,
    pub delays_checked: usize,
    /// Commits whose causal chain does not lead back to the start event,
    /// e.g. because the deciding message was a retransmission.
    pub delays_unresolved: usize,
    /// Successful recovery rounds per transaction.
    pub recoveries: BTreeMap<TxnId, usize>,
    /// Whether the trace carried the replica placement.
    pub topology_known: bool,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, check: Check) -> usize {
        self.violations.iter().filter(|v| v.check == check).count()
    }

    pub fn summary(&self) -> String {
        let mut by: BTreeMap<Check, usize> = BTreeMap::new();
        for v in &self.violations {
            *by.entry(v.check).or_default() += 1;
        }
        let parts: Vec<String> = by.iter().map(|(c, n)| format!("{c}={n}")).collect();
        format!(
            "{} decided, {} violations [{}], {} blocked, {} delay counts checked ({} unresolved)",
            self.decided,
            self.violations.len(),
            parts.join(" "),
            self.blocked.len(),
            self.delays_checked,
            self.delays_unresolved
        )
    }
}

#[derive(Default)]
struct KeyLocks {
    writer: Option<TxnId>,
    readers: BTreeSet<TxnId>,
}

#[derive(Default)]
struct NodeState {
    locks: BTreeMap<Key, KeyLocks>,
    promised: BTreeMap<TxnId, Ballot>,
    /// Writes of each transaction committed here.
    committed: BTreeMap<TxnId, BTreeMap<Key, Value>>,
    applied: BTreeSet<TxnId>,
    prepared: BTreeSet<TxnId>,
}

struct Auditor<'a> {
    trace: &'a EventTrace,
    report: AuditReport,
    groups: BTreeMap<ShardId, ReplicaGroup>,
    nodes: BTreeMap<NodeId, NodeState>,
    crashed: BTreeSet<NodeId>,
    /// First decision event of each transaction.
    decision: BTreeMap<TxnId, (Decision, u64)>,
    aborted: BTreeSet<TxnId>,
    yes_votes: BTreeMap<(TxnId, ShardId), (Vote, u64)>,
    acks: BTreeMap<(TxnId, Decision), BTreeMap<NodeId, u64>>,
    started: BTreeMap<TxnId, &'a TraceEvent>,
    validated: BTreeSet<TxnId>,
    /// Transactions with a grounded COMMIT proposal; later rounds may adopt it.
    commit_proposed: BTreeSet<TxnId>,
}

/// Audits a complete trace.
pub fn audit(trace: &EventTrace) -> AuditReport {
    let mut a = Auditor {
        trace,
        report: AuditReport::default(),
        groups: BTreeMap::new(),
        nodes: BTreeMap::new(),
        crashed: BTreeSet::new(),
        decision: BTreeMap::new(),
        aborted: BTreeSet::new(),
        yes_votes: BTreeMap::new(),
        acks: BTreeMap::new(),
        started: BTreeMap::new(),
        validated: BTreeSet::new(),
        commit_proposed: BTreeSet::new(),
    };
    for e in trace.iter() {
        a.event(e);
    }
    a.finish()
}

impl<'a> Auditor<'a> {
    fn flag(&mut self, check: Check, tid: Option<TxnId>, events: Vec<u64>, detail: String) {
        self.report.violations.push(Violation {
            check,
            tid,
            events,
            detail,
        });
    }

    fn node(&mut self, n: NodeId) -> &mut NodeState {
        self.nodes.entry(n).or_default()
    }

    /// Records `decision` for `tid` and checks it against earlier ones.
    fn decide(&mut self, e: &TraceEvent, tid: TxnId, decision: Decision, shards: &[ShardId]) {
        match self.decision.get(&tid) {
            Some(&(d, first)) if d != decision => {
                self.flag(
                    Check::Agreement,
                    Some(tid),
                    vec![first, e.idx],
                    format!("{d} then {decision}"),
                );
            }
            Some(_) => {}
            None => {
                self.decision.insert(tid, (decision, e.idx));
            }
        }
        if decision == Decision::Abort {
            self.aborted.insert(tid);
        }
        if decision == Decision::Commit && !shards.is_empty() && self.validated.insert(tid) {
            for s in shards {
                match self.yes_votes.get(&(tid, *s)) {
                    Some((Vote::Yes, _)) => {}
                    other => {
                        let mut events = vec![e.idx];
                        events.extend(other.map(|(_, i)| *i));
                        self.flag(
                            Check::Validity,
                            Some(tid),
                            events,
                            format!("commit without YES from {s}"),
                        );
                    }
                }
            }
        }
    }

    /// Any acceptance or decision after the first decision must agree.
    fn stable(&mut self, e: &TraceEvent, tid: TxnId, decision: Decision) {
        if let Some(&(d, first)) = self.decision.get(&tid) {
            if d != decision {
                self.flag(
                    Check::Stability,
                    Some(tid),
                    vec![first, e.idx],
                    format!("{decision} accepted after {d}"),
                );
            }
        }
    }

    fn event(&mut self, e: &'a TraceEvent) {
        let n = e.node;
        match &e.kind {
            TraceKind::Topology { groups } => {
                self.groups = groups.iter().map(|g| (g.shard, g.clone())).collect();
                self.report.topology_known = true;
            }
            TraceKind::Crash | TraceKind::Restart => {
                self.crashed.insert(n);
                self.nodes.insert(n, NodeState::default());
            }
            TraceKind::LockGranted { tid, key, mode } => {
                let tid = *tid;
                let st = self.node(n).locks.entry(key.clone()).or_default();
                let conflict = match mode {
                    LockMode::Read => st.writer.filter(|w| *w != tid),
                    LockMode::Write => st
                        .writer
                        .filter(|w| *w != tid)
                        .or_else(|| st.readers.iter().find(|r| **r != tid).copied()),
                };
                match mode {
                    LockMode::Read => {
                        st.readers.insert(tid);
                    }
                    LockMode::Write => st.writer = Some(tid),
                }
                if let Some(other) = conflict {
                    self.flag(
                        Check::LockExclusion,
                        Some(tid),
                        vec![e.idx],
                        format!("{mode:?} lock on {key} at {n} while {other} holds it"),
                    );
                }
            }
            TraceKind::LocksReleased { tid, keys } => {
                let st = self.node(n);
                for k in keys {
                    if let Some(l) = st.locks.get_mut(k) {
                        l.readers.remove(tid);
                        if l.writer == Some(*tid) {
                            l.writer = None;
                        }
                    }
                }
            }
            TraceKind::Read {
                tid,
                key,
                value,
                writer,
                ..
            } => {
                if *writer == TxnId::GENESIS {
                    return;
                }
                let seen = self
                    .node(n)
                    .committed
                    .get(writer)
                    .map(|w| w.get(key).cloned());
                let ok = match seen {
                    Some(Some(v)) => Some(&v) == value.as_ref(),
                    _ => false,
                };
                if !ok || self.aborted.contains(writer) {
                    self.flag(
                        Check::DirtyRead,
                        Some(*tid),
                        vec![e.idx],
                        format!("read {key} written by {writer} not committed at {n}"),
                    );
                }
            }
            TraceKind::VoteRecorded { tid, shard, vote } => {
                match self.yes_votes.get(&(*tid, *shard)) {
                    Some((v, first)) if v != vote => {
                        let first = *first;
                        self.flag(
                            Check::VoteImmutability,
                            Some(*tid),
                            vec![first, e.idx],
                            format!("{shard} vote changed"),
                        );
                    }
                    Some(_) => {}
                    None => {
                        self.yes_votes.insert((*tid, *shard), (*vote, e.idx));
                    }
                }
            }
            TraceKind::Prepared {
                tid,
                vote: Vote::Yes,
                ..
            } => {
                self.node(n).prepared.insert(*tid);
            }
            TraceKind::Promised { tid, ballot } => {
                let prev = self.node(n).promised.insert(*tid, *ballot);
                if prev.is_some_and(|p| p >= *ballot) {
                    self.flag(
                        Check::AcceptorMonotonicity,
                        Some(*tid),
                        vec![e.idx],
                        format!(
                            "promise {ballot} at {n} not above {}",
                            prev.expect("checked")
                        ),
                    );
                }
            }
            TraceKind::Accepted {
                tid,
                ballot,
                decision,
            } => {
                let prev = self.node(n).promised.insert(*tid, *ballot);
                if prev.is_some_and(|p| p > *ballot) {
                    self.flag(
                        Check::AcceptorMonotonicity,
                        Some(*tid),
                        vec![e.idx],
                        format!(
                            "accept {ballot} at {n} below promise {}",
                            prev.expect("checked")
                        ),
                    );
                }
                self.stable(e, *tid, *decision);
            }
            TraceKind::AckSent {
                tid,
                ballot,
                decision,
            } => {
                self.stable(e, *tid, *decision);
                if *ballot == Ballot::ZERO {
                    self.acks
                        .entry((*tid, *decision))
                        .or_default()
                        .entry(n)
                        .or_insert(e.idx);
                }
            }
            TraceKind::Applied {
                tid,
                decision,
                shards,
                writes,
            } => {
                self.stable(e, *tid, *decision);
                self.decide(e, *tid, *decision, shards);
                if *decision == Decision::Abort && !writes.is_empty() {
                    self.flag(
                        Check::Visibility,
                        Some(*tid),
                        vec![e.idx],
                        "abort installed writes".into(),
                    );
                }
                let st = self.node(n);
                st.applied.insert(*tid);
                if *decision == Decision::Commit {
                    let w = st.committed.entry(*tid).or_default();
                    for cmd in writes {
                        w.insert(cmd.key.clone(), cmd.value.clone());
                    }
                }
            }
            TraceKind::RecoveryDecided { tid, decision, .. } => {
                *self.report.recoveries.entry(*tid).or_default() += 1;
                self.stable(e, *tid, *decision);
                self.decide(e, *tid, *decision, &[]);
            }
            TraceKind::Proposed {
                tid,
                decision: Decision::Commit,
                shards,
                votes,
                ..
            } => match shards.iter().find(|s| votes.get(s) != Some(&Vote::Yes)) {
                None => {
                    self.commit_proposed.insert(*tid);
                }
                Some(_) if self.commit_proposed.contains(tid) => {}
                Some(s) => self.flag(
                    Check::Validity,
                    Some(*tid),
                    vec![e.idx],
                    format!("COMMIT proposed without YES from {s}"),
                ),
            },
            TraceKind::CommitStarted { tid, .. } => {
                self.started.insert(*tid, e);
            }
            TraceKind::CommitEnded {
                tid,
                decision,
                delays,
                shards,
                ..
            } => {
                self.stable(e, *tid, *decision);
                self.decide(e, *tid, *decision, shards);
                self.check_delays(e, *tid, *delays);
                if *delays == 2 {
                    self.check_quorum(e, *tid, *decision, shards);
                }
            }
            _ => {}
        }
    }

    fn check_delays(&mut self, e: &TraceEvent, tid: TxnId, delays: u32) {
        let Some(start) = self.started.get(&tid).and_then(|s| s.cause) else {
            self.report.delays_unresolved += 1;
            return;
        };
        match self.trace.causal_delays(start, e) {
            Some(n) if n == delays => self.report.delays_checked += 1,
            Some(n) => {
                self.report.delays_checked += 1;
                self.flag(
                    Check::DelayCount,
                    Some(tid),
                    vec![start, e.idx],
                    format!("recorded {delays}, chain has {n}"),
                );
            }
            None => self.report.delays_unresolved += 1,
        }
    }

    /// A reported one-phase outcome needs ballot-zero acknowledgements from
    /// a quorum of at least one participant group.
    fn check_quorum(&mut self, e: &TraceEvent, tid: TxnId, decision: Decision, shards: &[ShardId]) {
        if self.groups.is_empty() {
            return;
        }
        let acked: BTreeSet<NodeId> = self
            .acks
            .get(&(tid, decision))
            .map(|m| {
                m.iter()
                    .filter(|(_, i)| **i < e.idx)
                    .map(|(n, _)| *n)
                    .collect()
            })
            .unwrap_or_default();
        let ok = shards
            .iter()
            .filter_map(|s| self.groups.get(s))
            .any(|g| g.has_quorum(&acked));
        if !ok {
            self.flag(
                Check::Stability,
                Some(tid),
                vec![e.idx],
                "reported without a quorum of acknowledgements".into(),
            );
        }
    }

    fn finish(mut self) -> AuditReport {
        self.report.decided = self.decision.len();
        let crashed = self.crashed.clone();
        for (node, st) in &self.nodes {
            if crashed.contains(node) {
                continue;
            }
            let mut held: BTreeMap<TxnId, Vec<Key>> = BTreeMap::new();
            for (k, l) in &st.locks {
                for t in l.writer.iter().chain(l.readers.iter()) {
                    held.entry(*t).or_default().push(k.clone());
                }
            }
            for (tid, keys) in held {
                if st.prepared.contains(&tid) && !st.applied.contains(&tid) {
                    let coordinator_crashed = crashed.contains(&tid.client());
                    self.report.blocked.push(Blocked {
                        tid,
                        node: *node,
                        keys,
                        coordinator_crashed,
                    });
                }
            }
        }
        self.report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::WriteCmd;

    fn applied(t: &mut EventTrace, node: u32, tid: u128, d: Decision) {
        let kind = TraceKind::Applied {
            tid: TxnId(tid),
            decision: d,
            shards: vec![ShardId(0)],
            writes: vec![],
        };
        t.push(0, NodeId(node), None, kind);
    }

    #[test]
    fn empty_trace_passes() {
        assert!(audit(&EventTrace::default()).passed());
    }

    #[test]
    fn two_decisions_flag_agreement() {
        let mut t = EventTrace::default();
        t.push(
            0,
            NodeId(1),
            None,
            TraceKind::VoteRecorded {
                tid: TxnId(7),
                shard: ShardId(0),
                vote: Vote::Yes,
            },
        );
        applied(&mut t, 1, 7, Decision::Commit);
        applied(&mut t, 2, 7, Decision::Abort);
        let r = audit(&t);
        assert_eq!(r.count(Check::Agreement), 1);
        assert_eq!(r.violations[0].events, vec![1, 2]);
    }

    #[test]
    fn commit_without_votes_flags_validity() {
        let mut t = EventTrace::default();
        applied(&mut t, 1, 7, Decision::Commit);
        assert_eq!(audit(&t).count(Check::Validity), 1);
    }

    #[test]
    fn changed_vote_is_flagged() {
        let mut t = EventTrace::default();
        for (n, v) in [(1, Vote::Yes), (2, Vote::No)] {
            t.push(
                0,
                NodeId(n),
                None,
                TraceKind::VoteRecorded {
                    tid: TxnId(7),
                    shard: ShardId(0),
                    vote: v,
                },
            );
        }
        assert_eq!(audit(&t).count(Check::VoteImmutability), 1);
    }

    #[test]
    fn conflicting_write_locks_are_flagged() {
        let mut t = EventTrace::default();
        for tid in [1, 2] {
            let kind = TraceKind::LockGranted {
                tid: TxnId(tid),
                key: "k".into(),
                mode: LockMode::Write,
            };
            t.push(0, NodeId(1), None, kind);
        }
        assert_eq!(audit(&t).count(Check::LockExclusion), 1);
        // released in between: fine
        let mut t = EventTrace::default();
        t.push(
            0,
            NodeId(1),
            None,
            TraceKind::LockGranted {
                tid: TxnId(1),
                key: "k".into(),
                mode: LockMode::Write,
            },
        );
        t.push(
            0,
            NodeId(1),
            None,
            TraceKind::LocksReleased {
                tid: TxnId(1),
                keys: vec!["k".into()],
            },
        );
        t.push(
            0,
            NodeId(1),
            None,
            TraceKind::LockGranted {
                tid: TxnId(2),
                key: "k".into(),
                mode: LockMode::Read,
            },
        );
        assert!(audit(&t).passed());
    }

    #[test]
    fn reading_uncommitted_value_is_dirty() {
        let mut t = EventTrace::default();
        let read = |writer| TraceKind::Read {
            tid: TxnId(2),
            key: "k".into(),
            value: Some("v".into()),
            writer,
            isolation: crate::types::Isolation::ReadCommitted,
        };
        t.push(0, NodeId(1), None, read(TxnId(1)));
        assert_eq!(audit(&t).count(Check::DirtyRead), 1);

        let mut t = EventTrace::default();
        t.push(
            0,
            NodeId(1),
            None,
            TraceKind::VoteRecorded {
                tid: TxnId(1),
                shard: ShardId(0),
                vote: Vote::Yes,
            },
        );
        let writes = vec![WriteCmd {
            key: "k".into(),
            value: "v".into(),
        }];
        let kind = TraceKind::Applied {
            tid: TxnId(1),
            decision: Decision::Commit,
            shards: vec![ShardId(0)],
            writes,
        };
        t.push(0, NodeId(1), None, kind);
        t.push(0, NodeId(1), None, read(TxnId(1)));
        assert!(audit(&t).passed());
    }

    #[test]
    fn late_contrary_accept_breaks_stability() {
        let mut t = EventTrace::default();
        t.push(
            0,
            NodeId(1),
            None,
            TraceKind::VoteRecorded {
                tid: TxnId(7),
                shard: ShardId(0),
                vote: Vote::Yes,
            },
        );
        applied(&mut t, 1, 7, Decision::Commit);
        let b = Ballot::new(1, NodeId(2));
        t.push(
            0,
            NodeId(2),
            None,
            TraceKind::Accepted {
                tid: TxnId(7),
                ballot: b,
                decision: Decision::Abort,
            },
        );
        assert_eq!(audit(&t).count(Check::Stability), 1);
    }

    #[test]
    fn ballots_never_regress() {
        let mut t = EventTrace::default();
        let tid = TxnId(7);
        t.push(
            0,
            NodeId(1),
            None,
            TraceKind::Promised {
                tid,
                ballot: Ballot::new(3, NodeId(2)),
            },
        );
        t.push(
            0,
            NodeId(1),
            None,
            TraceKind::Accepted {
                tid,
                ballot: Ballot::new(2, NodeId(4)),
                decision: Decision::Abort,
            },
        );
        assert_eq!(audit(&t).count(Check::AcceptorMonotonicity), 1);
    }
}
