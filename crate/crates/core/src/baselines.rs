//! Comparison protocols over the same store and simulator: classic 2PC
//! with a client coordinator and forced logs, and a replicated 2PC in which
//! prepare records and the coordinator's decision are made durable by
//! quorum replication instead of logging.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::participant::{Replica, VoteRound};
use crate::sim::Ctx;
use crate::topology::ShardMap;
use crate::trace::{Protocol, TraceKind};
use crate::types::{Decision, Message, NodeId, ShardId, Stamp, Time, TxnContext, TxnId, Vote};

/// A decision, when it was taken and the messages that announce it.
pub type Outcome = (Decision, Time, Vec<(NodeId, Message)>);

/// Forced-log latency `L(w) = base + per_entry * w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogCostModel {
    pub base: Time,
    pub per_entry: Time,
}

impl LogCostModel {
    pub fn latency(&self, entries: usize) -> Time {
        self.base + self.per_entry * entries as Time
    }
}

impl Default for LogCostModel {
    fn default() -> Self {
        Self {
            base: 200,
            per_entry: 10,
        }
    }
}

/// 2PC coordinator state kept by the client.
#[derive(Debug, Clone)]
pub struct TwoPcCoordinator {
    pub tid: TxnId,
    participants: BTreeMap<ShardId, NodeId>,
    votes: BTreeMap<ShardId, Vote>,
    decision: Option<Decision>,
    acks: BTreeSet<NodeId>,
    log: LogCostModel,
}

impl TwoPcCoordinator {
    /// Builds the coordinator and the prepare messages for every shard in
    /// the context.
    pub fn prepare(
        context: &TxnContext,
        expected_ops: &BTreeMap<ShardId, u32>,
        shards: &ShardMap,
        log: LogCostModel,
    ) -> (Self, Vec<(NodeId, Message)>) {
        let participants: BTreeMap<_, _> = context
            .shard_ids
            .iter()
            .filter_map(|s| shards.leader(*s).map(|l| (*s, l)))
            .collect();
        let msgs = participants
            .iter()
            .map(|(s, l)| {
                let msg = Message::TpcPrepare {
                    tid: context.tid,
                    shard: *s,
                    writes: context.writes_for(*s).to_vec(),
                    expected_ops: expected_ops.get(s).copied().unwrap_or(0),
                };
                (*l, msg)
            })
            .collect();
        let c = Self {
            tid: context.tid,
            participants,
            votes: BTreeMap::new(),
            decision: None,
            acks: BTreeSet::new(),
            log,
        };
        (c, msgs)
    }

    pub fn decision(&self) -> Option<Decision> {
        self.decision
    }

    pub fn votes(&self) -> &BTreeMap<ShardId, Vote> {
        &self.votes
    }

    /// Returns the decision, the delay of its forced log write and the
    /// messages to send once every vote is in or any vote is NO.
    pub fn on_vote(&mut self, shard: ShardId, vote: Vote) -> Option<Outcome> {
        if self.decision.is_some() || !self.participants.contains_key(&shard) {
            return None;
        }
        self.votes.insert(shard, vote);
        if vote == Vote::No {
            return Some(self.decide(Decision::Abort));
        }
        if self.votes.len() == self.participants.len() {
            return Some(self.decide(Decision::Commit));
        }
        None
    }

    /// Gives up waiting for votes.
    pub fn abort(&mut self) -> Option<Outcome> {
        if self.decision.is_some() {
            return None;
        }
        Some(self.decide(Decision::Abort))
    }

    fn decide(&mut self, decision: Decision) -> (Decision, Time, Vec<(NodeId, Message)>) {
        self.decision = Some(decision);
        let tid = self.tid;
        let leaders: BTreeSet<NodeId> = self.participants.values().copied().collect();
        let msgs = leaders
            .into_iter()
            .map(|l| (l, Message::TpcDecision { tid, decision }))
            .collect();
        (decision, self.log.latency(1), msgs)
    }

    /// True once every participant node acknowledged the decision.
    pub fn on_ack(&mut self, from: NodeId) -> bool {
        self.acks.insert(from);
        self.decision.is_some() && self.participants.values().all(|l| self.acks.contains(l))
    }
}

#[derive(Debug, Clone)]
pub(crate) enum RcStage {
    Voting,
    Querying {
        replies: BTreeMap<NodeId, Option<(u64, Decision)>>,
    },
    Logging {
        decision: Decision,
        acks: BTreeSet<NodeId>,
    },
    Deciding {
        decision: Decision,
        acks: BTreeSet<NodeId>,
    },
    Done,
}

/// Replicated-2PC coordinator state at the leader of the coordinator shard.
#[derive(Debug, Clone)]
pub struct RcCoordinator {
    pub(crate) client: Option<NodeId>,
    pub(crate) context: TxnContext,
    pub(crate) term: u64,
    pub(crate) votes: BTreeMap<ShardId, Vote>,
    pub(crate) stage: RcStage,
    pub(crate) started_at: Time,
}

/// Decision record replicated in the coordinator group.
#[derive(Debug, Clone, Default)]
pub struct RcLogRecord {
    pub promised_term: u64,
    pub record: Option<(u64, Decision)>,
    pub context: Option<TxnContext>,
}

/// Coordinator shard of a replicated-2PC transaction.
pub fn rc_coordinator_shard(context: &TxnContext) -> Option<ShardId> {
    context.shard_ids.iter().next().copied()
}

impl Replica {
    pub(crate) fn on_baseline_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
        match msg {
            Message::TpcPrepare {
                tid,
                shard,
                writes,
                expected_ops,
            } => self.tpc_prepare(ctx, from, tid, shard, writes.len(), expected_ops),
            Message::TpcDecision { tid, decision } => {
                let cost = self.apply(ctx, tid, decision);
                let shard = self.stores.keys().next().copied().unwrap_or(ShardId(0));
                ctx.send_after(cost, from, Message::TpcAck { tid, shard });
            }
            Message::RcCommitRequest {
                tid,
                context,
                expected_ops,
            } => self.rc_begin(ctx, from, tid, context, expected_ops),
            Message::RcPrepare {
                tid,
                shard,
                expected_ops,
                context,
            } => self.rc_prepare(ctx, from, tid, shard, expected_ops, context),
            Message::RcReplicatePrepare {
                tid,
                shard,
                vote,
                context,
            } => {
                let now = ctx.now();
                let e = self.entry(tid, now);
                match e.acceptor.votes.get(&shard) {
                    Some(v) if *v != vote => return,
                    Some(_) => {}
                    None => {
                        e.acceptor.votes.insert(shard, vote);
                        ctx.record(TraceKind::VoteRecorded { tid, shard, vote });
                    }
                }
                let e = self.entry(tid, now);
                e.merge_context(&context);
                e.prepared = true;
                e.last_contact = now;
                ctx.send(from, Message::RcReplicatePrepareAck { tid, shard });
            }
            Message::RcReplicatePrepareAck { tid, shard } => {
                let Some(group) = ctx.shards().group(shard).cloned() else {
                    return;
                };
                let Some(e) = self.txns.get_mut(&tid) else {
                    return;
                };
                let Some(round) = e.vote_rounds.get_mut(&shard) else {
                    return;
                };
                round.acks.insert(from);
                if !round.replied && group.has_quorum(&round.acks) {
                    round.replied = true;
                    ctx.send(
                        round.client,
                        Message::RcVote {
                            tid,
                            shard,
                            vote: round.vote,
                            stamp: round.stamp,
                        },
                    );
                }
            }
            Message::RcVote {
                tid,
                shard,
                vote,
                stamp,
            } => self.rc_on_vote(ctx, tid, shard, vote, stamp),
            Message::RcLogDecision {
                tid,
                term,
                decision,
                context,
            } => {
                if self.rc_log_accept(tid, term, decision, &context) {
                    ctx.send(from, Message::RcLogDecisionAck { tid, term });
                }
            }
            Message::RcLogDecisionAck { tid, term } => self.rc_on_log_ack(ctx, from, tid, term),
            Message::RcDecision {
                tid,
                decision,
                context,
            } => {
                let now = ctx.now();
                self.entry(tid, now).merge_context(&context);
                let cost = self.apply(ctx, tid, decision);
                ctx.send_after(cost, from, Message::RcDecisionAck { tid });
            }
            Message::RcDecisionAck { tid } => self.rc_on_decision_ack(ctx, from, tid),
            Message::RcInquiry { tid, context } => self.rc_on_inquiry(ctx, tid, context),
            Message::RcQuery { tid, term } => {
                let rec = self.rc_log.entry(tid).or_default();
                if term >= rec.promised_term {
                    rec.promised_term = term;
                    let reply = Message::RcQueryReply {
                        tid,
                        term,
                        record: rec.record,
                        context: rec.context.clone(),
                    };
                    ctx.send(from, reply);
                }
            }
            Message::RcQueryReply {
                tid,
                term,
                record,
                context,
            } => self.rc_on_query_reply(ctx, from, tid, term, record, context),
            _ => {}
        }
    }

    /// Timeout handling for the baselines: a transaction that never reached
    /// prepare is aborted unilaterally; a prepared 2PC participant blocks;
    /// a prepared replicated-2PC replica asks the coordinator group.
    pub(crate) fn baseline_scan(&mut self, ctx: &mut Ctx<'_>) {
        let now = ctx.now();
        let timeout = self.config().recovery_timeout;
        let protocol = self.config().protocol;
        let expired: Vec<(TxnId, bool)> = self
            .txns
            .iter()
            .filter(|(_, e)| {
                e.acceptor.applied.is_none() && now.saturating_sub(e.last_contact) > timeout
            })
            .map(|(t, e)| (*t, e.prepared))
            .collect();
        for (tid, prepared) in expired {
            if !prepared {
                self.apply(ctx, tid, Decision::Abort);
            } else if protocol == Protocol::RCommit {
                self.rc_inquire(ctx, tid);
            }
        }
    }

    fn tpc_prepare(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        shard: ShardId,
        writes: usize,
        expected_ops: u32,
    ) {
        let now = ctx.now();
        let decided = self
            .txns
            .get(&tid)
            .is_some_and(|e| e.acceptor.applied.is_some());
        let vote = if decided {
            Vote::No
        } else {
            self.compute_vote(tid, shard, expected_ops, true)
        };
        let e = self.entry(tid, now);
        e.last_contact = now;
        e.acceptor.votes.insert(shard, vote);
        ctx.record(TraceKind::VoteRecorded { tid, shard, vote });
        if vote == Vote::Yes {
            self.entry(tid, now).prepared = true;
            ctx.record(TraceKind::Prepared { tid, shard, vote });
            let delay = self.config().log_cost.latency(writes);
            ctx.send_after(delay, from, Message::TpcVote { tid, shard, vote });
        } else {
            self.apply(ctx, tid, Decision::Abort);
            ctx.send(from, Message::TpcVote { tid, shard, vote });
        }
    }

    fn rc_begin(
        &mut self,
        ctx: &mut Ctx<'_>,
        client: NodeId,
        tid: TxnId,
        context: TxnContext,
        expected_ops: BTreeMap<ShardId, u32>,
    ) {
        let Some(cshard) = rc_coordinator_shard(&context) else {
            return;
        };
        if !ctx.shards().is_leader(self.id(), cshard) || self.rc_coord.contains_key(&tid) {
            return;
        }
        let term = ctx.shards().group(cshard).map_or(0, |g| g.term);
        ctx.record(TraceKind::CommitStarted {
            tid,
            protocol: Protocol::RCommit,
            writes: context.write_count() as u32,
            depth: 0,
        });
        for s in &context.shard_ids {
            if let Some(l) = ctx.shards().leader(*s) {
                let expected = expected_ops.get(s).copied().unwrap_or(0);
                ctx.send(
                    l,
                    Message::RcPrepare {
                        tid,
                        shard: *s,
                        expected_ops: expected,
                        context: context.clone(),
                    },
                );
            }
        }
        let coord = RcCoordinator {
            client: Some(client),
            context,
            term,
            votes: BTreeMap::new(),
            stage: RcStage::Voting,
            started_at: ctx.now(),
        };
        self.rc_coord.insert(tid, coord);
    }

    fn rc_prepare(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        shard: ShardId,
        expected_ops: u32,
        context: TxnContext,
    ) {
        if !ctx.shards().is_leader(self.id(), shard) {
            return;
        }
        let now = ctx.now();
        let decided = self
            .txns
            .get(&tid)
            .is_some_and(|e| e.acceptor.applied.is_some());
        let existing = self
            .txns
            .get(&tid)
            .and_then(|e| e.acceptor.votes.get(&shard).copied());
        let vote = match existing {
            Some(v) => v,
            None => {
                let v = if decided {
                    Vote::No
                } else {
                    self.compute_vote(tid, shard, expected_ops, true)
                };
                self.entry(tid, now).acceptor.votes.insert(shard, v);
                if v == Vote::Yes {
                    self.stamp_vote(ctx, tid, shard);
                }
                ctx.record(TraceKind::VoteRecorded {
                    tid,
                    shard,
                    vote: v,
                });
                ctx.record(TraceKind::Prepared {
                    tid,
                    shard,
                    vote: v,
                });
                v
            }
        };
        let group = ctx.shards().group(shard).expect("leader's group").clone();
        let me = self.id();
        let e = self.entry(tid, now);
        e.merge_context(&context);
        e.prepared = true;
        e.last_contact = now;
        let context = e.acceptor.context.clone().expect("merged");
        let stamp = if vote == Vote::Yes {
            context.stamps.get(&shard).copied()
        } else {
            None
        };
        let mut acks = BTreeSet::new();
        acks.insert(me);
        for m in group.members.iter().filter(|m| **m != me) {
            ctx.send(
                *m,
                Message::RcReplicatePrepare {
                    tid,
                    shard,
                    vote,
                    context: context.clone(),
                },
            );
        }
        let replied = group.has_quorum(&acks);
        if replied {
            ctx.send(
                from,
                Message::RcVote {
                    tid,
                    shard,
                    vote,
                    stamp,
                },
            );
        }
        e.vote_rounds.insert(
            shard,
            VoteRound {
                vote,
                result: None,
                acks,
                client: from,
                replied,
                stamp,
            },
        );
    }

    fn rc_on_vote(
        &mut self,
        ctx: &mut Ctx<'_>,
        tid: TxnId,
        shard: ShardId,
        vote: Vote,
        stamp: Option<Stamp>,
    ) {
        let Some(c) = self.rc_coord.get_mut(&tid) else {
            return;
        };
        if !matches!(c.stage, RcStage::Voting) {
            return;
        }
        c.votes.insert(shard, vote);
        if let Some(s) = stamp {
            c.context.stamps.insert(shard, s);
        }
        let decision = if vote == Vote::No {
            Decision::Abort
        } else if c
            .context
            .shard_ids
            .iter()
            .all(|s| c.votes.get(s) == Some(&Vote::Yes))
        {
            Decision::Commit
        } else {
            return;
        };
        ctx.record(TraceKind::Proposed {
            tid,
            decision,
            grounds: crate::types::Grounds::Unconfirmed,
            shards: c.context.shard_ids.iter().copied().collect(),
            votes: c.votes.clone(),
        });
        self.rc_log_decision(ctx, tid, decision);
    }

    /// Replicates `decision` in the coordinator group at the current term.
    fn rc_log_decision(&mut self, ctx: &mut Ctx<'_>, tid: TxnId, decision: Decision) {
        let me = self.id();
        let Some(c) = self.rc_coord.get(&tid) else {
            return;
        };
        let (term, context) = (c.term, c.context.clone());
        if !self.rc_log_accept(tid, term, decision, &context) {
            self.rc_coord.remove(&tid);
            return;
        }
        let cshard = rc_coordinator_shard(&context).expect("non-empty context");
        let group = ctx
            .shards()
            .group(cshard)
            .expect("coordinator group")
            .clone();
        let mut acks = BTreeSet::new();
        acks.insert(me);
        for m in group.members.iter().filter(|m| **m != me) {
            ctx.send(
                *m,
                Message::RcLogDecision {
                    tid,
                    term,
                    decision,
                    context: context.clone(),
                },
            );
        }
        let c = self.rc_coord.get_mut(&tid).expect("checked");
        c.stage = RcStage::Logging { decision, acks };
        if group.quorum_size() == 1 {
            self.rc_broadcast_decision(ctx, tid);
        }
    }

    fn rc_log_accept(
        &mut self,
        tid: TxnId,
        term: u64,
        decision: Decision,
        context: &TxnContext,
    ) -> bool {
        let rec = self.rc_log.entry(tid).or_default();
        if term < rec.promised_term {
            return false;
        }
        rec.promised_term = term;
        rec.record = Some((term, decision));
        rec.context = Some(context.clone());
        true
    }

    fn rc_on_log_ack(&mut self, ctx: &mut Ctx<'_>, from: NodeId, tid: TxnId, term: u64) {
        let Some(c) = self.rc_coord.get_mut(&tid) else {
            return;
        };
        if c.term != term {
            return;
        }
        let RcStage::Logging { acks, .. } = &mut c.stage else {
            return;
        };
        acks.insert(from);
        let cshard = rc_coordinator_shard(&c.context).expect("non-empty context");
        if ctx
            .shards()
            .group(cshard)
            .is_some_and(|g| g.has_quorum(acks.iter()))
        {
            self.rc_broadcast_decision(ctx, tid);
        }
    }

    fn rc_broadcast_decision(&mut self, ctx: &mut Ctx<'_>, tid: TxnId) {
        let Some(c) = self.rc_coord.get_mut(&tid) else {
            return;
        };
        let RcStage::Logging { decision, .. } = c.stage else {
            return;
        };
        c.stage = RcStage::Deciding {
            decision,
            acks: BTreeSet::new(),
        };
        for n in ctx.shards().replicas_of(&c.context.shard_ids) {
            ctx.send(
                n,
                Message::RcDecision {
                    tid,
                    decision,
                    context: c.context.clone(),
                },
            );
        }
    }

    fn rc_on_decision_ack(&mut self, ctx: &mut Ctx<'_>, from: NodeId, tid: TxnId) {
        let Some(c) = self.rc_coord.get_mut(&tid) else {
            return;
        };
        let RcStage::Deciding { decision, acks } = &mut c.stage else {
            return;
        };
        acks.insert(from);
        let map = ctx.shards();
        if !c
            .context
            .shard_ids
            .iter()
            .all(|s| map.group(*s).is_some_and(|g| g.has_quorum(acks.iter())))
        {
            return;
        }
        let decision = *decision;
        let started = c.started_at;
        let client = c.client;
        let shards = c.context.shard_ids.iter().copied().collect();
        c.stage = RcStage::Done;
        if let Some(client) = client {
            ctx.record(TraceKind::CommitEnded {
                tid,
                decision,
                latency_us: ctx.now() - started,
                delays: 8,
                shards,
            });
            ctx.send(client, Message::RcOutcome { tid, decision });
        }
    }

    /// A prepared replica whose coordinator went quiet asks the current
    /// leader of the coordinator group for the outcome.
    pub(crate) fn rc_inquire(&mut self, ctx: &mut Ctx<'_>, tid: TxnId) {
        let now = ctx.now();
        let Some(e) = self.txns.get_mut(&tid) else {
            return;
        };
        if e.acceptor.applied.is_some() {
            return;
        }
        let Some(context) = e.acceptor.context.clone() else {
            return;
        };
        e.last_contact = now;
        let Some(leader) = rc_coordinator_shard(&context).and_then(|s| ctx.shards().leader(s))
        else {
            return;
        };
        ctx.send(leader, Message::RcInquiry { tid, context });
    }

    fn rc_on_inquiry(&mut self, ctx: &mut Ctx<'_>, tid: TxnId, context: TxnContext) {
        let Some(cshard) = rc_coordinator_shard(&context) else {
            return;
        };
        if !ctx.shards().is_leader(self.id(), cshard) {
            return;
        }
        let term = ctx.shards().group(cshard).map_or(0, |g| g.term);
        match self.rc_coord.get(&tid).map(|c| &c.stage) {
            Some(RcStage::Deciding { decision, .. }) => {
                let decision = *decision;
                for n in ctx.shards().replicas_of(&context.shard_ids) {
                    ctx.send(
                        n,
                        Message::RcDecision {
                            tid,
                            decision,
                            context: context.clone(),
                        },
                    );
                }
                return;
            }
            Some(RcStage::Done) if self.rc_coord[&tid].term == term => {
                if let Some((_, decision)) = self.rc_log.get(&tid).and_then(|r| r.record) {
                    for n in ctx.shards().replicas_of(&context.shard_ids) {
                        ctx.send(
                            n,
                            Message::RcDecision {
                                tid,
                                decision,
                                context: context.clone(),
                            },
                        );
                    }
                }
                return;
            }
            Some(_) if self.rc_coord[&tid].term == term => return,
            _ => {}
        }
        let group = ctx
            .shards()
            .group(cshard)
            .expect("coordinator group")
            .clone();
        let coord = RcCoordinator {
            client: None,
            context,
            term,
            votes: BTreeMap::new(),
            stage: RcStage::Querying {
                replies: BTreeMap::new(),
            },
            started_at: ctx.now(),
        };
        self.rc_coord.insert(tid, coord);
        for m in &group.members {
            ctx.send(*m, Message::RcQuery { tid, term });
        }
    }

    fn rc_on_query_reply(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        term: u64,
        record: Option<(u64, Decision)>,
        context: Option<TxnContext>,
    ) {
        let Some(c) = self.rc_coord.get_mut(&tid) else {
            return;
        };
        if c.term != term {
            return;
        }
        if let Some(other) = &context {
            c.context.merge(other);
        }
        let RcStage::Querying { replies } = &mut c.stage else {
            return;
        };
        replies.insert(from, record);
        let cshard = rc_coordinator_shard(&c.context).expect("non-empty context");
        if !ctx
            .shards()
            .group(cshard)
            .is_some_and(|g| g.has_quorum(replies.keys()))
        {
            return;
        }
        let decision = replies
            .values()
            .flatten()
            .max_by_key(|(t, _)| *t)
            .map_or(Decision::Abort, |(_, d)| *d);
        c.stage = RcStage::Voting;
        self.rc_log_decision(ctx, tid, decision);
    }

    /// A new coordinator-group leader has nothing to do until asked.
    pub(crate) fn rc_on_promote(&mut self, _ctx: &mut Ctx<'_>, shard: ShardId) {
        self.rc_coord.retain(|_, c| {
            rc_coordinator_shard(&c.context) != Some(shard) || matches!(c.stage, RcStage::Done)
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{ReplicaGroup, ShardMap};
    use crate::types::Value;

    #[test]
    fn log_latency_is_affine() {
        let m = LogCostModel::default();
        assert_eq!(m.latency(0), 200);
        assert_eq!(m.latency(64), 200 + 640);
    }

    fn two_shard_context() -> (TxnContext, ShardMap) {
        let map = ShardMap::from_groups([
            ReplicaGroup::new(ShardId(0), vec![NodeId(1)]),
            ReplicaGroup::new(ShardId(1), vec![NodeId(2)]),
        ]);
        let mut c = TxnContext::new(TxnId(7));
        c.shard_ids.extend([ShardId(0), ShardId(1)]);
        c.record_write(ShardId(0), "a", Value(b"1".to_vec()));
        (c, map)
    }

    #[test]
    fn any_no_vote_aborts() {
        let (c, map) = two_shard_context();
        let (mut coord, prepares) =
            TwoPcCoordinator::prepare(&c, &BTreeMap::new(), &map, LogCostModel::default());
        assert_eq!(prepares.len(), 2);
        assert!(coord.on_vote(ShardId(0), Vote::Yes).is_none());
        let (d, delay, msgs) = coord.on_vote(ShardId(1), Vote::No).unwrap();
        assert_eq!(d, Decision::Abort);
        assert_eq!(delay, 210);
        assert_eq!(msgs.len(), 2);
        assert!(coord.on_vote(ShardId(0), Vote::Yes).is_none());
    }

    #[test]
    fn all_yes_commits_and_all_acks_end() {
        let (c, map) = two_shard_context();
        let (mut coord, _) =
            TwoPcCoordinator::prepare(&c, &BTreeMap::new(), &map, LogCostModel::default());
        coord.on_vote(ShardId(0), Vote::Yes);
        let (d, _, _) = coord.on_vote(ShardId(1), Vote::Yes).unwrap();
        assert_eq!(d, Decision::Commit);
        assert!(!coord.on_ack(NodeId(1)));
        assert!(coord.on_ack(NodeId(2)));
    }
}
