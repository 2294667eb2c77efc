//! Transaction client. [`ClientTxn`] is the coordinator library: it turns
//! application calls into outgoing messages and folds replies back in,
//! without touching a network. [`ClientActor`] and [`ScriptClient`] drive
//! it inside the simulator.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{rc_coordinator_shard, LogCostModel, TwoPcCoordinator};
use crate::sim::{Ctx, Process, Timer};
use crate::topology::ShardMap;
use crate::trace::{Protocol, TraceKind};
use crate::types::{
    Ballot, Decision, Grounds, Message, NodeId, Op, OpOutcome, ShardId, Time, TxnContext, TxnId,
    TxnIdGenerator, Vote,
};
use crate::workload::{TxnSource, TxnSpec};

pub type Outbox = Vec<(NodeId, Message)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AckPolicy {
    /// Report once a quorum of any one participant group acknowledged.
    #[default]
    AnyQuorum,
    /// Wait for a quorum of every participant group.
    AllQuorums,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase2Fanout {
    /// The client sends the decision to every replica itself.
    #[default]
    Direct,
    /// Leaders relay the decision to their replicas. Not implemented.
    LeaderRelay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "phase", content = "decision")]
pub enum TxnPhase {
    Executing,
    Voted,
    Deciding(Decision),
    Ended(Decision),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("operation not allowed in phase {0:?}")]
    WrongPhase(TxnPhase),
    #[error("an operation is still outstanding")]
    OpPending,
    #[error("commit refused: not every shard voted YES")]
    NotAllYes,
    #[error("no leader for shard {0}")]
    NoLeader(ShardId),
}

/// What a reply changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    OpDone {
        seq: u32,
        outcome: OpOutcome,
    },
    /// Every shard has voted.
    Voted {
        all_yes: bool,
    },
    /// The outcome can be reported to the application.
    Ended(Decision),
    /// A replica refused the ballot-zero proposal.
    Preempted,
}

/// One transaction's coordinator state.
#[derive(Debug, Clone)]
pub struct ClientTxn {
    tid: TxnId,
    context: TxnContext,
    phase: TxnPhase,
    ack_policy: AckPolicy,
    contacted: BTreeSet<ShardId>,
    ops_per_shard: BTreeMap<ShardId, u32>,
    next_seq: u32,
    pending: Option<u32>,
    last_op_sent: bool,
    votes: BTreeMap<ShardId, Vote>,
    final_result: Option<OpOutcome>,
    grounds: Option<Grounds>,
    acks: BTreeSet<NodeId>,
    retransmits: u32,
}

impl ClientTxn {
    pub fn begin(tid: TxnId, ack_policy: AckPolicy) -> Self {
        Self {
            tid,
            context: TxnContext::new(tid),
            phase: TxnPhase::Executing,
            ack_policy,
            contacted: BTreeSet::new(),
            ops_per_shard: BTreeMap::new(),
            next_seq: 0,
            pending: None,
            last_op_sent: false,
            votes: BTreeMap::new(),
            final_result: None,
            grounds: None,
            acks: BTreeSet::new(),
            retransmits: 0,
        }
    }

    pub fn tid(&self) -> TxnId {
        self.tid
    }

    pub fn status(&self) -> TxnPhase {
        self.phase
    }

    pub fn context(&self) -> &TxnContext {
        &self.context
    }

    pub fn votes(&self) -> &BTreeMap<ShardId, Vote> {
        &self.votes
    }

    pub fn grounds(&self) -> Option<Grounds> {
        self.grounds
    }

    pub fn final_result(&self) -> Option<&OpOutcome> {
        self.final_result.as_ref()
    }

    pub fn ops_per_shard(&self) -> &BTreeMap<ShardId, u32> {
        &self.ops_per_shard
    }

    pub fn pending_op(&self) -> Option<u32> {
        self.pending
    }

    pub fn last_op_sent(&self) -> bool {
        self.last_op_sent
    }

    fn add_op(&mut self, shard: ShardId, op: &Op) {
        self.context.shard_ids.insert(shard);
        *self.ops_per_shard.entry(shard).or_default() += 1;
        if let Op::Write { key, value } = op {
            self.context.record_write(shard, key, value.clone());
        }
    }

    /// Sends `op` to its shard leader. If the configuration grew, every
    /// leader contacted before learns the new shard set as well.
    pub fn execute(&mut self, shards: &ShardMap, op: Op) -> Result<(u32, Outbox), ClientError> {
        if self.phase != TxnPhase::Executing || self.last_op_sent {
            return Err(ClientError::WrongPhase(self.phase));
        }
        if self.pending.is_some() {
            return Err(ClientError::OpPending);
        }
        let shard = shards.shard_of(op.key());
        let leader = shards.leader(shard).ok_or(ClientError::NoLeader(shard))?;
        let grew = !self.context.shard_ids.contains(&shard);
        self.add_op(shard, &op);
        let config = self.context.shard_ids.clone();
        let mut out = Vec::new();
        if grew {
            for s in self.contacted.iter().filter(|s| **s != shard) {
                if let Some(l) = shards.leader(*s) {
                    out.push((
                        l,
                        Message::ConfigUpdate {
                            tid: self.tid,
                            config: config.clone(),
                        },
                    ));
                }
            }
        }
        self.contacted.insert(shard);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending = Some(seq);
        out.push((
            leader,
            Message::ExecOp {
                tid: self.tid,
                seq,
                op,
                config,
            },
        ));
        Ok((seq, out))
    }

    /// Sends the last operation (or an empty one) to every shard leader.
    pub fn finish_execution(
        &mut self,
        shards: &ShardMap,
        final_op: Option<Op>,
    ) -> Result<Outbox, ClientError> {
        if self.phase != TxnPhase::Executing || self.last_op_sent {
            return Err(ClientError::WrongPhase(self.phase));
        }
        if self.pending.is_some() {
            return Err(ClientError::OpPending);
        }
        let final_shard = final_op.as_ref().map(|op| shards.shard_of(op.key()));
        if let (Some(s), Some(op)) = (final_shard, &final_op) {
            self.add_op(s, op);
        }
        self.last_op_sent = true;
        if self.context.shard_ids.is_empty() {
            self.phase = TxnPhase::Voted;
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for s in &self.context.shard_ids {
            let leader = shards.leader(*s).ok_or(ClientError::NoLeader(*s))?;
            let op = if Some(*s) == final_shard {
                final_op.clone()
            } else {
                None
            };
            out.push((
                leader,
                Message::LastOp {
                    tid: self.tid,
                    shard: *s,
                    op,
                    expected_ops: self.ops_per_shard.get(s).copied().unwrap_or(0),
                    context: self.context.clone(),
                },
            ));
        }
        Ok(out)
    }

    pub fn all_yes(&self) -> bool {
        self.context
            .shard_ids
            .iter()
            .all(|s| self.votes.get(s) == Some(&Vote::Yes))
    }

    /// Proposes COMMIT at ballot zero. Refused unless every shard voted YES.
    pub fn commit(&mut self, shards: &ShardMap) -> Result<Outbox, ClientError> {
        if self.phase != TxnPhase::Voted {
            return Err(ClientError::WrongPhase(self.phase));
        }
        if !self.all_yes() {
            return Err(ClientError::NotAllYes);
        }
        Ok(self.propose(shards, Decision::Commit, Grounds::AllYes))
    }

    /// Proposes ABORT at ballot zero; allowed until a decision exists.
    pub fn abort(&mut self, shards: &ShardMap) -> Result<Outbox, ClientError> {
        if !matches!(self.phase, TxnPhase::Executing | TxnPhase::Voted) {
            return Err(ClientError::WrongPhase(self.phase));
        }
        let grounds = if !self.last_op_sent {
            Grounds::NeverPrepared
        } else if self.votes.values().any(|v| *v == Vote::No) {
            Grounds::VotedNo
        } else {
            Grounds::Unconfirmed
        };
        Ok(self.propose(shards, Decision::Abort, grounds))
    }

    fn propose(&mut self, shards: &ShardMap, decision: Decision, grounds: Grounds) -> Outbox {
        self.pending = None;
        self.grounds = Some(grounds);
        if self.context.shard_ids.is_empty() {
            self.phase = TxnPhase::Ended(decision);
            return Vec::new();
        }
        self.phase = TxnPhase::Deciding(decision);
        self.phase2_to(shards.replicas_of(&self.context.shard_ids), decision)
    }

    fn decision(&self) -> Option<Decision> {
        match self.phase {
            TxnPhase::Deciding(d) | TxnPhase::Ended(d) => Some(d),
            _ => None,
        }
    }

    fn phase2_to(&self, nodes: impl IntoIterator<Item = NodeId>, decision: Decision) -> Outbox {
        let grounds = self.grounds.expect("proposal made");
        nodes
            .into_iter()
            .map(|n| {
                let msg = Message::Phase2 {
                    tid: self.tid,
                    ballot: Ballot::ZERO,
                    decision,
                    grounds,
                    context: self.context.clone(),
                };
                (n, msg)
            })
            .collect()
    }

    /// Re-sends the decision to replicas that have not acknowledged it.
    /// Empty once everyone acked or `max` retransmissions were made.
    pub fn retransmit(&mut self, shards: &ShardMap, max: u32) -> Outbox {
        let Some(decision) = self.decision() else {
            return Vec::new();
        };
        if self.retransmits >= max || self.fully_acked(shards) {
            return Vec::new();
        }
        self.retransmits += 1;
        let missing: Vec<_> = shards
            .replicas_of(&self.context.shard_ids)
            .into_iter()
            .filter(|n| !self.acks.contains(n))
            .collect();
        self.phase2_to(missing, decision)
    }

    pub fn fully_acked(&self, shards: &ShardMap) -> bool {
        shards
            .replicas_of(&self.context.shard_ids)
            .iter()
            .all(|n| self.acks.contains(n))
    }

    fn quorum_reached(&self, shards: &ShardMap) -> bool {
        let mut groups = self
            .context
            .shard_ids
            .iter()
            .filter_map(|s| shards.group(*s));
        match self.ack_policy {
            AckPolicy::AnyQuorum => groups.any(|g| g.has_quorum(&self.acks)),
            AckPolicy::AllQuorums => groups.all(|g| g.has_quorum(&self.acks)),
        }
    }

    /// Folds a reply in. Returns what changed and any messages to send.
    pub fn on_message(
        &mut self,
        shards: &ShardMap,
        from: NodeId,
        msg: &Message,
    ) -> (Option<ClientEvent>, Outbox) {
        if msg.tid() != self.tid {
            return (None, Vec::new());
        }
        match msg {
            Message::OpReply { seq, outcome, .. } if self.pending == Some(*seq) => {
                self.pending = None;
                (
                    Some(ClientEvent::OpDone {
                        seq: *seq,
                        outcome: outcome.clone(),
                    }),
                    Vec::new(),
                )
            }
            Message::LastOpReply {
                shard,
                vote,
                result,
                stamp,
                ..
            } if self.phase == TxnPhase::Executing && self.last_op_sent => {
                if self.votes.contains_key(shard) || !self.context.shard_ids.contains(shard) {
                    return (None, Vec::new());
                }
                self.votes.insert(*shard, *vote);
                if let Some(s) = stamp {
                    self.context.stamps.insert(*shard, *s);
                }
                if result.is_some() {
                    self.final_result = result.clone();
                }
                if self.votes.len() == self.context.shard_ids.len() {
                    self.phase = TxnPhase::Voted;
                    return (
                        Some(ClientEvent::Voted {
                            all_yes: self.all_yes(),
                        }),
                        Vec::new(),
                    );
                }
                (None, Vec::new())
            }
            Message::Phase2Ack {
                ballot, decision, ..
            } if *ballot == Ballot::ZERO && Some(*decision) == self.decision() => {
                self.acks.insert(from);
                if matches!(self.phase, TxnPhase::Deciding(_)) && self.quorum_reached(shards) {
                    self.phase = TxnPhase::Ended(*decision);
                    let grounds = self.grounds.expect("proposal made");
                    let mut out = Vec::new();
                    if !grounds.settles(Ballot::ZERO, *decision) {
                        for n in shards.replicas_of(&self.context.shard_ids) {
                            out.push((
                                n,
                                Message::Chosen {
                                    tid: self.tid,
                                    ballot: Ballot::ZERO,
                                    decision: *decision,
                                    context: self.context.clone(),
                                },
                            ));
                        }
                    }
                    return (Some(ClientEvent::Ended(*decision)), out);
                }
                (None, Vec::new())
            }
            Message::Phase2Nack { .. } => (Some(ClientEvent::Preempted), Vec::new()),
            _ => (None, Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub protocol: Protocol,
    pub ack_policy: AckPolicy,
    pub fanout: Phase2Fanout,
    /// Longest wait for an operation reply or for all votes.
    pub op_timeout: Time,
    /// Longest wait for a decision to become reportable.
    pub end_deadline: Time,
    pub retransmit_interval: Time,
    pub max_retransmits: u32,
    /// Round-trip time used to scale the retry back-off.
    pub rtt: Time,
    pub think_time: Time,
    /// Attempts per transaction before giving up.
    pub max_attempts: u32,
    pub log_cost: LogCostModel,
    /// No new transaction starts after this time.
    pub stop_at: Option<Time>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::HaCommit,
            ack_policy: AckPolicy::default(),
            fanout: Phase2Fanout::default(),
            op_timeout: 5_000,
            end_deadline: 20_000,
            retransmit_interval: 2 * 50 * 4,
            max_retransmits: 5,
            rtt: 100,
            think_time: 0,
            max_attempts: 100,
            log_cost: LogCostModel::default(),
            stop_at: None,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.fanout == Phase2Fanout::LeaderRelay {
            return Err("leader-relay phase-2 fan-out is not supported".into());
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        Ok(())
    }
}

const VOTE_SEQ: u32 = u32::MAX;

#[derive(Debug)]
enum Stage {
    Executing {
        next_op: usize,
    },
    Voting,
    /// HACommit: waiting until the decision is reportable.
    Deciding,
    TwoPc(TwoPcCoordinator),
    RCommit,
    /// Waiting out the back-off before the next attempt.
    Backoff,
}

#[derive(Debug)]
struct Attempt {
    txn: u64,
    attempt: u32,
    spec: TxnSpec,
    handle: ClientTxn,
    stage: Stage,
    started: Time,
}

/// Simulated application client: runs transactions from a source one at a
/// time, retrying aborted ones after a random back-off.
pub struct ClientActor {
    config: ClientConfig,
    source: Box<dyn TxnSource>,
    ids: TxnIdGenerator,
    txn_counter: u64,
    current: Option<Attempt>,
    /// Finished proposals still collecting acknowledgements.
    closing: BTreeMap<TxnId, ClientTxn>,
    exhausted: bool,
}

impl ClientActor {
    pub fn new(me: NodeId, config: ClientConfig, source: Box<dyn TxnSource>) -> Self {
        Self {
            config,
            source,
            ids: TxnIdGenerator::new(me),
            txn_counter: 0,
            current: None,
            closing: BTreeMap::new(),
            exhausted: false,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.current.is_none() && self.exhausted
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn send_all(ctx: &mut Ctx<'_>, out: Outbox) {
        for (to, msg) in out {
            ctx.send(to, msg);
        }
    }

    fn hacommit(&self) -> bool {
        matches!(
            self.config.protocol,
            Protocol::HaCommit | Protocol::HaCommitRc
        )
    }

    fn next_txn(&mut self, ctx: &mut Ctx<'_>) {
        self.current = None;
        if self.config.stop_at.is_some_and(|t| ctx.now() >= t) {
            self.exhausted = true;
            return;
        }
        let Some(spec) = self.source.next_txn() else {
            self.exhausted = true;
            return;
        };
        self.txn_counter += 1;
        self.start_attempt(ctx, self.txn_counter, 1, spec);
    }

    fn start_attempt(&mut self, ctx: &mut Ctx<'_>, txn: u64, attempt: u32, spec: TxnSpec) {
        let tid = self.ids.fresh(ctx.rng());
        ctx.record(TraceKind::TxnIssued { txn, tid, attempt });
        let handle = ClientTxn::begin(tid, self.config.ack_policy);
        self.current = Some(Attempt {
            txn,
            attempt,
            spec,
            handle,
            stage: Stage::Executing { next_op: 0 },
            started: ctx.now(),
        });
        self.advance(ctx);
    }

    /// Issues the next operation, or moves to the commit protocol once the
    /// body has run.
    fn advance(&mut self, ctx: &mut Ctx<'_>) {
        let hacommit = self.hacommit();
        let op_timeout = self.config.op_timeout;
        let Some(a) = self.current.as_mut() else {
            return;
        };
        let Stage::Executing { next_op } = a.stage else {
            return;
        };
        let n = a.spec.ops.len();
        let body = if hacommit { n.saturating_sub(1) } else { n };
        let tid = a.handle.tid();
        if next_op < body {
            let op = a.spec.ops[next_op].clone();
            match a.handle.execute(ctx.shards(), op) {
                Ok((seq, out)) => {
                    a.stage = Stage::Executing {
                        next_op: next_op + 1,
                    };
                    Self::send_all(ctx, out);
                    ctx.set_timer(op_timeout, Timer::OpTimeout { tid, seq });
                }
                Err(_) => self.abort_current(ctx),
            }
            return;
        }
        match self.config.protocol {
            Protocol::HaCommit | Protocol::HaCommitRc => {
                let final_op = a.spec.ops.last().cloned();
                match a.handle.finish_execution(ctx.shards(), final_op) {
                    Ok(out) => {
                        a.stage = Stage::Voting;
                        let voted = a.handle.status() == TxnPhase::Voted;
                        Self::send_all(ctx, out);
                        if voted {
                            self.on_voted(ctx);
                        } else {
                            ctx.set_timer(op_timeout, Timer::OpTimeout { tid, seq: VOTE_SEQ });
                        }
                    }
                    Err(_) => self.abort_current(ctx),
                }
            }
            Protocol::TwoPc => {
                if a.handle.context().shard_ids.is_empty() {
                    self.finish(ctx, Decision::Commit);
                    return;
                }
                let (coord, out) = TwoPcCoordinator::prepare(
                    a.handle.context(),
                    a.handle.ops_per_shard(),
                    ctx.shards(),
                    self.config.log_cost,
                );
                ctx.record(TraceKind::CommitStarted {
                    tid,
                    protocol: Protocol::TwoPc,
                    writes: a.handle.context().write_count() as u32,
                    depth: 0,
                });
                a.started = ctx.now();
                a.stage = Stage::TwoPc(coord);
                Self::send_all(ctx, out);
                ctx.set_timer(op_timeout, Timer::OpTimeout { tid, seq: VOTE_SEQ });
            }
            Protocol::RCommit => {
                let context = a.handle.context().clone();
                let Some(leader) =
                    rc_coordinator_shard(&context).and_then(|s| ctx.shards().leader(s))
                else {
                    self.finish(ctx, Decision::Commit);
                    return;
                };
                a.stage = Stage::RCommit;
                let expected_ops = a.handle.ops_per_shard().clone();
                ctx.send(
                    leader,
                    Message::RcCommitRequest {
                        tid,
                        context,
                        expected_ops,
                    },
                );
                ctx.set_timer(self.config.end_deadline, Timer::EndDeadline { tid });
            }
        }
    }

    fn on_voted(&mut self, ctx: &mut Ctx<'_>) {
        let Some(a) = self.current.as_mut() else {
            return;
        };
        if !a.handle.all_yes() {
            self.abort_current(ctx);
            return;
        }
        let out = a.handle.commit(ctx.shards()).expect("all shards voted YES");
        let tid = a.handle.tid();
        record_proposal(ctx, &a.handle);
        if out.is_empty() {
            self.finish(ctx, Decision::Commit);
            return;
        }
        ctx.record(TraceKind::CommitStarted {
            tid,
            protocol: self.config.protocol,
            writes: a.handle.context().write_count() as u32,
            depth: 0,
        });
        a.started = ctx.now();
        a.stage = Stage::Deciding;
        Self::send_all(ctx, out);
        ctx.set_timer(self.config.retransmit_interval, Timer::Retransmit { tid });
        ctx.set_timer(self.config.end_deadline, Timer::EndDeadline { tid });
    }

    /// Gives up on the current attempt and retries after a back-off.
    /// HACommit proposes ABORT first; a 2PC coordinator sends ABORT to the
    /// participants it prepared.
    fn abort_current(&mut self, ctx: &mut Ctx<'_>) {
        let Some(mut a) = self.current.take() else {
            return;
        };
        let tid = a.handle.tid();
        if self.hacommit() {
            if let Ok(out) = a.handle.abort(ctx.shards()) {
                record_proposal(ctx, &a.handle);
                if !out.is_empty() {
                    Self::send_all(ctx, out);
                    self.closing.insert(tid, a.handle.clone());
                    ctx.set_timer(self.config.retransmit_interval, Timer::Retransmit { tid });
                }
            }
        } else if let Stage::TwoPc(coord) = &mut a.stage {
            if let Some((decision, delay, out)) = coord.abort() {
                ctx.record(TraceKind::Proposed {
                    tid,
                    decision,
                    grounds: Grounds::Unconfirmed,
                    shards: a.handle.context().shard_ids.iter().copied().collect(),
                    votes: coord.votes().clone(),
                });
                for (to, msg) in out {
                    ctx.send_after(delay, to, msg);
                }
            }
        }
        self.retry(ctx, a);
    }

    fn retry(&mut self, ctx: &mut Ctx<'_>, a: Attempt) {
        ctx.record(TraceKind::Retry {
            txn: a.txn,
            tid: a.handle.tid(),
        });
        if a.attempt >= self.config.max_attempts {
            ctx.record(TraceKind::GaveUp { txn: a.txn });
            self.schedule_next(ctx);
            return;
        }
        let rtt = self.config.rtt.max(2);
        let backoff = ctx.rng().gen_range(rtt / 2..=rtt * 2);
        self.current = Some(Attempt {
            stage: Stage::Backoff,
            ..a
        });
        ctx.set_timer(backoff, Timer::NextTxn { slot: 1 });
    }

    fn schedule_next(&mut self, ctx: &mut Ctx<'_>) {
        self.current = None;
        if self.config.think_time == 0 {
            self.next_txn(ctx);
        } else {
            ctx.set_timer(self.config.think_time, Timer::NextTxn { slot: 0 });
        }
    }

    /// The current attempt reached a reportable outcome.
    fn finish(&mut self, ctx: &mut Ctx<'_>, decision: Decision) {
        let Some(a) = self.current.take() else { return };
        if decision == Decision::Commit {
            self.schedule_next(ctx);
        } else {
            self.retry(ctx, a);
        }
    }

    fn record_end(ctx: &mut Ctx<'_>, a: &Attempt, decision: Decision, delays: u32) {
        ctx.record(TraceKind::CommitEnded {
            tid: a.handle.tid(),
            decision,
            latency_us: ctx.now() - a.started,
            delays,
            shards: a.handle.context().shard_ids.iter().copied().collect(),
        });
    }

    fn on_reply(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
        let tid = msg.tid();
        if let Some(h) = self.closing.get_mut(&tid) {
            let (_, out) = h.on_message(ctx.shards(), from, &msg);
            Self::send_all(ctx, out);
            if h.fully_acked(ctx.shards()) {
                self.closing.remove(&tid);
            }
            return;
        }
        let Some(a) = self.current.as_mut() else {
            return;
        };
        if a.handle.tid() != tid {
            return;
        }
        match (&mut a.stage, &msg) {
            (Stage::TwoPc(coord), Message::TpcVote { shard, vote, .. }) => {
                if let Some((decision, delay, out)) = coord.on_vote(*shard, *vote) {
                    ctx.record(TraceKind::Proposed {
                        tid,
                        decision,
                        grounds: if decision == Decision::Commit {
                            Grounds::AllYes
                        } else {
                            Grounds::VotedNo
                        },
                        shards: a.handle.context().shard_ids.iter().copied().collect(),
                        votes: coord.votes().clone(),
                    });
                    for (to, msg) in out {
                        ctx.send_after(delay, to, msg);
                    }
                    ctx.set_timer(self.config.end_deadline, Timer::EndDeadline { tid });
                }
            }
            (Stage::TwoPc(coord), Message::TpcAck { .. }) => {
                if coord.on_ack(from) {
                    let decision = coord.decision().expect("acked a decision");
                    Self::record_end(ctx, a, decision, 4);
                    self.finish(ctx, decision);
                }
            }
            (Stage::RCommit, Message::RcOutcome { decision, .. }) => {
                let decision = *decision;
                self.finish(ctx, decision);
            }
            (Stage::TwoPc(_) | Stage::RCommit | Stage::Backoff, _) => {}
            _ => {
                let (event, out) = a.handle.on_message(ctx.shards(), from, &msg);
                Self::send_all(ctx, out);
                match event {
                    Some(ClientEvent::OpDone { outcome, .. }) => {
                        if outcome.is_ok() {
                            self.advance(ctx);
                        } else {
                            self.abort_current(ctx);
                        }
                    }
                    Some(ClientEvent::Voted { .. }) => self.on_voted(ctx),
                    Some(ClientEvent::Ended(decision)) => {
                        Self::record_end(ctx, a, decision, 2);
                        if !a.handle.fully_acked(ctx.shards()) {
                            self.closing.insert(tid, a.handle.clone());
                        }
                        self.finish(ctx, decision);
                    }
                    Some(ClientEvent::Preempted) | None => {}
                }
            }
        }
    }
}

fn record_proposal(ctx: &mut Ctx<'_>, handle: &ClientTxn) {
    let decision = match handle.status() {
        TxnPhase::Deciding(d) | TxnPhase::Ended(d) => d,
        _ => return,
    };
    ctx.record(TraceKind::Proposed {
        tid: handle.tid(),
        decision,
        grounds: handle.grounds().unwrap_or(Grounds::Unconfirmed),
        shards: handle.context().shard_ids.iter().copied().collect(),
        votes: handle.votes().clone(),
    });
}

impl Process for ClientActor {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        self.next_txn(ctx);
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
        self.on_reply(ctx, from, msg);
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: Timer) {
        match timer {
            Timer::NextTxn { slot: 0 } => self.next_txn(ctx),
            Timer::NextTxn { .. } => {
                if let Some(a) = self.current.take() {
                    self.start_attempt(ctx, a.txn, a.attempt + 1, a.spec);
                }
            }
            Timer::OpTimeout { tid, seq } => {
                let Some(a) = self.current.as_ref() else {
                    return;
                };
                if a.handle.tid() != tid {
                    return;
                }
                let waiting = match &a.stage {
                    Stage::Executing { .. } => a.handle.pending_op() == Some(seq),
                    Stage::Voting => seq == VOTE_SEQ,
                    Stage::TwoPc(c) => seq == VOTE_SEQ && c.decision().is_none(),
                    _ => false,
                };
                if waiting {
                    self.abort_current(ctx);
                }
            }
            Timer::Retransmit { tid } => {
                let max = self.config.max_retransmits;
                let handle = match self.current.as_mut() {
                    Some(a) if a.handle.tid() == tid => Some(&mut a.handle),
                    _ => self.closing.get_mut(&tid),
                };
                let Some(h) = handle else { return };
                let out = h.retransmit(ctx.shards(), max);
                if out.is_empty() {
                    self.closing.remove(&tid);
                } else {
                    Self::send_all(ctx, out);
                    ctx.set_timer(self.config.retransmit_interval, Timer::Retransmit { tid });
                }
            }
            Timer::EndDeadline { tid } => {
                let Some(a) = self.current.as_ref() else {
                    return;
                };
                if a.handle.tid() != tid || matches!(a.stage, Stage::Backoff) {
                    return;
                }
                ctx.record(TraceKind::InDoubt { tid });
                self.closing.remove(&tid);
                self.schedule_next(ctx);
            }
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// One transaction of a [`ScriptClient`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTxn {
    pub ops: Vec<Op>,
    /// Whether the client proceeds to the commit after the body. Otherwise
    /// the transaction stays open after its last operation.
    pub finish: bool,
}

/// Runs a fixed set of HACommit transactions concurrently, each once.
pub struct ScriptClient {
    config: ClientConfig,
    script: Vec<ScriptTxn>,
    txns: Vec<(ClientTxn, usize, Time)>,
    ids: TxnIdGenerator,
}

impl ScriptClient {
    pub fn new(me: NodeId, config: ClientConfig, script: Vec<ScriptTxn>) -> Self {
        Self {
            config,
            script,
            txns: Vec::new(),
            ids: TxnIdGenerator::new(me),
        }
    }

    pub fn tids(&self) -> Vec<TxnId> {
        self.txns.iter().map(|(t, _, _)| t.tid()).collect()
    }

    pub fn status(&self, i: usize) -> Option<TxnPhase> {
        self.txns.get(i).map(|(t, _, _)| t.status())
    }

    fn step(&mut self, ctx: &mut Ctx<'_>, i: usize) {
        let (txn, next, started) = &mut self.txns[i];
        let spec = &self.script[i];
        if *next < spec.ops.len() {
            if let Ok((_, out)) = txn.execute(ctx.shards(), spec.ops[*next].clone()) {
                *next += 1;
                ClientActor::send_all(ctx, out);
            }
            return;
        }
        if !spec.finish {
            return;
        }
        match txn.status() {
            TxnPhase::Executing if !txn.last_op_sent() => {
                if let Ok(out) = txn.finish_execution(ctx.shards(), None) {
                    ClientActor::send_all(ctx, out);
                }
                if txn.status() != TxnPhase::Voted {
                    return;
                }
                self.step(ctx, i);
            }
            TxnPhase::Voted => {
                let out = if txn.all_yes() {
                    txn.commit(ctx.shards())
                } else {
                    txn.abort(ctx.shards())
                };
                let out = out.expect("voted");
                let tid = txn.tid();
                let decision = match txn.status() {
                    TxnPhase::Deciding(d) | TxnPhase::Ended(d) => d,
                    _ => unreachable!(),
                };
                ctx.record(TraceKind::Proposed {
                    tid,
                    decision,
                    grounds: txn.grounds().expect("proposed"),
                    shards: txn.context().shard_ids.iter().copied().collect(),
                    votes: txn.votes().clone(),
                });
                ctx.record(TraceKind::CommitStarted {
                    tid,
                    protocol: self.config.protocol,
                    writes: txn.context().write_count() as u32,
                    depth: 0,
                });
                *started = ctx.now();
                ClientActor::send_all(ctx, out);
                ctx.set_timer(self.config.retransmit_interval, Timer::Retransmit { tid });
            }
            _ => {}
        }
    }
}

impl Process for ScriptClient {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        for _ in 0..self.script.len() {
            let tid = self.ids.fresh(ctx.rng());
            ctx.record(TraceKind::TxnIssued {
                txn: self.txns.len() as u64 + 1,
                tid,
                attempt: 1,
            });
            self.txns
                .push((ClientTxn::begin(tid, self.config.ack_policy), 0, 0));
        }
        for i in 0..self.txns.len() {
            self.step(ctx, i);
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
        let Some(i) = self.txns.iter().position(|(t, _, _)| t.tid() == msg.tid()) else {
            return;
        };
        let (event, out) = self.txns[i].0.on_message(ctx.shards(), from, &msg);
        ClientActor::send_all(ctx, out);
        match event {
            Some(ClientEvent::OpDone { outcome, .. }) if outcome.is_ok() => self.step(ctx, i),
            Some(ClientEvent::Voted { .. }) => self.step(ctx, i),
            Some(ClientEvent::Ended(decision)) => {
                let (txn, _, started) = &self.txns[i];
                ctx.record(TraceKind::CommitEnded {
                    tid: txn.tid(),
                    decision,
                    latency_us: ctx.now() - started,
                    delays: 2,
                    shards: txn.context().shard_ids.iter().copied().collect(),
                });
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: Timer) {
        if let Timer::Retransmit { tid } = timer {
            let Some(i) = self.txns.iter().position(|(t, _, _)| t.tid() == tid) else {
                return;
            };
            let out = self.txns[i]
                .0
                .retransmit(ctx.shards(), self.config.max_retransmits);
            if !out.is_empty() {
                ClientActor::send_all(ctx, out);
                ctx.set_timer(self.config.retransmit_interval, Timer::Retransmit { tid });
            }
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{ReplicaGroup, ShardMap};
    use crate::types::Value;

    fn map() -> ShardMap {
        ShardMap::from_groups([
            ReplicaGroup::new(ShardId(0), vec![NodeId(1), NodeId(2), NodeId(3)]),
            ReplicaGroup::new(ShardId(1), vec![NodeId(4), NodeId(5), NodeId(6)]),
            ReplicaGroup::new(ShardId(2), vec![NodeId(7), NodeId(8), NodeId(9)]),
        ])
    }

    /// Keys landing on shards 0, 1 and 2 respectively.
    fn keys(m: &ShardMap) -> [String; 3] {
        let mut found: [Option<String>; 3] = Default::default();
        for i in 0.. {
            let k = format!("k{i}");
            let s = m.shard_of(&k).0 as usize;
            if found[s].is_none() {
                found[s] = Some(k);
            }
            if found.iter().all(Option::is_some) {
                break;
            }
        }
        found.map(Option::unwrap)
    }

    fn write(key: &str) -> Op {
        Op::Write {
            key: key.into(),
            value: Value(b"v".to_vec()),
        }
    }

    fn reply(t: &mut ClientTxn, m: &ShardMap, seq: u32) {
        let msg = Message::OpReply {
            tid: t.tid(),
            seq,
            outcome: OpOutcome::Written,
        };
        t.on_message(m, NodeId(1), &msg);
    }

    #[test]
    fn begin_is_empty_and_executing() {
        let t = ClientTxn::begin(TxnId(5), AckPolicy::AnyQuorum);
        assert_eq!(t.status(), TxnPhase::Executing);
        assert!(t.context().shard_ids.is_empty());
    }

    #[test]
    fn growing_config_reaches_earlier_leaders() {
        let m = map();
        let [k0, k1, _] = keys(&m);
        let mut t = ClientTxn::begin(TxnId(5), AckPolicy::AnyQuorum);
        let (seq, out) = t.execute(&m, write(&k0)).unwrap();
        assert_eq!(out.len(), 1);
        reply(&mut t, &m, seq);
        let (_, out) = t.execute(&m, Op::Read { key: k1 }).unwrap();
        let both: BTreeSet<_> = [ShardId(0), ShardId(1)].into();
        assert!(out
            .iter()
            .any(|(n, msg)| *n == NodeId(1) && msg.config() == Some(&both)));
        assert!(out
            .iter()
            .any(|(n, msg)| *n == NodeId(4) && msg.config() == Some(&both)));
    }

    #[test]
    fn final_op_goes_to_its_shard_only() {
        let m = map();
        let [k0, k1, k2] = keys(&m);
        let mut t = ClientTxn::begin(TxnId(5), AckPolicy::AnyQuorum);
        for k in [&k0, &k2] {
            let (seq, _) = t.execute(&m, write(k)).unwrap();
            reply(&mut t, &m, seq);
        }
        let out = t.finish_execution(&m, Some(write(&k1))).unwrap();
        assert_eq!(out.len(), 3);
        for (_, msg) in &out {
            let Message::LastOp { shard, op, .. } = msg else {
                panic!("expected LastOp")
            };
            assert_eq!(op.is_some(), *shard == ShardId(1));
        }
    }

    #[test]
    fn commit_refused_after_a_no() {
        let m = map();
        let [k0, k1, _] = keys(&m);
        let mut t = ClientTxn::begin(TxnId(5), AckPolicy::AnyQuorum);
        let (seq, _) = t.execute(&m, write(&k0)).unwrap();
        reply(&mut t, &m, seq);
        t.finish_execution(&m, Some(write(&k1))).unwrap();
        let tid = t.tid();
        t.on_message(
            &m,
            NodeId(1),
            &Message::LastOpReply {
                tid,
                shard: ShardId(0),
                vote: Vote::Yes,
                result: None,
                stamp: None,
            },
        );
        let (ev, _) = t.on_message(
            &m,
            NodeId(4),
            &Message::LastOpReply {
                tid,
                shard: ShardId(1),
                vote: Vote::No,
                result: None,
                stamp: None,
            },
        );
        assert_eq!(ev, Some(ClientEvent::Voted { all_yes: false }));
        assert_eq!(t.commit(&m), Err(ClientError::NotAllYes));
        let out = t.abort(&m).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(t.grounds(), Some(Grounds::VotedNo));
    }

    #[test]
    fn any_quorum_reports_after_one_group() {
        let m = map();
        let [k0, k1, _] = keys(&m);
        let mut t = ClientTxn::begin(TxnId(5), AckPolicy::AnyQuorum);
        let (seq, _) = t.execute(&m, write(&k0)).unwrap();
        reply(&mut t, &m, seq);
        t.finish_execution(&m, Some(write(&k1))).unwrap();
        let tid = t.tid();
        for (n, s) in [(1, 0), (4, 1)] {
            t.on_message(
                &m,
                NodeId(n),
                &Message::LastOpReply {
                    tid,
                    shard: ShardId(s),
                    vote: Vote::Yes,
                    result: None,
                    stamp: None,
                },
            );
        }
        t.commit(&m).unwrap();
        let ack = Message::Phase2Ack {
            tid,
            ballot: Ballot::ZERO,
            decision: Decision::Commit,
        };
        assert_eq!(t.on_message(&m, NodeId(1), &ack).0, None);
        assert_eq!(t.on_message(&m, NodeId(4), &ack).0, None);
        let (ev, out) = t.on_message(&m, NodeId(2), &ack);
        assert_eq!(ev, Some(ClientEvent::Ended(Decision::Commit)));
        assert!(out.is_empty(), "a settled commit needs no chosen notice");
        assert_eq!(t.retransmit(&m, 5).len(), 3);
    }

    #[test]
    fn all_quorums_waits_for_every_group() {
        let m = map();
        let [k0, k1, _] = keys(&m);
        let mut t = ClientTxn::begin(TxnId(5), AckPolicy::AllQuorums);
        let (seq, _) = t.execute(&m, write(&k0)).unwrap();
        reply(&mut t, &m, seq);
        t.finish_execution(&m, Some(write(&k1))).unwrap();
        let tid = t.tid();
        for (n, s) in [(1, 0), (4, 1)] {
            t.on_message(
                &m,
                NodeId(n),
                &Message::LastOpReply {
                    tid,
                    shard: ShardId(s),
                    vote: Vote::Yes,
                    result: None,
                    stamp: None,
                },
            );
        }
        t.commit(&m).unwrap();
        let ack = Message::Phase2Ack {
            tid,
            ballot: Ballot::ZERO,
            decision: Decision::Commit,
        };
        for n in [1, 2, 4] {
            assert_eq!(t.on_message(&m, NodeId(n), &ack).0, None);
        }
        assert_eq!(
            t.on_message(&m, NodeId(5), &ack).0,
            Some(ClientEvent::Ended(Decision::Commit))
        );
    }

    #[test]
    fn abort_before_last_op_is_never_prepared() {
        let m = map();
        let [k0, ..] = keys(&m);
        let mut t = ClientTxn::begin(TxnId(5), AckPolicy::AnyQuorum);
        t.execute(&m, write(&k0)).unwrap();
        let out = t.abort(&m).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(t.grounds(), Some(Grounds::NeverPrepared));
        assert!(t.abort(&m).is_err());
    }

    #[test]
    fn empty_finish_votes_everywhere_without_op() {
        let m = map();
        let [k0, ..] = keys(&m);
        let mut t = ClientTxn::begin(TxnId(5), AckPolicy::AnyQuorum);
        let (seq, _) = t.execute(&m, write(&k0)).unwrap();
        reply(&mut t, &m, seq);
        let out = t.finish_execution(&m, None).unwrap();
        assert_eq!(out.len(), 1);
        assert!(matches!(
            &out[0].1,
            Message::LastOp {
                op: None,
                expected_ops: 1,
                ..
            }
        ));
    }
}
