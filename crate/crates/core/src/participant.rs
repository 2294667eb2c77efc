//! Participant replica: executes operations as shard leader, votes on the
//! last operation, replicates votes and context, acts as acceptor of the
//! per-transaction commit instance and recovers transactions whose client
//! went silent.
//!
//! The same process type also serves the 2PC and replicated-2PC baselines;
//! their handlers live in [`crate::baselines`].

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{LogCostModel, RcCoordinator, RcLogRecord};
use crate::sim::{Ctx, Process, Timer};
use crate::store::{Grant, LockMode, Store, StoreError};
use crate::topology::ShardMap;
use crate::trace::{Protocol, TraceKind};
use crate::types::{
    Ballot, Decision, Grounds, Isolation, Message, NodeId, Op, OpOutcome, ShardId, Stamp, Time,
    TxnContext, TxnId, Vote, WriteCmd,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicationMode {
    /// Writes reach a quorum of the group before the leader replies.
    Consistent,
    /// The leader replies at once; followers receive writes with the vote.
    #[default]
    Inconsistent,
}

/// Modeled time to install a transaction's writes at one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyCostModel {
    pub base: Time,
    pub per_write: Time,
}

impl ApplyCostModel {
    pub const ZERO: ApplyCostModel = ApplyCostModel {
        base: 0,
        per_write: 0,
    };

    pub fn cost(&self, writes: usize) -> Time {
        if writes == 0 {
            0
        } else {
            self.base + self.per_write * writes as Time
        }
    }
}

impl Default for ApplyCostModel {
    fn default() -> Self {
        Self {
            base: 0,
            per_write: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantConfig {
    pub protocol: Protocol,
    pub replication: ReplicationMode,
    /// Silence after which a replica considers the coordinator failed.
    pub recovery_timeout: Time,
    pub scan_period: Time,
    /// Upper bound of the random delay before a recovery round starts.
    pub recovery_backoff: Time,
    /// A recovery round that has not finished after this long is retried
    /// with a higher ballot.
    pub round_timeout: Time,
    /// Ballot bookkeeping of applied transactions is trimmed this long
    /// after apply.
    pub gc_after: Time,
    pub repair_delay_multiplier: u32,
    pub apply_cost: ApplyCostModel,
    pub log_cost: LogCostModel,
    pub record_count: u64,
    pub value_size: usize,
    pub data_seed: u64,
}

impl Default for ParticipantConfig {
    fn default() -> Self {
        let timeout = 15_000_000;
        Self {
            protocol: Protocol::HaCommit,
            replication: ReplicationMode::default(),
            recovery_timeout: timeout,
            scan_period: timeout / 3,
            recovery_backoff: timeout / 10,
            round_timeout: 20_000,
            gc_after: 10 * timeout,
            repair_delay_multiplier: 1,
            apply_cost: ApplyCostModel::default(),
            log_cost: LogCostModel::default(),
            record_count: 10_000,
            value_size: 10,
            data_seed: 0,
        }
    }
}

impl ParticipantConfig {
    pub fn with_timeout(mut self, timeout: Time) -> Self {
        self.recovery_timeout = timeout;
        self.scan_period = (timeout / 3).max(1);
        self.recovery_backoff = (timeout / 10).max(1);
        self.gc_after = 10 * timeout;
        self
    }

    fn isolation(&self) -> Isolation {
        self.protocol.isolation()
    }
}

/// Acceptor record of one transaction's commit instance at one replica.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptorState {
    pub tid: TxnId,
    pub promised: Ballot,
    pub accepted: Option<(Ballot, Decision)>,
    /// Replicated votes of the shards this node holds.
    pub votes: BTreeMap<ShardId, Vote>,
    pub context: Option<TxnContext>,
    pub applied: Option<Decision>,
}

impl AcceptorState {
    pub fn new(tid: TxnId) -> Self {
        Self {
            tid,
            promised: Ballot::ZERO,
            accepted: None,
            votes: BTreeMap::new(),
            context: None,
            applied: None,
        }
    }

    /// Whether this acceptor may still take part in producing a YES vote.
    fn open_for_yes(&self) -> bool {
        self.promised == Ballot::ZERO && self.accepted.is_none() && self.applied.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryTimer {
    pub tid: TxnId,
    pub last_contact: Time,
    pub timeout: Time,
}

impl RecoveryTimer {
    pub fn expired(&self, now: Time) -> bool {
        now.saturating_sub(self.last_contact) > self.timeout
    }
}

/// Extra check feeding the vote, beyond lock state.
pub type VoteCheck = Box<dyn Fn(TxnId, ShardId, &Store) -> bool>;

#[derive(Debug, Clone)]
pub(crate) struct VoteRound {
    pub(crate) vote: Vote,
    pub(crate) result: Option<OpOutcome>,
    pub(crate) acks: BTreeSet<NodeId>,
    pub(crate) client: NodeId,
    pub(crate) replied: bool,
    pub(crate) stamp: Option<Stamp>,
}

#[derive(Debug, Clone)]
struct WriteRound {
    acks: BTreeSet<NodeId>,
    client: NodeId,
    replied: bool,
}

type Phase1Info = (Option<(Ballot, Decision)>, BTreeMap<ShardId, Vote>);

#[derive(Debug, Clone)]
enum Stage {
    Prepare {
        replies: BTreeMap<NodeId, Phase1Info>,
    },
    Accept {
        decision: Decision,
        acks: BTreeSet<NodeId>,
    },
}

#[derive(Debug, Clone)]
struct Recovery {
    ballot: Ballot,
    stage: Stage,
}

#[derive(Debug, Clone)]
pub(crate) struct TxnEntry {
    pub(crate) acceptor: AcceptorState,
    pub(crate) last_contact: Time,
    pub(crate) applied_at: Time,
    pub(crate) client: Option<NodeId>,
    pub(crate) executed: BTreeMap<ShardId, u32>,
    pub(crate) vote_rounds: BTreeMap<ShardId, VoteRound>,
    write_rounds: BTreeMap<(ShardId, u32), WriteRound>,
    recovery: Option<Recovery>,
    recovery_scheduled: bool,
    failed_rounds: u32,
    max_round: u64,
    pub(crate) collected: bool,
    /// Baselines: prepare record logged at this replica.
    pub(crate) prepared: bool,
}

impl TxnEntry {
    fn new(tid: TxnId, now: Time) -> Self {
        Self {
            acceptor: AcceptorState::new(tid),
            last_contact: now,
            applied_at: 0,
            client: None,
            executed: BTreeMap::new(),
            vote_rounds: BTreeMap::new(),
            write_rounds: BTreeMap::new(),
            recovery: None,
            recovery_scheduled: false,
            failed_rounds: 0,
            max_round: 0,
            collected: false,
            prepared: false,
        }
    }

    pub(crate) fn context_mut(&mut self) -> &mut TxnContext {
        let tid = self.acceptor.tid;
        self.acceptor
            .context
            .get_or_insert_with(|| TxnContext::new(tid))
    }

    pub(crate) fn merge_context(&mut self, other: &TxnContext) {
        match &mut self.acceptor.context {
            Some(c) => c.merge(other),
            None => self.acceptor.context = Some(other.clone()),
        }
    }

    fn note_ballot(&mut self, b: Ballot) {
        self.max_round = self.max_round.max(b.round);
    }
}

pub struct Replica {
    id: NodeId,
    config: ParticipantConfig,
    pub(crate) stores: BTreeMap<ShardId, Store>,
    pub(crate) txns: BTreeMap<TxnId, TxnEntry>,
    learner: bool,
    vote_check: Option<VoteCheck>,
    pub(crate) rc_coord: BTreeMap<TxnId, RcCoordinator>,
    pub(crate) rc_log: BTreeMap<TxnId, RcLogRecord>,
    next_stamp: u64,
}

impl Replica {
    /// Creates a replica holding the shards `shards` assigns to `id`, each
    /// preloaded with its part of the initial records.
    pub fn new(id: NodeId, config: ParticipantConfig, shards: &ShardMap) -> Self {
        let mut stores = BTreeMap::new();
        for s in shards.shards_of(id) {
            let mut store = Store::new();
            let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed);
            store.load(config.record_count, config.value_size, &mut rng, |k| {
                shards.shard_of(k) == s
            });
            stores.insert(s, store);
        }
        Self {
            id,
            config,
            stores,
            txns: BTreeMap::new(),
            learner: false,
            vote_check: None,
            rc_coord: BTreeMap::new(),
            rc_log: BTreeMap::new(),
            next_stamp: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ParticipantConfig {
        &self.config
    }

    pub fn set_vote_check(&mut self, check: VoteCheck) {
        self.vote_check = Some(check);
    }

    pub fn store(&self, shard: ShardId) -> Option<&Store> {
        self.stores.get(&shard)
    }

    pub fn stores(&self) -> &BTreeMap<ShardId, Store> {
        &self.stores
    }

    pub fn acceptor(&self, tid: TxnId) -> Option<&AcceptorState> {
        self.txns.get(&tid).map(|e| &e.acceptor)
    }

    pub fn is_learner(&self) -> bool {
        self.learner
    }

    pub fn known_txns(&self) -> impl Iterator<Item = TxnId> + '_ {
        self.txns.keys().copied()
    }

    pub fn recovery_timer(&self, tid: TxnId) -> Option<RecoveryTimer> {
        self.txns.get(&tid).map(|e| RecoveryTimer {
            tid,
            last_contact: e.last_contact,
            timeout: self.repair_threshold(),
        })
    }

    fn repair_threshold(&self) -> Time {
        self.config.recovery_timeout * self.config.repair_delay_multiplier.max(1) as Time
    }

    /// Stamps a YES vote of `shard` for `tid` unless it already carries one.
    pub(crate) fn stamp_vote(&mut self, ctx: &Ctx<'_>, tid: TxnId, shard: ShardId) -> Stamp {
        let term = ctx.shards().group(shard).map_or(0, |g| g.term);
        self.next_stamp += 1;
        let fresh = (term, self.next_stamp);
        let now = ctx.now();
        *self
            .entry(tid, now)
            .context_mut()
            .stamps
            .entry(shard)
            .or_insert(fresh)
    }

    pub(crate) fn entry(&mut self, tid: TxnId, now: Time) -> &mut TxnEntry {
        self.txns
            .entry(tid)
            .or_insert_with(|| TxnEntry::new(tid, now))
    }

    /// Every locally known, unapplied transaction whose coordinator has been
    /// silent for longer than the timeout.
    pub fn detect_unended(&self, now: Time) -> Vec<TxnId> {
        let threshold = self.repair_threshold();
        self.txns
            .iter()
            .filter(|(_, e)| {
                e.acceptor.applied.is_none()
                    && e.acceptor
                        .context
                        .as_ref()
                        .is_some_and(|c| !c.shard_ids.is_empty())
                    && now.saturating_sub(e.last_contact) > threshold
            })
            .map(|(t, _)| *t)
            .collect()
    }

    // ---- execution --------------------------------------------------------

    /// Runs one operation at the leader of its shard.
    pub(crate) fn execute_op(
        &mut self,
        ctx: &mut Ctx<'_>,
        tid: TxnId,
        shard: ShardId,
        op: &Op,
    ) -> OpOutcome {
        let isolation = self.config.isolation();
        let Some(store) = self.stores.get_mut(&shard) else {
            return OpOutcome::Rejected;
        };
        let outcome = match op {
            Op::Read { key } => match store.read(tid, key, isolation) {
                Ok(r) => {
                    if matches!(r.grant, Some(Grant::Acquired | Grant::Upgraded)) {
                        ctx.record(TraceKind::LockGranted {
                            tid,
                            key: key.clone(),
                            mode: LockMode::Read,
                        });
                    }
                    ctx.record(TraceKind::Read {
                        tid,
                        key: key.clone(),
                        value: r.value.clone(),
                        writer: r.writer,
                        isolation,
                    });
                    OpOutcome::Read { value: r.value }
                }
                Err(StoreError::Conflict { .. }) => OpOutcome::Conflict,
                Err(_) => OpOutcome::Rejected,
            },
            Op::Write { key, value } => match store.acquire(tid, key, LockMode::Write) {
                Ok(grant) => {
                    if grant != Grant::AlreadyHeld {
                        ctx.record(TraceKind::LockGranted {
                            tid,
                            key: key.clone(),
                            mode: LockMode::Write,
                        });
                    }
                    store
                        .stage_write(tid, key, value.clone())
                        .expect("write lock held");
                    ctx.record(TraceKind::Staged {
                        tid,
                        key: key.clone(),
                    });
                    OpOutcome::Written
                }
                Err(_) => OpOutcome::Conflict,
            },
        };
        let now = ctx.now();
        let e = self.entry(tid, now);
        if outcome.is_ok() {
            *e.executed.entry(shard).or_default() += 1;
            if let Op::Write { key, value } = op {
                e.context_mut().record_write(shard, key, value.clone());
            }
        }
        outcome
    }

    fn on_exec_op(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        seq: u32,
        op: Op,
        config: BTreeSet<ShardId>,
    ) {
        let shard = ctx.shards().shard_of(op.key());
        let now = ctx.now();
        let leader = ctx.shards().is_leader(self.id, shard);
        let open = self
            .txns
            .get(&tid)
            .is_none_or(|e| e.acceptor.open_for_yes() && !e.prepared);
        if !leader || !open {
            ctx.send(
                from,
                Message::OpReply {
                    tid,
                    seq,
                    outcome: OpOutcome::Rejected,
                },
            );
            return;
        }
        let e = self.entry(tid, now);
        e.client = Some(from);
        e.last_contact = now;
        e.context_mut().shard_ids.extend(config.iter().copied());
        let outcome = self.execute_op(ctx, tid, shard, &op);
        let write = match (&op, self.config.replication) {
            (Op::Write { key, value }, ReplicationMode::Consistent) if outcome.is_ok() => {
                Some(WriteCmd {
                    key: key.clone(),
                    value: value.clone(),
                })
            }
            _ => None,
        };
        let Some(write) = write else {
            ctx.send(from, Message::OpReply { tid, seq, outcome });
            return;
        };
        let group = ctx.shards().group(shard).expect("leader's group").clone();
        let mut acks = BTreeSet::new();
        acks.insert(self.id);
        if group.has_quorum(&acks) {
            ctx.send(from, Message::OpReply { tid, seq, outcome });
            return;
        }
        for m in group.members.iter().filter(|m| **m != self.id) {
            ctx.send(
                *m,
                Message::ReplicateWrite {
                    tid,
                    shard,
                    seq,
                    write: write.clone(),
                    config: config.clone(),
                },
            );
        }
        self.entry(tid, now).write_rounds.insert(
            (shard, seq),
            WriteRound {
                acks,
                client: from,
                replied: false,
            },
        );
    }

    fn on_replicate_write_ack(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        shard: ShardId,
        seq: u32,
    ) {
        let Some(group) = ctx.shards().group(shard).cloned() else {
            return;
        };
        let Some(e) = self.txns.get_mut(&tid) else {
            return;
        };
        let Some(round) = e.write_rounds.get_mut(&(shard, seq)) else {
            return;
        };
        round.acks.insert(from);
        if !round.replied && group.has_quorum(&round.acks) {
            round.replied = true;
            ctx.send(
                round.client,
                Message::OpReply {
                    tid,
                    seq,
                    outcome: OpOutcome::Written,
                },
            );
        }
    }

    // ---- voting -----------------------------------------------------------

    /// Local vote of `shard` for `tid`: every executed operation accounted
    /// for, every write lock still held, no competing proposer seen.
    pub(crate) fn compute_vote(
        &self,
        tid: TxnId,
        shard: ShardId,
        expected_ops: u32,
        op_ok: bool,
    ) -> Vote {
        let Some(e) = self.txns.get(&tid) else {
            return if expected_ops == 0 && op_ok {
                Vote::Yes
            } else {
                Vote::No
            };
        };
        let Some(store) = self.stores.get(&shard) else {
            return Vote::No;
        };
        let executed = e.executed.get(&shard).copied().unwrap_or(0);
        let locks_held = e
            .acceptor
            .context
            .as_ref()
            .map(|c| {
                c.writes_for(shard)
                    .iter()
                    .all(|w| store.locks().holds(tid, &w.key, LockMode::Write))
            })
            .unwrap_or(true);
        let check = self
            .vote_check
            .as_ref()
            .is_none_or(|f| f(tid, shard, store));
        let ok = !self.learner
            && op_ok
            && executed == expected_ops
            && locks_held
            && check
            && e.acceptor.open_for_yes()
            && e.recovery.is_none();
        if ok {
            Vote::Yes
        } else {
            Vote::No
        }
    }

    fn on_last_op(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        shard: ShardId,
        op: Option<Op>,
        expected_ops: u32,
        context: TxnContext,
    ) {
        if !ctx.shards().is_leader(self.id, shard) {
            return;
        }
        let now = ctx.now();
        {
            let e = self.entry(tid, now);
            e.client = Some(from);
            e.last_contact = now;
            e.merge_context(&context);
        }
        let existing = self.txns[&tid].acceptor.votes.get(&shard).copied();
        let (vote, result) = match existing {
            Some(v) => (v, None),
            None => {
                let result = match &op {
                    Some(op) if self.txns[&tid].acceptor.open_for_yes() => {
                        Some(self.execute_op(ctx, tid, shard, op))
                    }
                    Some(_) => Some(OpOutcome::Rejected),
                    None => None,
                };
                let op_ok = result.as_ref().is_none_or(OpOutcome::is_ok);
                let vote = self.compute_vote(tid, shard, expected_ops, op_ok);
                self.entry(tid, now).acceptor.votes.insert(shard, vote);
                if vote == Vote::Yes {
                    self.stamp_vote(ctx, tid, shard);
                }
                ctx.record(TraceKind::VoteRecorded { tid, shard, vote });
                (vote, result)
            }
        };
        let group = ctx.shards().group(shard).expect("leader's group").clone();
        let me = self.id;
        let e = self.entry(tid, now);
        let context = e.acceptor.context.clone().expect("context merged above");
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
                Message::VoteReplicate {
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
                Message::LastOpReply {
                    tid,
                    shard,
                    vote,
                    result: result.clone(),
                    stamp,
                },
            );
        }
        e.vote_rounds.insert(
            shard,
            VoteRound {
                vote,
                result,
                acks,
                client: from,
                replied,
                stamp,
            },
        );
    }

    fn on_vote_replicate(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        shard: ShardId,
        vote: Vote,
        context: TxnContext,
    ) {
        let now = ctx.now();
        let e = self.entry(tid, now);
        match e.acceptor.votes.get(&shard) {
            Some(v) if *v != vote => return,
            Some(_) => {}
            None => {
                if vote == Vote::Yes && !e.acceptor.open_for_yes() {
                    return;
                }
                e.acceptor.votes.insert(shard, vote);
                ctx.record(TraceKind::VoteRecorded { tid, shard, vote });
            }
        }
        let e = self.entry(tid, now);
        e.merge_context(&context);
        e.last_contact = now;
        ctx.send(from, Message::VoteReplicateAck { tid, shard });
    }

    fn on_vote_replicate_ack(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        shard: ShardId,
    ) {
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
            let reply = Message::LastOpReply {
                tid,
                shard,
                vote: round.vote,
                result: round.result.clone(),
                stamp: round.stamp,
            };
            ctx.send(round.client, reply);
        }
    }

    // ---- commit instance --------------------------------------------------

    /// Installs `decision` at every local shard of the transaction. Returns
    /// the modeled apply cost.
    pub(crate) fn apply(&mut self, ctx: &mut Ctx<'_>, tid: TxnId, decision: Decision) -> Time {
        let now = ctx.now();
        let e = self.entry(tid, now);
        if let Some(done) = e.acceptor.applied {
            if done != decision {
                ctx.record(TraceKind::Applied {
                    tid,
                    decision,
                    shards: Vec::new(),
                    writes: Vec::new(),
                });
            }
            return 0;
        }
        e.acceptor.applied = Some(decision);
        e.applied_at = now;
        e.recovery = None;
        let context = e
            .acceptor
            .context
            .clone()
            .unwrap_or_else(|| TxnContext::new(tid));
        let mut written = Vec::new();
        let mut released = Vec::new();
        for (shard, store) in self.stores.iter_mut() {
            let writes = if context.shard_ids.contains(shard) {
                context.writes_for(*shard)
            } else {
                &[]
            };
            let stamp = context.stamps.get(shard).copied();
            if let Ok(out) = store.apply_decision(tid, decision, writes, stamp) {
                written.extend(out.written);
                released.extend(out.released);
            }
        }
        if !released.is_empty() {
            ctx.record(TraceKind::LocksReleased {
                tid,
                keys: released,
            });
        }
        let cost = self.config.apply_cost.cost(written.len());
        ctx.record(TraceKind::Applied {
            tid,
            decision,
            shards: context.shard_ids.iter().copied().collect(),
            writes: written,
        });
        cost
    }

    #[allow(clippy::too_many_arguments)]
    fn on_phase2(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        ballot: Ballot,
        decision: Decision,
        grounds: Grounds,
        context: TxnContext,
    ) {
        let now = ctx.now();
        let e = self.entry(tid, now);
        e.note_ballot(ballot);
        if ballot < e.acceptor.promised {
            let promised = e.acceptor.promised;
            ctx.send(from, Message::Phase2Nack { tid, promised });
            return;
        }
        e.acceptor.promised = ballot;
        e.acceptor.accepted = Some((ballot, decision));
        e.merge_context(&context);
        e.last_contact = now;
        ctx.record(TraceKind::Accepted {
            tid,
            ballot,
            decision,
        });
        let cost = if grounds.settles(ballot, decision) {
            self.apply(ctx, tid, decision)
        } else {
            0
        };
        ctx.record(TraceKind::AckSent {
            tid,
            ballot,
            decision,
        });
        ctx.send_after(
            cost,
            from,
            Message::Phase2Ack {
                tid,
                ballot,
                decision,
            },
        );
    }

    fn on_chosen(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        ballot: Ballot,
        decision: Decision,
        context: TxnContext,
    ) {
        let now = ctx.now();
        let e = self.entry(tid, now);
        e.note_ballot(ballot);
        e.merge_context(&context);
        e.last_contact = now;
        if e.acceptor.accepted.is_none_or(|(b, _)| b < ballot) {
            e.acceptor.accepted = Some((ballot, decision));
        }
        self.apply(ctx, tid, decision);
        ctx.send(from, Message::DecisionApplied { tid });
    }

    fn on_phase1(&mut self, ctx: &mut Ctx<'_>, from: NodeId, tid: TxnId, ballot: Ballot) {
        let now = ctx.now();
        let e = self.entry(tid, now);
        e.note_ballot(ballot);
        if ballot <= e.acceptor.promised {
            let promised = e.acceptor.promised;
            ctx.send(from, Message::Phase1Nack { tid, promised });
            return;
        }
        e.acceptor.promised = ballot;
        e.last_contact = now;
        let reply = Message::Phase1Reply {
            tid,
            ballot,
            accepted: e.acceptor.accepted,
            votes: e.acceptor.votes.clone(),
            context: e.acceptor.context.clone(),
        };
        ctx.record(TraceKind::Promised { tid, ballot });
        ctx.send(from, reply);
    }

    // ---- recovery ---------------------------------------------------------

    fn scan(&mut self, ctx: &mut Ctx<'_>) {
        let now = ctx.now();
        match self.config.protocol {
            Protocol::HaCommit | Protocol::HaCommitRc => {
                for tid in self.detect_unended(now) {
                    let e = self.txns.get_mut(&tid).expect("detected");
                    if e.recovery_scheduled || e.recovery.is_some() {
                        continue;
                    }
                    e.recovery_scheduled = true;
                    let delay = ctx.rng().gen_range(0..=self.config.recovery_backoff);
                    ctx.set_timer(delay, Timer::StartRecovery { tid });
                }
            }
            Protocol::TwoPc | Protocol::RCommit => self.baseline_scan(ctx),
        }
        let horizon = self.config.gc_after;
        for e in self.txns.values_mut() {
            if e.acceptor.applied.is_some()
                && !e.collected
                && now.saturating_sub(e.applied_at) > horizon
            {
                e.collected = true;
                e.acceptor.context = None;
                e.acceptor.votes.clear();
                e.vote_rounds.clear();
                e.write_rounds.clear();
                e.executed.clear();
            }
        }
        ctx.set_timer(self.config.scan_period, Timer::Scan);
    }

    /// Starts a fresh round for `tid` if it is still unapplied and its
    /// coordinator is still silent.
    pub(crate) fn run_recovery(&mut self, ctx: &mut Ctx<'_>, tid: TxnId) {
        let now = ctx.now();
        let threshold = self.repair_threshold();
        let id = self.id;
        let Some(e) = self.txns.get_mut(&tid) else {
            return;
        };
        e.recovery_scheduled = false;
        if e.acceptor.applied.is_some() || now.saturating_sub(e.last_contact) <= threshold {
            return;
        }
        let Some(context) = e.acceptor.context.clone() else {
            return;
        };
        let ballot = Ballot::new(e.max_round + 1, id);
        e.max_round = ballot.round;
        e.recovery = Some(Recovery {
            ballot,
            stage: Stage::Prepare {
                replies: BTreeMap::new(),
            },
        });
        ctx.record(TraceKind::RecoveryStarted { tid, ballot });
        for n in ctx.shards().replicas_of(&context.shard_ids) {
            ctx.send(n, Message::Phase1 { tid, ballot });
        }
        ctx.set_timer(
            self.config.round_timeout,
            Timer::RoundTimeout { tid, ballot },
        );
    }

    /// Drops the current round and tries again after a random back-off.
    fn back_off(&mut self, ctx: &mut Ctx<'_>, tid: TxnId) {
        let threshold = self.repair_threshold();
        let Some(e) = self.txns.get_mut(&tid) else {
            return;
        };
        e.recovery = None;
        if e.acceptor.applied.is_some() || e.recovery_scheduled {
            return;
        }
        e.recovery_scheduled = true;
        // the retry must still see the coordinator as silent
        e.last_contact = e.last_contact.min(ctx.now().saturating_sub(threshold + 1));
        // doubles per failed round, up to the coordinator timeout
        let ceiling = self
            .config
            .recovery_timeout
            .max(self.config.round_timeout)
            .max(1);
        let window = self
            .config
            .round_timeout
            .max(1)
            .saturating_mul(1 << e.failed_rounds.min(30))
            .min(ceiling);
        e.failed_rounds += 1;
        let delay = ctx.rng().gen_range(1..=window);
        ctx.set_timer(delay, Timer::StartRecovery { tid });
    }

    fn current_ballot(&self, tid: TxnId) -> Option<Ballot> {
        self.txns.get(&tid)?.recovery.as_ref().map(|r| r.ballot)
    }

    fn on_phase1_reply(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        ballot: Ballot,
        accepted: Option<(Ballot, Decision)>,
        votes: BTreeMap<ShardId, Vote>,
        context: Option<TxnContext>,
    ) {
        if self.current_ballot(tid) != Some(ballot) {
            return;
        }
        let e = self.txns.get_mut(&tid).expect("round exists");
        let before = e
            .acceptor
            .context
            .as_ref()
            .map(|c| c.shard_ids.clone())
            .unwrap_or_default();
        if let Some(c) = &context {
            e.merge_context(c);
        }
        let shards = e
            .acceptor
            .context
            .as_ref()
            .map(|c| c.shard_ids.clone())
            .unwrap_or_default();
        if shards != before {
            // the configuration grew: the old round's quorums prove nothing
            // about the new groups
            e.recovery = None;
            e.last_contact = 0;
            self.run_recovery(ctx, tid);
            return;
        }
        let Some(Recovery {
            stage: Stage::Prepare { replies },
            ..
        }) = &mut e.recovery
        else {
            return;
        };
        replies.insert(from, (accepted, votes));
        let map = ctx.shards();
        let complete = shards
            .iter()
            .all(|s| map.group(*s).is_some_and(|g| g.has_quorum(replies.keys())));
        if !complete {
            return;
        }
        let decision = choose_value(&shards, replies.values());
        let seen: BTreeMap<ShardId, Vote> = replies
            .values()
            .flat_map(|(_, v)| v.iter().map(|(s, v)| (*s, *v)))
            .collect();
        let context = e.acceptor.context.clone().expect("context present");
        e.recovery = Some(Recovery {
            ballot,
            stage: Stage::Accept {
                decision,
                acks: BTreeSet::new(),
            },
        });
        ctx.record(TraceKind::Proposed {
            tid,
            decision,
            grounds: Grounds::Unconfirmed,
            shards: shards.iter().copied().collect(),
            votes: seen,
        });
        for n in ctx.shards().replicas_of(&shards) {
            ctx.send(
                n,
                Message::Phase2 {
                    tid,
                    ballot,
                    decision,
                    grounds: Grounds::Unconfirmed,
                    context: context.clone(),
                },
            );
        }
    }

    fn on_phase2_ack(
        &mut self,
        ctx: &mut Ctx<'_>,
        from: NodeId,
        tid: TxnId,
        ballot: Ballot,
        decision: Decision,
    ) {
        if self.current_ballot(tid) != Some(ballot) {
            return;
        }
        let e = self.txns.get_mut(&tid).expect("round exists");
        let Some(Recovery {
            stage: Stage::Accept { decision: d, acks },
            ..
        }) = &mut e.recovery
        else {
            return;
        };
        if *d != decision {
            return;
        }
        acks.insert(from);
        let context = e.acceptor.context.clone().expect("context present");
        let map = ctx.shards();
        let done = context
            .shard_ids
            .iter()
            .all(|s| map.group(*s).is_some_and(|g| g.has_quorum(acks.iter())));
        if !done {
            return;
        }
        e.recovery = None;
        if e.acceptor.accepted.is_none_or(|(b, _)| b < ballot) {
            e.acceptor.accepted = Some((ballot, decision));
        }
        ctx.record(TraceKind::RecoveryDecided {
            tid,
            ballot,
            decision,
        });
        self.apply(ctx, tid, decision);
        for n in ctx.shards().replicas_of(&context.shard_ids) {
            if n != self.id {
                ctx.send(
                    n,
                    Message::Chosen {
                        tid,
                        ballot,
                        decision,
                        context: context.clone(),
                    },
                );
            }
        }
    }

    fn on_nack(&mut self, ctx: &mut Ctx<'_>, tid: TxnId, promised: Ballot) {
        let Some(ballot) = self.current_ballot(tid) else {
            return;
        };
        if promised <= ballot {
            return;
        }
        let e = self.txns.get_mut(&tid).expect("round exists");
        e.note_ballot(promised);
        self.back_off(ctx, tid);
    }

    /// New leader of `shard`: re-installs write locks of transactions that
    /// voted YES here and are still undecided.
    fn on_promote(&mut self, ctx: &mut Ctx<'_>, shard: ShardId) {
        let Some(store) = self.stores.get_mut(&shard) else {
            return;
        };
        for (tid, e) in &self.txns {
            if e.acceptor.applied.is_some() || e.acceptor.votes.get(&shard) != Some(&Vote::Yes) {
                continue;
            }
            let Some(c) = &e.acceptor.context else {
                continue;
            };
            for w in c.writes_for(shard) {
                if let Ok(g) = store.acquire(*tid, &w.key, LockMode::Write) {
                    if g != Grant::AlreadyHeld {
                        ctx.record(TraceKind::LockGranted {
                            tid: *tid,
                            key: w.key.clone(),
                            mode: LockMode::Write,
                        });
                    }
                    store
                        .stage_write(*tid, &w.key, w.value.clone())
                        .expect("lock just taken");
                }
            }
        }
    }
}

/// Recovery proposal from a quorum of phase-1 replies per group: the value
/// accepted at the highest ballot if any; otherwise COMMIT only when every
/// shard's YES vote is visible and no NO vote is.
pub fn choose_value<'a>(
    shards: &BTreeSet<ShardId>,
    replies: impl IntoIterator<Item = &'a Phase1Info>,
) -> Decision {
    let mut best: Option<(Ballot, Decision)> = None;
    let mut yes = BTreeSet::new();
    let mut no = false;
    for (accepted, votes) in replies {
        if let Some(a) = accepted {
            if best.is_none_or(|b| a.0 > b.0) {
                best = Some(*a);
            }
        }
        for (s, v) in votes {
            match v {
                Vote::Yes => {
                    yes.insert(*s);
                }
                Vote::No => no = true,
            }
        }
    }
    match best {
        Some((_, d)) => d,
        None if !no && shards.iter().all(|s| yes.contains(s)) => Decision::Commit,
        None => Decision::Abort,
    }
}

impl Process for Replica {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let jitter = ctx.rng().gen_range(0..=self.config.scan_period / 4);
        ctx.set_timer(self.config.scan_period + jitter, Timer::Scan);
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
        if self.learner {
            return;
        }
        match msg {
            Message::ExecOp {
                tid,
                seq,
                op,
                config,
            } => self.on_exec_op(ctx, from, tid, seq, op, config),
            Message::ConfigUpdate { tid, config } => {
                let now = ctx.now();
                let e = self.entry(tid, now);
                e.context_mut().shard_ids.extend(config);
                e.last_contact = now;
            }
            Message::ReplicateWrite {
                tid,
                shard,
                seq,
                write,
                config,
            } => {
                let now = ctx.now();
                let e = self.entry(tid, now);
                e.last_contact = now;
                let c = e.context_mut();
                c.shard_ids.extend(config);
                c.record_write(shard, &write.key, write.value);
                ctx.send(from, Message::ReplicateWriteAck { tid, shard, seq });
            }
            Message::ReplicateWriteAck { tid, shard, seq } => {
                self.on_replicate_write_ack(ctx, from, tid, shard, seq)
            }
            Message::LastOp {
                tid,
                shard,
                op,
                expected_ops,
                context,
            } => self.on_last_op(ctx, from, tid, shard, op, expected_ops, context),
            Message::VoteReplicate {
                tid,
                shard,
                vote,
                context,
            } => self.on_vote_replicate(ctx, from, tid, shard, vote, context),
            Message::VoteReplicateAck { tid, shard } => {
                self.on_vote_replicate_ack(ctx, from, tid, shard)
            }
            Message::Phase2 {
                tid,
                ballot,
                decision,
                grounds,
                context,
            } => self.on_phase2(ctx, from, tid, ballot, decision, grounds, context),
            Message::Phase2Ack {
                tid,
                ballot,
                decision,
            } => self.on_phase2_ack(ctx, from, tid, ballot, decision),
            Message::Phase2Nack { tid, promised } | Message::Phase1Nack { tid, promised } => {
                self.on_nack(ctx, tid, promised)
            }
            Message::Phase1 { tid, ballot } => self.on_phase1(ctx, from, tid, ballot),
            Message::Phase1Reply {
                tid,
                ballot,
                accepted,
                votes,
                context,
            } => self.on_phase1_reply(ctx, from, tid, ballot, accepted, votes, context),
            Message::Chosen {
                tid,
                ballot,
                decision,
                context,
            } => self.on_chosen(ctx, from, tid, ballot, decision, context),
            other => self.on_baseline_message(ctx, from, other),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: Timer) {
        if self.learner {
            return;
        }
        match timer {
            Timer::Scan => self.scan(ctx),
            Timer::StartRecovery { tid } => self.run_recovery(ctx, tid),
            Timer::RoundTimeout { tid, ballot } if self.current_ballot(tid) == Some(ballot) => {
                self.back_off(ctx, tid)
            }
            _ => {}
        }
    }

    fn on_promoted(&mut self, ctx: &mut Ctx<'_>, shard: ShardId) {
        if !self.learner {
            self.on_promote(ctx, shard);
            self.rc_on_promote(ctx, shard);
        }
    }

    fn on_restart(&mut self, _ctx: &mut Ctx<'_>) {
        self.learner = true;
        self.txns.clear();
        self.rc_coord.clear();
        self.rc_log.clear();
        for s in self.stores.values_mut() {
            *s = Store::new();
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
