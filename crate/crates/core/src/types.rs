//! Identifiers, ballots, transaction context and the wire message set shared
//! by every protocol in the crate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Maps with integer-like keys as `[key, value]` lists, so they survive the
/// buffering done for internally tagged enums.
pub(crate) mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(
        m: &BTreeMap<K, V>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// Logical simulation time in microseconds.
pub type Time = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    /// Proposer identity carried by the transaction client's initial ballot.
    pub const CLIENT: NodeId = NodeId(0);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShardId(pub u32);

impl fmt::Display for ShardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// 128-bit transaction identifier.
///
/// Layout: the top 32 bits hold the issuing client, the next 32 bits a
/// per-client sequence number and the low 64 bits are drawn from the
/// client's random stream. The (client, sequence) prefix makes identifiers
/// unique within a run by construction.
/// Serialized as its 32-digit hex form.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxnId(pub u128);

impl TxnId {
    /// Writer recorded for values present in the initial load.
    pub const GENESIS: TxnId = TxnId(0);

    pub fn client(self) -> NodeId {
        NodeId((self.0 >> 96) as u32)
    }

    pub fn sequence(self) -> u32 {
        (self.0 >> 64) as u32
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl std::str::FromStr for TxnId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u128::from_str_radix(s, 16).map(TxnId)
    }
}

impl Serialize for TxnId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TxnId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Deterministic per-client source of fresh [`TxnId`]s.
#[derive(Debug, Clone)]
pub struct TxnIdGenerator {
    client: NodeId,
    next_seq: u32,
}

impl TxnIdGenerator {
    pub fn new(client: NodeId) -> Self {
        Self {
            client,
            next_seq: 1,
        }
    }

    pub fn fresh(&mut self, rng: &mut impl RngCore) -> TxnId {
        let seq = self.next_seq;
        self.next_seq = self
            .next_seq
            .checked_add(1)
            .expect("txn sequence exhausted");
        fresh_txn_id(self.client, seq, rng)
    }
}

/// Builds a transaction id salted with the client identity and sequence.
pub fn fresh_txn_id(client: NodeId, seq: u32, rng: &mut impl RngCore) -> TxnId {
    let random = rng.next_u64() as u128;
    TxnId(((client.0 as u128) << 96) | ((seq as u128) << 64) | random)
}

/// Paxos round identifier, ordered by round and then by proposer.
///
/// Round 0 belongs to the transaction client; recovery proposers always use
/// rounds of at least 1 tagged with their own node id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Ballot {
    pub round: u64,
    pub proposer: NodeId,
}

impl Ballot {
    pub const ZERO: Ballot = Ballot {
        round: 0,
        proposer: NodeId::CLIENT,
    };

    pub fn new(round: u64, proposer: NodeId) -> Self {
        Self { round, proposer }
    }

    pub fn is_client(self) -> bool {
        self == Ballot::ZERO
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.round, self.proposer)
    }
}

pub fn ballot_compare(a: Ballot, b: Ballot) -> std::cmp::Ordering {
    a.cmp(&b)
}

/// Opaque record value. Serialized as a hex string.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Value(pub Vec<u8>);

impl Value {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value(s.as_bytes().to_vec())
    }
}

impl From<Vec<u8>> for Value {
    fn from(v: Vec<u8>) -> Self {
        Value(v)
    }
}

impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut out = String::with_capacity(self.0.len() * 2);
        for b in &self.0 {
            out.push_str(&format!("{b:02x}"));
        }
        s.serialize_str(&out)
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() % 2 != 0 {
            return Err(serde::de::Error::custom("odd-length hex value"));
        }
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16))
            .collect::<Result<Vec<_>, _>>()
            .map(Value)
            .map_err(serde::de::Error::custom)
    }
}

pub type Key = String;

/// Full-value assignment `key := value`; replaying it is idempotent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteCmd {
    pub key: Key,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    Read { key: Key },
    Write { key: Key, value: Value },
}

impl Op {
    pub fn key(&self) -> &str {
        match self {
            Op::Read { key } | Op::Write { key, .. } => key,
        }
    }

    pub fn is_write(&self) -> bool {
        matches!(self, Op::Write { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Commit,
    Abort,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Commit => "COMMIT",
            Decision::Abort => "ABORT",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Isolation {
    #[default]
    Serializable,
    ReadCommitted,
}

/// Commit-order stamp a shard leader assigns when it votes YES: its term
/// and a local counter. Conflicting transactions on a shard get increasing
/// stamps, so replicas can install late decisions without overwriting newer
/// values.
pub type Stamp = (u64, u64);

/// Per-transaction metadata replicated along with votes: the commit
/// instance's configuration (shard ids) and the writes each shard must apply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnContext {
    pub tid: TxnId,
    pub shard_ids: BTreeSet<ShardId>,
    #[serde(with = "pairs")]
    pub relevant_writes: BTreeMap<ShardId, Vec<WriteCmd>>,
    #[serde(with = "pairs", default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stamps: BTreeMap<ShardId, Stamp>,
    pub last_contact: Time,
}

impl TxnContext {
    pub fn new(tid: TxnId) -> Self {
        Self {
            tid,
            shard_ids: BTreeSet::new(),
            relevant_writes: BTreeMap::new(),
            stamps: BTreeMap::new(),
            last_contact: 0,
        }
    }

    /// Records a write for `shard`, replacing an earlier write to the same key.
    pub fn record_write(&mut self, shard: ShardId, key: &str, value: Value) {
        let writes = self.relevant_writes.entry(shard).or_default();
        match writes.iter_mut().find(|w| w.key == key) {
            Some(w) => w.value = value,
            None => writes.push(WriteCmd {
                key: key.to_string(),
                value,
            }),
        }
    }

    pub fn writes_for(&self, shard: ShardId) -> &[WriteCmd] {
        self.relevant_writes
            .get(&shard)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn write_count(&self) -> usize {
        self.relevant_writes.values().map(Vec::len).sum()
    }

    /// Folds another copy of the same transaction's context into this one.
    /// Shard sets only grow; a shard's writes are taken from whichever copy
    /// knows more of them.
    pub fn merge(&mut self, other: &TxnContext) {
        debug_assert_eq!(self.tid, other.tid);
        self.shard_ids.extend(other.shard_ids.iter().copied());
        for (shard, writes) in &other.relevant_writes {
            let mine = self.relevant_writes.entry(*shard).or_default();
            if writes.len() > mine.len() {
                *mine = writes.clone();
            }
        }
        for (shard, stamp) in &other.stamps {
            let mine = self.stamps.entry(*shard).or_insert(*stamp);
            *mine = (*mine).max(*stamp);
        }
        self.last_contact = self.last_contact.max(other.last_contact);
    }
}

/// Why the client believes its ballot-zero proposal can never be overturned
/// by a recovery proposer. Replicas apply a ballot-zero decision on receipt
/// only when the grounds make it final; otherwise they wait until the
/// decision is learned as chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grounds {
    /// Every shard voted YES and the proposal is COMMIT.
    AllYes,
    /// Some shard's replicated vote is NO.
    VotedNo,
    /// The last operation was never sent, so no vote exists anywhere.
    NeverPrepared,
    /// An abort issued while some votes may still be YES (timeouts,
    /// application choice), or any proposal at a recovery ballot.
    Unconfirmed,
}

impl Grounds {
    pub fn settles(self, ballot: Ballot, decision: Decision) -> bool {
        ballot.is_client()
            && match decision {
                Decision::Commit => self == Grounds::AllYes,
                Decision::Abort => matches!(self, Grounds::VotedNo | Grounds::NeverPrepared),
            }
    }
}

/// Result of executing one operation at a shard leader.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OpOutcome {
    Read {
        value: Option<Value>,
    },
    Written,
    Conflict,
    /// The leader will not run the operation (unknown shard, transaction
    /// already being decided).
    Rejected,
}

impl OpOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, OpOutcome::Read { .. } | OpOutcome::Written)
    }
}

/// Every message exchanged by clients, participants and baseline
/// coordinators. All variants carry the transaction id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    // execution phase
    ExecOp {
        tid: TxnId,
        seq: u32,
        op: Op,
        config: BTreeSet<ShardId>,
    },
    ConfigUpdate {
        tid: TxnId,
        config: BTreeSet<ShardId>,
    },
    OpReply {
        tid: TxnId,
        seq: u32,
        outcome: OpOutcome,
    },
    ReplicateWrite {
        tid: TxnId,
        shard: ShardId,
        seq: u32,
        write: WriteCmd,
        config: BTreeSet<ShardId>,
    },
    ReplicateWriteAck {
        tid: TxnId,
        shard: ShardId,
        seq: u32,
    },

    // last operation and voting
    LastOp {
        tid: TxnId,
        shard: ShardId,
        op: Option<Op>,
        expected_ops: u32,
        context: TxnContext,
    },
    VoteReplicate {
        tid: TxnId,
        shard: ShardId,
        vote: Vote,
        context: TxnContext,
    },
    VoteReplicateAck {
        tid: TxnId,
        shard: ShardId,
    },
    LastOpReply {
        tid: TxnId,
        shard: ShardId,
        vote: Vote,
        result: Option<OpOutcome>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stamp: Option<Stamp>,
    },

    // commit instance
    Phase2 {
        tid: TxnId,
        ballot: Ballot,
        decision: Decision,
        grounds: Grounds,
        context: TxnContext,
    },
    Phase2Ack {
        tid: TxnId,
        ballot: Ballot,
        decision: Decision,
    },
    Phase2Nack {
        tid: TxnId,
        promised: Ballot,
    },
    Phase1 {
        tid: TxnId,
        ballot: Ballot,
    },
    Phase1Reply {
        tid: TxnId,
        ballot: Ballot,
        accepted: Option<(Ballot, Decision)>,
        #[serde(with = "pairs")]
        votes: BTreeMap<ShardId, Vote>,
        context: Option<TxnContext>,
    },
    Phase1Nack {
        tid: TxnId,
        promised: Ballot,
    },
    Chosen {
        tid: TxnId,
        ballot: Ballot,
        decision: Decision,
        context: TxnContext,
    },
    DecisionApplied {
        tid: TxnId,
    },

    // two-phase commit baseline
    TpcPrepare {
        tid: TxnId,
        shard: ShardId,
        writes: Vec<WriteCmd>,
        expected_ops: u32,
    },
    TpcVote {
        tid: TxnId,
        shard: ShardId,
        vote: Vote,
    },
    TpcDecision {
        tid: TxnId,
        decision: Decision,
    },
    TpcAck {
        tid: TxnId,
        shard: ShardId,
    },

    // replicated two-phase commit baseline
    RcCommitRequest {
        tid: TxnId,
        context: TxnContext,
        #[serde(with = "pairs")]
        expected_ops: BTreeMap<ShardId, u32>,
    },
    RcPrepare {
        tid: TxnId,
        shard: ShardId,
        expected_ops: u32,
        context: TxnContext,
    },
    RcReplicatePrepare {
        tid: TxnId,
        shard: ShardId,
        vote: Vote,
        context: TxnContext,
    },
    RcReplicatePrepareAck {
        tid: TxnId,
        shard: ShardId,
    },
    RcVote {
        tid: TxnId,
        shard: ShardId,
        vote: Vote,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stamp: Option<Stamp>,
    },
    RcLogDecision {
        tid: TxnId,
        term: u64,
        decision: Decision,
        context: TxnContext,
    },
    RcLogDecisionAck {
        tid: TxnId,
        term: u64,
    },
    RcDecision {
        tid: TxnId,
        decision: Decision,
        context: TxnContext,
    },
    RcDecisionAck {
        tid: TxnId,
    },
    RcOutcome {
        tid: TxnId,
        decision: Decision,
    },
    RcInquiry {
        tid: TxnId,
        context: TxnContext,
    },
    RcQuery {
        tid: TxnId,
        term: u64,
    },
    RcQueryReply {
        tid: TxnId,
        term: u64,
        record: Option<(u64, Decision)>,
        context: Option<TxnContext>,
    },
}

impl Message {
    pub fn tid(&self) -> TxnId {
        use Message::*;
        match self {
            ExecOp { tid, .. }
            | ConfigUpdate { tid, .. }
            | OpReply { tid, .. }
            | ReplicateWrite { tid, .. }
            | ReplicateWriteAck { tid, .. }
            | LastOp { tid, .. }
            | VoteReplicate { tid, .. }
            | VoteReplicateAck { tid, .. }
            | LastOpReply { tid, .. }
            | Phase2 { tid, .. }
            | Phase2Ack { tid, .. }
            | Phase2Nack { tid, .. }
            | Phase1 { tid, .. }
            | Phase1Reply { tid, .. }
            | Phase1Nack { tid, .. }
            | Chosen { tid, .. }
            | DecisionApplied { tid }
            | TpcPrepare { tid, .. }
            | TpcVote { tid, .. }
            | TpcDecision { tid, .. }
            | TpcAck { tid, .. }
            | RcCommitRequest { tid, .. }
            | RcPrepare { tid, .. }
            | RcReplicatePrepare { tid, .. }
            | RcReplicatePrepareAck { tid, .. }
            | RcVote { tid, .. }
            | RcLogDecision { tid, .. }
            | RcLogDecisionAck { tid, .. }
            | RcDecision { tid, .. }
            | RcDecisionAck { tid }
            | RcOutcome { tid, .. }
            | RcInquiry { tid, .. }
            | RcQuery { tid, .. }
            | RcQueryReply { tid, .. } => *tid,
        }
    }

    pub fn kind(&self) -> &'static str {
        use Message::*;
        match self {
            ExecOp { .. } => "exec_op",
            ConfigUpdate { .. } => "config_update",
            OpReply { .. } => "op_reply",
            ReplicateWrite { .. } => "replicate_write",
            ReplicateWriteAck { .. } => "replicate_write_ack",
            LastOp { .. } => "last_op",
            VoteReplicate { .. } => "vote_replicate",
            VoteReplicateAck { .. } => "vote_replicate_ack",
            LastOpReply { .. } => "last_op_reply",
            Phase2 { .. } => "phase2",
            Phase2Ack { .. } => "phase2_ack",
            Phase2Nack { .. } => "phase2_nack",
            Phase1 { .. } => "phase1",
            Phase1Reply { .. } => "phase1_reply",
            Phase1Nack { .. } => "phase1_nack",
            Chosen { .. } => "chosen",
            DecisionApplied { .. } => "decision_applied",
            TpcPrepare { .. } => "tpc_prepare",
            TpcVote { .. } => "tpc_vote",
            TpcDecision { .. } => "tpc_decision",
            TpcAck { .. } => "tpc_ack",
            RcCommitRequest { .. } => "rc_commit_request",
            RcPrepare { .. } => "rc_prepare",
            RcReplicatePrepare { .. } => "rc_replicate_prepare",
            RcReplicatePrepareAck { .. } => "rc_replicate_prepare_ack",
            RcVote { .. } => "rc_vote",
            RcLogDecision { .. } => "rc_log_decision",
            RcLogDecisionAck { .. } => "rc_log_decision_ack",
            RcDecision { .. } => "rc_decision",
            RcDecisionAck { .. } => "rc_decision_ack",
            RcOutcome { .. } => "rc_outcome",
            RcInquiry { .. } => "rc_inquiry",
            RcQuery { .. } => "rc_query",
            RcQueryReply { .. } => "rc_query_reply",
        }
    }

    /// The configuration snapshot a client attached to this message, if any.
    pub fn config(&self) -> Option<&BTreeSet<ShardId>> {
        match self {
            Message::ExecOp { config, .. } | Message::ConfigUpdate { config, .. } => Some(config),
            Message::LastOp { context, .. } | Message::Phase2 { context, .. } => {
                Some(&context.shard_ids)
            }
            _ => None,
        }
    }
}

/// Stable 64-bit FNV-1a; used where a platform-independent hash is needed.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
