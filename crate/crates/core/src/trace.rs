//! Totally ordered event trace produced by the simulator and read back by
//! the auditors. Serialized as one JSON object per line.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::store::LockMode;
use crate::topology::ReplicaGroup;
use crate::types::{
    Ballot, Decision, Grounds, Isolation, Key, Message, NodeId, ShardId, Time, TxnId, Value, Vote,
    WriteCmd,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub idx: u64,
    pub time: Time,
    pub node: NodeId,
    /// Index of the delivery, timer or fault whose handler produced this
    /// event.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<u64>,
    #[serde(flatten)]
    pub kind: TraceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Partition,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[serde(rename = "hacommit")]
    HaCommit,
    #[serde(rename = "hacommit-rc")]
    HaCommitRc,
    #[serde(rename = "2pc")]
    TwoPc,
    #[serde(rename = "rcommit")]
    RCommit,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::HaCommit,
        Protocol::HaCommitRc,
        Protocol::TwoPc,
        Protocol::RCommit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::HaCommit => "hacommit",
            Protocol::HaCommitRc => "hacommit-rc",
            Protocol::TwoPc => "2pc",
            Protocol::RCommit => "rcommit",
        }
    }

    pub fn isolation(self) -> Isolation {
        match self {
            Protocol::HaCommitRc => Isolation::ReadCommitted,
            _ => Isolation::Serializable,
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                format!("unknown protocol {s:?} (expected hacommit|hacommit-rc|2pc|rcommit)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceKind {
    // network
    Send {
        to: NodeId,
        msg: Cow<'static, str>,
        tid: TxnId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deliver_at: Option<Time>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dropped: Option<DropReason>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<Box<Message>>,
    },
    Deliver {
        from: NodeId,
        send: u64,
        msg: Cow<'static, str>,
        tid: TxnId,
    },
    Discard {
        from: NodeId,
        send: u64,
        msg: Cow<'static, str>,
        tid: TxnId,
    },
    Timer {
        timer: Cow<'static, str>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tid: Option<TxnId>,
    },

    // faults and membership
    Crash,
    Restart,
    Partition {
        groups: Vec<Vec<NodeId>>,
    },
    Heal,
    LeaderChange {
        shard: ShardId,
        leader: NodeId,
        term: u64,
    },
    /// Replica placement at the start of a run.
    Topology {
        groups: Vec<ReplicaGroup>,
    },

    // store
    LockGranted {
        tid: TxnId,
        key: Key,
        mode: LockMode,
    },
    LocksReleased {
        tid: TxnId,
        keys: Vec<Key>,
    },
    Staged {
        tid: TxnId,
        key: Key,
    },
    Read {
        tid: TxnId,
        key: Key,
        value: Option<Value>,
        writer: TxnId,
        isolation: Isolation,
    },

    // voting and the commit instance
    VoteRecorded {
        tid: TxnId,
        shard: ShardId,
        vote: Vote,
    },
    Promised {
        tid: TxnId,
        ballot: Ballot,
    },
    Accepted {
        tid: TxnId,
        ballot: Ballot,
        decision: Decision,
    },
    AckSent {
        tid: TxnId,
        ballot: Ballot,
        decision: Decision,
    },
    Applied {
        tid: TxnId,
        decision: Decision,
        shards: Vec<ShardId>,
        writes: Vec<WriteCmd>,
    },
    RecoveryStarted {
        tid: TxnId,
        ballot: Ballot,
    },
    RecoveryDecided {
        tid: TxnId,
        ballot: Ballot,
        decision: Decision,
    },

    // coordinator side
    TxnIssued {
        txn: u64,
        tid: TxnId,
        attempt: u32,
    },
    Proposed {
        tid: TxnId,
        decision: Decision,
        grounds: Grounds,
        shards: Vec<ShardId>,
        #[serde(with = "crate::types::pairs")]
        votes: BTreeMap<ShardId, Vote>,
    },
    CommitStarted {
        tid: TxnId,
        protocol: Protocol,
        writes: u32,
        #[serde(default)]
        depth: u32,
    },
    CommitEnded {
        tid: TxnId,
        decision: Decision,
        latency_us: Time,
        delays: u32,
        shards: Vec<ShardId>,
    },
    InDoubt {
        tid: TxnId,
    },
    Retry {
        txn: u64,
        tid: TxnId,
    },
    GaveUp {
        txn: u64,
    },
    Prepared {
        tid: TxnId,
        shard: ShardId,
        vote: Vote,
    },
}

impl TraceKind {
    pub fn tid(&self) -> Option<TxnId> {
        use TraceKind::*;
        match self {
            Send { tid, .. } | Deliver { tid, .. } | Discard { tid, .. } => Some(*tid),
            Timer { tid, .. } => *tid,
            LockGranted { tid, .. }
            | LocksReleased { tid, .. }
            | Staged { tid, .. }
            | Read { tid, .. }
            | VoteRecorded { tid, .. }
            | Promised { tid, .. }
            | Accepted { tid, .. }
            | AckSent { tid, .. }
            | Applied { tid, .. }
            | RecoveryStarted { tid, .. }
            | RecoveryDecided { tid, .. }
            | TxnIssued { tid, .. }
            | Proposed { tid, .. }
            | CommitStarted { tid, .. }
            | CommitEnded { tid, .. }
            | InDoubt { tid }
            | Retry { tid, .. }
            | Prepared { tid, .. } => Some(*tid),
            _ => None,
        }
    }
}

/// Ordered list of events; `events[i].idx == i`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTrace {
    pub events: Vec<TraceEvent>,
}

impl EventTrace {
    pub fn push(&mut self, time: Time, node: NodeId, cause: Option<u64>, kind: TraceKind) -> u64 {
        let idx = self.events.len() as u64;
        self.events.push(TraceEvent {
            idx,
            time,
            node,
            cause,
            kind,
        });
        idx
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn get(&self, idx: u64) -> Option<&TraceEvent> {
        self.events.get(idx as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_jsonl(r: impl BufRead) -> io::Result<Self> {
        let mut events = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TraceEvent = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1))
            })?;
            events.push(e);
        }
        Ok(Self { events })
    }

    /// Number of message deliveries on the causal chain from the handler
    /// that produced `end` back to handler event `start_cause`. `None` when
    /// the chain does not reach it.
    pub fn causal_delays(&self, start_cause: u64, end: &TraceEvent) -> Option<u32> {
        let mut delays = 0;
        let mut cur = end.cause?;
        loop {
            if cur == start_cause {
                return Some(delays);
            }
            if cur < start_cause {
                return None;
            }
            let ev = self.get(cur)?;
            cur = match &ev.kind {
                TraceKind::Deliver { send, .. } => {
                    delays += 1;
                    self.get(*send)?.cause?
                }
                _ => ev.cause?,
            };
        }
    }
}
