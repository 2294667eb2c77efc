//! Single-version in-memory key-value store with a pending-write slot per
//! key and a strict two-phase-locking lock table (NO-WAIT on conflict).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{fnv1a, Decision, Isolation, Key, Stamp, TxnId, Value, WriteCmd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockMode {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LockState {
    Free,
    ReadHeld(BTreeSet<TxnId>),
    WriteHeld(TxnId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grant {
    /// A new hold was recorded.
    Acquired,
    /// A sole read hold became a write hold.
    Upgraded,
    /// The transaction already held the key in a sufficient mode.
    AlreadyHeld,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("lock conflict on key {key}")]
    Conflict { key: Key },
    #[error("transaction {tid} does not hold the write lock on {key}")]
    LockNotHeld { tid: TxnId, key: Key },
    #[error("transaction {tid} already applied {applied}, refusing {requested}")]
    ConflictingDecision {
        tid: TxnId,
        applied: Decision,
        requested: Decision,
    },
}

/// Whether `tid` may take `key` in `mode` given the current state.
pub fn lock_compatible(state: &LockState, tid: TxnId, mode: LockMode) -> bool {
    match (state, mode) {
        (LockState::Free, _) => true,
        (LockState::WriteHeld(owner), _) => *owner == tid,
        (LockState::ReadHeld(_), LockMode::Read) => true,
        (LockState::ReadHeld(holders), LockMode::Write) => {
            holders.len() == 1 && holders.contains(&tid)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LockTable {
    locks: BTreeMap<Key, LockState>,
    held: BTreeMap<TxnId, BTreeSet<Key>>,
}

impl LockTable {
    pub fn state(&self, key: &str) -> LockState {
        self.locks.get(key).cloned().unwrap_or(LockState::Free)
    }

    pub fn acquire(&mut self, tid: TxnId, key: &str, mode: LockMode) -> Result<Grant, StoreError> {
        let state = self.locks.get(key).cloned().unwrap_or(LockState::Free);
        if !lock_compatible(&state, tid, mode) {
            return Err(StoreError::Conflict {
                key: key.to_string(),
            });
        }
        let (next, grant) = match (state, mode) {
            (LockState::Free, LockMode::Read) => {
                (LockState::ReadHeld(BTreeSet::from([tid])), Grant::Acquired)
            }
            (LockState::Free, LockMode::Write) => (LockState::WriteHeld(tid), Grant::Acquired),
            (s @ LockState::WriteHeld(_), _) => (s, Grant::AlreadyHeld),
            (LockState::ReadHeld(mut holders), LockMode::Read) => {
                let grant = if holders.insert(tid) {
                    Grant::Acquired
                } else {
                    Grant::AlreadyHeld
                };
                (LockState::ReadHeld(holders), grant)
            }
            (LockState::ReadHeld(_), LockMode::Write) => {
                (LockState::WriteHeld(tid), Grant::Upgraded)
            }
        };
        self.locks.insert(key.to_string(), next);
        self.held.entry(tid).or_default().insert(key.to_string());
        Ok(grant)
    }

    pub fn holds(&self, tid: TxnId, key: &str, mode: LockMode) -> bool {
        match (self.locks.get(key), mode) {
            (Some(LockState::WriteHeld(owner)), _) => *owner == tid,
            (Some(LockState::ReadHeld(holders)), LockMode::Read) => holders.contains(&tid),
            _ => false,
        }
    }

    pub fn keys_held_by(&self, tid: TxnId) -> impl Iterator<Item = &Key> {
        self.held.get(&tid).into_iter().flatten()
    }

    /// Drops every hold of `tid`; returns the released keys in order.
    pub fn release_all(&mut self, tid: TxnId) -> Vec<Key> {
        let keys = self.held.remove(&tid).unwrap_or_default();
        for key in &keys {
            let now_free = match self.locks.get_mut(key) {
                Some(LockState::WriteHeld(owner)) => *owner == tid,
                Some(LockState::ReadHeld(holders)) => {
                    holders.remove(&tid);
                    holders.is_empty()
                }
                _ => false,
            };
            if now_free {
                self.locks.remove(key);
            }
        }
        keys.into_iter().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.locks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// `None` while the key has never been committed.
    pub committed_value: Option<Value>,
    pub committed_by: TxnId,
    /// Stamp of the installed value's writer; zero for the initial load.
    #[serde(default)]
    pub stamp: Stamp,
    pub pending: Option<(TxnId, Value)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadResult {
    pub value: Option<Value>,
    pub writer: TxnId,
    /// Lock grant taken by a serializable read.
    pub grant: Option<Grant>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApplyOutcome {
    /// False when the same decision had already been applied.
    pub first_time: bool,
    pub released: Vec<Key>,
    pub written: Vec<WriteCmd>,
}

#[derive(Debug, Clone, Default)]
pub struct Store {
    records: BTreeMap<Key, Record>,
    locks: LockTable,
    decided: BTreeMap<TxnId, Decision>,
}

/// Zero-padded record key for index `i` in a key space of `n` records.
pub fn record_key(i: u64, n: u64) -> Key {
    let width = n.saturating_sub(1).max(1).to_string().len();
    format!("user{i:0width$}")
}

/// Random alphanumeric value of `len` bytes.
pub fn random_value(rng: &mut impl Rng, len: usize) -> Value {
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    Value(
        (0..len)
            .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())])
            .collect(),
    )
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    /// Preloads `n` records `user0..` with `value_size`-byte random values.
    pub fn load(
        &mut self,
        n: u64,
        value_size: usize,
        rng: &mut impl Rng,
        keep: impl Fn(&str) -> bool,
    ) {
        for i in 0..n {
            let key = record_key(i, n);
            let value = random_value(rng, value_size);
            if keep(&key) {
                self.records.insert(
                    key,
                    Record {
                        committed_value: Some(value),
                        committed_by: TxnId::GENESIS,
                        stamp: (0, 0),
                        pending: None,
                    },
                );
            }
        }
    }

    pub fn record(&self, key: &str) -> Option<&Record> {
        self.records.get(key)
    }

    pub fn records(&self) -> impl Iterator<Item = (&Key, &Record)> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn locks(&self) -> &LockTable {
        &self.locks
    }

    pub fn decision_of(&self, tid: TxnId) -> Option<Decision> {
        self.decided.get(&tid).copied()
    }

    pub fn acquire(&mut self, tid: TxnId, key: &str, mode: LockMode) -> Result<Grant, StoreError> {
        self.locks.acquire(tid, key, mode)
    }

    /// Returns the committed value; pending values are never visible.
    pub fn read(
        &mut self,
        tid: TxnId,
        key: &str,
        isolation: Isolation,
    ) -> Result<ReadResult, StoreError> {
        let grant = match isolation {
            Isolation::Serializable => Some(self.locks.acquire(tid, key, LockMode::Read)?),
            Isolation::ReadCommitted => None,
        };
        let (value, writer) = match self.records.get(key) {
            Some(r) => (r.committed_value.clone(), r.committed_by),
            None => (None, TxnId::GENESIS),
        };
        Ok(ReadResult {
            value,
            writer,
            grant,
        })
    }

    pub fn stage_write(&mut self, tid: TxnId, key: &str, value: Value) -> Result<(), StoreError> {
        if !self.locks.holds(tid, key, LockMode::Write) {
            return Err(StoreError::LockNotHeld {
                tid,
                key: key.to_string(),
            });
        }
        let rec = self.records.entry(key.to_string()).or_insert(Record {
            committed_value: None,
            committed_by: TxnId::GENESIS,
            stamp: (0, 0),
            pending: None,
        });
        rec.pending = Some((tid, value));
        Ok(())
    }

    /// Applies `decision` for `tid`. COMMIT installs `writes` as committed
    /// values; ABORT discards pending writes. Both release every lock of
    /// `tid`. Repeating the same decision is a no-op. With a `stamp`, a
    /// write is skipped when the key already holds a value with a higher
    /// stamp.
    pub fn apply_decision(
        &mut self,
        tid: TxnId,
        decision: Decision,
        writes: &[WriteCmd],
        stamp: Option<Stamp>,
    ) -> Result<ApplyOutcome, StoreError> {
        if let Some(&applied) = self.decided.get(&tid) {
            if applied != decision {
                return Err(StoreError::ConflictingDecision {
                    tid,
                    applied,
                    requested: decision,
                });
            }
            return Ok(ApplyOutcome {
                first_time: false,
                released: Vec::new(),
                written: Vec::new(),
            });
        }
        self.decided.insert(tid, decision);
        let held: Vec<Key> = self.locks.keys_held_by(tid).cloned().collect();
        for key in &held {
            if let Some(rec) = self.records.get_mut(key) {
                if matches!(rec.pending, Some((owner, _)) if owner == tid) {
                    rec.pending = None;
                }
            }
        }
        let written = if decision == Decision::Commit {
            let mut written = Vec::with_capacity(writes.len());
            for w in writes {
                let rec = self.records.entry(w.key.clone()).or_insert(Record {
                    committed_value: None,
                    committed_by: TxnId::GENESIS,
                    stamp: (0, 0),
                    pending: None,
                });
                if matches!(rec.pending, Some((owner, _)) if owner == tid) {
                    rec.pending = None;
                }
                if stamp.is_some_and(|s| s < rec.stamp) {
                    continue;
                }
                rec.committed_value = Some(w.value.clone());
                rec.committed_by = tid;
                rec.stamp = stamp.unwrap_or(rec.stamp);
                written.push(w.clone());
            }
            written
        } else {
            Vec::new()
        };
        let released = self.locks.release_all(tid);
        Ok(ApplyOutcome {
            first_time: true,
            released,
            written,
        })
    }

    /// Hash of committed values, pending slots, lock table and decisions.
    pub fn state_hash(&self) -> u64 {
        let mut buf = Vec::new();
        for (k, r) in &self.records {
            buf.extend_from_slice(k.as_bytes());
            buf.push(0);
            if let Some(v) = &r.committed_value {
                buf.extend_from_slice(v.as_bytes());
            }
            buf.push(1);
            buf.extend_from_slice(&r.committed_by.0.to_le_bytes());
            if let Some((t, v)) = &r.pending {
                buf.extend_from_slice(&t.0.to_le_bytes());
                buf.extend_from_slice(v.as_bytes());
            }
            buf.push(2);
        }
        for (k, s) in &self.locks.locks {
            buf.extend_from_slice(k.as_bytes());
            match s {
                LockState::Free => buf.push(3),
                LockState::ReadHeld(h) => h
                    .iter()
                    .for_each(|t| buf.extend_from_slice(&t.0.to_le_bytes())),
                LockState::WriteHeld(t) => buf.extend_from_slice(&t.0.to_le_bytes()),
            }
        }
        for (t, d) in &self.decided {
            buf.extend_from_slice(&t.0.to_le_bytes());
            buf.push(*d as u8);
        }
        fnv1a(&buf)
    }

    /// Committed values only, for comparisons across replicas.
    pub fn committed_snapshot(&self) -> BTreeMap<Key, Value> {
        self.records
            .iter()
            .filter_map(|(k, r)| r.committed_value.clone().map(|v| (k.clone(), v)))
            .collect()
    }
}
