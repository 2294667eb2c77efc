//! YCSB-style transaction streams.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sim::stream_rng;
use crate::store::{random_value, record_key};
use crate::types::{Isolation, NodeId, Op, Time};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Transactions per client; unbounded when `None`.
    pub txn_count: Option<u64>,
    /// Stop issuing new transactions after this simulated time.
    pub duration: Option<Time>,
    pub ops_per_txn: u32,
    pub read_fraction: f64,
    pub key_space: u64,
    pub clients: u32,
    pub isolation: Isolation,
    pub value_size: usize,
    /// Pause between a client's transactions.
    pub think_time: Time,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            txn_count: Some(100),
            duration: None,
            ops_per_txn: 4,
            read_fraction: 0.5,
            key_space: 10_000,
            clients: 1,
            isolation: Isolation::Serializable,
            value_size: 10,
            think_time: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.ops_per_txn == 0 {
            return Err("ops_per_txn must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(format!(
                "read_fraction {} outside [0, 1]",
                self.read_fraction
            ));
        }
        if self.key_space == 0 {
            return Err("key_space must be positive".into());
        }
        if self.clients == 0 {
            return Err("at least one client is required".into());
        }
        if self.txn_count.is_none() && self.duration.is_none() {
            return Err("either txn_count or duration must be set".into());
        }
        Ok(())
    }
}

/// One transaction's operations; the last one is sent as the final
/// operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnSpec {
    pub ops: Vec<Op>,
}

/// A supply of transactions for one client.
pub trait TxnSource {
    fn next_txn(&mut self) -> Option<TxnSpec>;
}

impl TxnSource for std::vec::IntoIter<TxnSpec> {
    fn next_txn(&mut self) -> Option<TxnSpec> {
        self.next()
    }
}

const PURPOSE_WORKLOAD: u64 = 3;

/// Deterministic per-client transaction stream.
#[derive(Debug, Clone)]
pub struct WorkloadGen {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    produced: u64,
}

impl WorkloadGen {
    pub fn new(spec: WorkloadSpec, seed: u64, client: NodeId) -> Self {
        Self {
            rng: stream_rng(seed, client, PURPOSE_WORKLOAD),
            spec,
            produced: 0,
        }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }
}

impl TxnSource for WorkloadGen {
    fn next_txn(&mut self) -> Option<TxnSpec> {
        if self.spec.txn_count.is_some_and(|n| self.produced >= n) {
            return None;
        }
        self.produced += 1;
        let n = self.spec.key_space;
        let ops = (0..self.spec.ops_per_txn)
            .map(|_| {
                let key = record_key(self.rng.gen_range(0..n), n);
                if self.rng.gen_bool(self.spec.read_fraction) {
                    Op::Read { key }
                } else {
                    Op::Write {
                        key,
                        value: random_value(&mut self.rng, self.spec.value_size),
                    }
                }
            })
            .collect();
        Some(TxnSpec { ops })
    }
}

impl Iterator for WorkloadGen {
    type Item = TxnSpec;
    fn next(&mut self) -> Option<TxnSpec> {
        self.next_txn()
    }
}

/// The stream one client would issue under `spec` and `seed`.
pub fn generate(spec: &WorkloadSpec, seed: u64, client: NodeId) -> WorkloadGen {
    WorkloadGen::new(spec.clone(), seed, client)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_reads_single_op() {
        let spec = WorkloadSpec {
            ops_per_txn: 1,
            read_fraction: 1.0,
            txn_count: Some(50),
            ..Default::default()
        };
        let txns: Vec<_> = generate(&spec, 3, NodeId(9)).collect();
        assert_eq!(txns.len(), 50);
        assert!(txns
            .iter()
            .all(|t| t.ops.len() == 1 && matches!(t.ops[0], Op::Read { .. })));
    }

    #[test]
    fn fixed_seed_is_repeatable() {
        let spec = WorkloadSpec::default();
        let a: Vec<_> = generate(&spec, 11, NodeId(9)).collect();
        let b: Vec<_> = generate(&spec, 11, NodeId(9)).collect();
        assert_eq!(a, b);
        let c: Vec<_> = generate(&spec, 11, NodeId(10)).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn validation_rejects_nonsense() {
        assert!(WorkloadSpec {
            ops_per_txn: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(WorkloadSpec {
            read_fraction: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(WorkloadSpec {
            txn_count: None,
            duration: None,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(WorkloadSpec::default().validate().is_ok());
    }
}
