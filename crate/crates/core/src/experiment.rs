//! Builds a simulated cluster from a configuration, runs a workload on it
//! and collects the trace, metrics and final store contents.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientActor, ClientConfig};
use crate::metrics::{compute_metrics, Metrics, MetricsOptions};
use crate::participant::{ParticipantConfig, Replica};
use crate::sim::{SimConfig, SimError, Simulation, Until};
use crate::topology::{ShardMap, Topology};
use crate::trace::{EventTrace, Protocol};
use crate::types::{Isolation, Key, NodeId, Time, TxnId, Value};
use crate::workload::{WorkloadGen, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub topology: Topology,
    pub workload: WorkloadSpec,
    pub sim: SimConfig,
    pub participant: ParticipantConfig,
    pub client: ClientConfig,
    /// Extra simulated time after the last transaction so that in-flight
    /// decisions and repairs can finish.
    pub drain: Time,
    /// Hard stop for runs bounded by a transaction count.
    pub max_time: Time,
    /// Drop the first and last quarter of the run from the metrics.
    pub elide: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::HaCommit,
            topology: Topology::new(8, 8, 3),
            workload: WorkloadSpec::default(),
            sim: SimConfig::default(),
            participant: ParticipantConfig::default(),
            client: ClientConfig::default(),
            drain: 1_000_000,
            max_time: 3_600_000_000,
            elide: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl ExperimentConfig {
    /// The protocol actually run: read-committed HACommit when the workload
    /// asks for that isolation level.
    pub fn effective_protocol(&self) -> Result<Protocol, ExperimentError> {
        match (self.protocol, self.workload.isolation) {
            (p, Isolation::Serializable) => Ok(p),
            (Protocol::HaCommit | Protocol::HaCommitRc, Isolation::ReadCommitted) => {
                Ok(Protocol::HaCommitRc)
            }
            (p, Isolation::ReadCommitted) => Err(ExperimentError::Config(format!(
                "{} supports serializable isolation only",
                p.name()
            ))),
        }
    }

    /// Shard placement used for the run. 2PC runs without replication.
    pub fn shard_map(&self) -> ShardMap {
        let t = &self.topology;
        let replicas = if self.protocol == Protocol::TwoPc {
            1
        } else {
            t.replicas
        };
        ShardMap::from_topology(&Topology::new(t.nodes, t.shards, replicas))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.workload.validate().map_err(ExperimentError::Config)?;
        self.client.validate().map_err(ExperimentError::Config)?;
        self.effective_protocol()?;
        let t = &self.topology;
        if t.replicas == 0 || t.replicas > t.nodes || t.shards == 0 {
            return Err(ExperimentError::Config(format!("bad topology {t:?}")));
        }
        Ok(())
    }

    pub fn client_ids(&self) -> impl Iterator<Item = NodeId> {
        let first = self.topology.first_client_id();
        (first..first + self.workload.clients).map(NodeId)
    }
}

/// A key's committed value and writer at the end of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub value: Option<Value>,
    pub writer: TxnId,
}

pub struct RunOutput {
    pub trace: EventTrace,
    pub metrics: Metrics,
    /// Committed contents of each shard as held by its leader at the end
    /// (any live replica if the leader is down).
    pub final_state: BTreeMap<Key, FinalRecord>,
    pub end_time: Time,
}

/// Builds the cluster for `config` without running it.
pub fn build_simulation(config: &ExperimentConfig) -> Result<Simulation, ExperimentError> {
    config.validate()?;
    let protocol = config.effective_protocol()?;
    let shards = config.shard_map();
    let mut sim = Simulation::new(config.sim.clone(), shards.clone());
    sim.record_topology();

    let mut pconf = config.participant.clone();
    pconf.protocol = protocol;
    pconf.record_count = config.workload.key_space;
    pconf.value_size = config.workload.value_size;
    pconf.data_seed = config.sim.seed;
    for id in config.topology.replica_nodes() {
        sim.add_node(id, Box::new(Replica::new(id, pconf.clone(), &shards)));
    }

    let mut cconf = config.client.clone();
    cconf.protocol = protocol;
    cconf.think_time = config.workload.think_time;
    cconf.stop_at = config.workload.duration;
    cconf.log_cost = pconf.log_cost;
    for id in config.client_ids() {
        let source = WorkloadGen::new(config.workload.clone(), config.sim.seed, id);
        sim.add_node(
            id,
            Box::new(ClientActor::new(id, cconf.clone(), Box::new(source))),
        );
    }
    Ok(sim)
}

/// Runs the whole experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    let mut sim = build_simulation(config)?;
    let clients: Vec<NodeId> = config.client_ids().collect();
    let done = match config.workload.duration {
        Some(d) => {
            sim.run_until(Until::Time(d))?;
            d
        }
        None => {
            let step = 10_000;
            loop {
                let next = sim.now() + step;
                sim.run_until(Until::Time(next))?;
                let idle = clients.iter().all(|c| {
                    sim.is_crashed(*c)
                        || sim
                            .process::<ClientActor>(*c)
                            .is_some_and(ClientActor::is_idle)
                });
                if idle || sim.now() >= config.max_time {
                    break sim.now();
                }
            }
        }
    };
    let end_time = done + config.drain;
    sim.run_until(Until::Time(end_time))?;
    let final_state = final_state(&sim);
    let trace = sim.into_trace();
    let options = MetricsOptions {
        start: 0,
        end: done,
        elide: config.elide,
    };
    let metrics = compute_metrics(&trace, &options);
    Ok(RunOutput {
        trace,
        metrics,
        final_state,
        end_time,
    })
}

fn final_state(sim: &Simulation) -> BTreeMap<Key, FinalRecord> {
    let mut out = BTreeMap::new();
    for group in sim.shards().groups() {
        let holder = std::iter::once(group.leader)
            .chain(group.members.iter().copied())
            .find(|n| {
                !sim.is_crashed(*n) && sim.process::<Replica>(*n).is_some_and(|r| !r.is_learner())
            });
        let Some(store) = holder
            .and_then(|n| sim.process::<Replica>(n))
            .and_then(|r| r.store(group.shard))
        else {
            continue;
        };
        for (k, rec) in store.records() {
            out.insert(
                k.clone(),
                FinalRecord {
                    value: rec.committed_value.clone(),
                    writer: rec.committed_by,
                },
            );
        }
    }
    out
}
