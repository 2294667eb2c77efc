#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hacommit::client::{ClientConfig, ScriptClient, ScriptTxn};
use hacommit::experiment::ExperimentConfig;
use hacommit::participant::{ParticipantConfig, Replica};
use hacommit::sim::{DelayDist, FaultAction, FaultEvent, SimConfig, Simulation, Until};
use hacommit::topology::{ShardMap, Topology};
use hacommit::trace::{EventTrace, Protocol};
use hacommit::types::{NodeId, Op, ShardId, Time, TxnId, Value};
use hacommit::workload::{generate, WorkloadSpec};

pub const MS: Time = 1_000;

/// Random crash, partition and client-crash schedule over `[0, horizon)`.
/// Replicas may restart; clients never do.
pub fn random_faults(
    rng: &mut impl Rng,
    topology: &Topology,
    clients: &[NodeId],
    horizon: Time,
) -> Vec<FaultEvent> {
    let replicas: Vec<NodeId> = topology.replica_nodes().collect();
    let mut out = Vec::new();
    let crashes = rng.gen_range(0..=topology.replicas as usize);
    for node in replicas.choose_multiple(rng, crashes) {
        let at = rng.gen_range(0..horizon);
        out.push(FaultEvent {
            at,
            action: FaultAction::Crash { node: *node },
        });
        if rng.gen_bool(0.5) {
            let back = at + rng.gen_range(1..horizon);
            out.push(FaultEvent {
                at: back,
                action: FaultAction::Restart { node: *node },
            });
        }
    }
    for c in clients {
        if rng.gen_bool(0.2) {
            out.push(FaultEvent {
                at: rng.gen_range(0..horizon),
                action: FaultAction::Crash { node: *c },
            });
        }
    }
    if rng.gen_bool(0.4) {
        let mut all: Vec<NodeId> = replicas.iter().chain(clients).copied().collect();
        all.shuffle(rng);
        let cut = rng.gen_range(1..all.len());
        let (a, b) = all.split_at(cut);
        let at = rng.gen_range(0..horizon);
        out.push(FaultEvent {
            at,
            action: FaultAction::Partition {
                groups: vec![a.to_vec(), b.to_vec()],
            },
        });
        out.push(FaultEvent {
            at: at + rng.gen_range(1..horizon),
            action: FaultAction::Heal,
        });
    }
    out.sort_by_key(|e| e.at);
    out
}

/// Small, contended cluster with a randomized fault schedule for `seed`.
pub fn faulty_config(protocol: Protocol, seed: u64) -> ExperimentConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5afe);
    let replicas = if protocol == Protocol::TwoPc { 1 } else { 3 };
    let mut c = ExperimentConfig {
        protocol,
        topology: Topology::new(5, 3, replicas),
        workload: WorkloadSpec {
            txn_count: Some(rng.gen_range(5..15)),
            ops_per_txn: rng.gen_range(1..=6),
            key_space: rng.gen_range(8..40),
            clients: 3,
            ..Default::default()
        },
        drain: 400 * MS,
        max_time: 3_000 * MS,
        ..Default::default()
    };
    c.sim.seed = seed;
    c.sim.one_way_delay = DelayDist::Uniform { lo: 20, hi: 120 };
    c.sim.drop_rate = [0.0, 0.01, 0.05][rng.gen_range(0..3)];
    c.participant = c.participant.clone().with_timeout(30 * MS);
    let clients: Vec<NodeId> = c.client_ids().collect();
    c.sim.fault_schedule = random_faults(&mut rng, &c.topology, &clients, 60 * MS);
    c
}

pub struct ClientFailure {
    pub trace: EventTrace,
    /// Transactions left in the execution phase.
    pub open: Vec<TxnId>,
    /// The transaction whose COMMIT reached three of the five replicas.
    pub half_committed: TxnId,
    pub timeout: Time,
}

/// One shard on five replicas and a scripted client. Nine transactions
/// execute two writes each and are never ended; the tenth writes once and
/// commits, but a partition keeps its COMMIT away from replicas 4 and 5
/// and the client crashes before retransmitting.
pub fn client_failure(seed: u64) -> ClientFailure {
    let client = NodeId(6);
    client_failure_with(
        seed,
        vec![
            FaultEvent {
                at: 280,
                action: FaultAction::Partition {
                    groups: vec![vec![NodeId(4), NodeId(5)]],
                },
            },
            FaultEvent {
                at: 320,
                action: FaultAction::Crash { node: client },
            },
            FaultEvent {
                at: 1_000,
                action: FaultAction::Heal,
            },
        ],
    )
}

/// The same script under an arbitrary fault schedule; the client is node 6.
pub fn client_failure_with(seed: u64, fault_schedule: Vec<FaultEvent>) -> ClientFailure {
    let timeout = 15_000 * MS;
    let topology = Topology::new(5, 1, 5);
    let shards = ShardMap::from_topology(&topology);
    let client = NodeId(6);
    let sim_config = SimConfig {
        seed,
        fault_schedule,
        ..Default::default()
    };
    let mut sim = Simulation::new(sim_config, shards.clone());
    sim.record_topology();
    let pconf = ParticipantConfig {
        data_seed: seed,
        ..ParticipantConfig::default().with_timeout(timeout)
    };
    for id in topology.replica_nodes() {
        sim.add_node(id, Box::new(Replica::new(id, pconf.clone(), &shards)));
    }
    let write = |k: String| Op::Write {
        key: k,
        value: Value::from("v"),
    };
    let mut script: Vec<ScriptTxn> = (0..9)
        .map(|i| ScriptTxn {
            ops: vec![write(format!("a{i}")), write(format!("b{i}"))],
            finish: false,
        })
        .collect();
    script.push(ScriptTxn {
        ops: vec![write("c".into())],
        finish: true,
    });
    sim.add_node(
        client,
        Box::new(ScriptClient::new(client, ClientConfig::default(), script)),
    );
    sim.run_until(Until::Time(310)).expect("script runs");
    let tids = sim.process::<ScriptClient>(client).expect("client").tids();
    sim.run_until(Until::Time(8 * timeout))
        .expect("recovery runs");
    ClientFailure {
        trace: sim.into_trace(),
        open: tids[..9].to_vec(),
        half_committed: tids[9],
        timeout,
    }
}

/// Per generated transaction: distinct written keys per shard.
pub fn writes_per_shard(c: &ExperimentConfig) -> Vec<BTreeMap<ShardId, usize>> {
    let map = ShardMap::from_topology(&c.topology);
    let client = NodeId(c.topology.first_client_id());
    generate(&c.workload, c.sim.seed, client)
        .map(|t| {
            let mut keys: BTreeMap<ShardId, BTreeSet<String>> = BTreeMap::new();
            for op in &t.ops {
                keys.entry(map.shard_of(op.key())).or_default();
                if let Op::Write { key, .. } = op {
                    keys.get_mut(&map.shard_of(key))
                        .unwrap()
                        .insert(key.clone());
                }
            }
            keys.into_iter().map(|(s, k)| (s, k.len())).collect()
        })
        .collect()
}

/// Replica set of shard `s`: `replicas` consecutive nodes starting at s+1.
pub fn members(t: &Topology, s: ShardId, replicas: u32) -> Vec<NodeId> {
    (0..replicas)
        .map(|i| NodeId((s.0 + i) % t.nodes + 1))
        .collect()
}

/// Apply cost at each node: one unit per write across the shards it holds.
pub fn node_costs(
    t: &Topology,
    w: &BTreeMap<ShardId, usize>,
    replicas: u32,
) -> BTreeMap<NodeId, Time> {
    let mut cost = BTreeMap::new();
    for (s, n) in w {
        for m in members(t, *s, replicas) {
            *cost.entry(m).or_insert(0) += *n as Time;
        }
    }
    cost
}
