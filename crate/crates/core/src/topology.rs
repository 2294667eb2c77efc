//! Shard placement: which replica nodes hold each shard and who currently
//! leads each replica group.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::{fnv1a, NodeId, ShardId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaGroup {
    pub shard: ShardId,
    pub members: Vec<NodeId>,
    pub leader: NodeId,
    /// Incremented on every leader succession.
    pub term: u64,
}

impl ReplicaGroup {
    pub fn new(shard: ShardId, members: Vec<NodeId>) -> Self {
        assert!(!members.is_empty(), "replica group needs members");
        let leader = members[0];
        Self {
            shard,
            members,
            leader,
            term: 0,
        }
    }

    pub fn quorum_size(&self) -> usize {
        self.members.len() / 2 + 1
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }

    /// True once `acks` holds a majority of this group.
    pub fn has_quorum<'a>(&self, acks: impl IntoIterator<Item = &'a NodeId>) -> bool {
        acks.into_iter().filter(|n| self.contains(**n)).count() >= self.quorum_size()
    }
}

/// Desk-scale cluster layout: `nodes` replica servers numbered from 1,
/// `shards` shards, each replicated on `replicas` consecutive servers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: u32,
    pub shards: u32,
    pub replicas: u32,
}

impl Topology {
    pub fn new(nodes: u32, shards: u32, replicas: u32) -> Self {
        assert!(
            replicas >= 1 && replicas <= nodes,
            "replicas must be in 1..=nodes"
        );
        assert!(shards >= 1);
        Self {
            nodes,
            shards,
            replicas,
        }
    }

    pub fn replica_nodes(&self) -> impl Iterator<Item = NodeId> {
        (1..=self.nodes).map(NodeId)
    }

    /// First node id available for clients.
    pub fn first_client_id(&self) -> u32 {
        self.nodes + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardMap {
    groups: BTreeMap<ShardId, ReplicaGroup>,
    /// Restarted nodes; never eligible as leaders.
    learners: BTreeSet<NodeId>,
    crashed: BTreeSet<NodeId>,
}

impl ShardMap {
    pub fn from_groups(groups: impl IntoIterator<Item = ReplicaGroup>) -> Self {
        Self {
            groups: groups.into_iter().map(|g| (g.shard, g)).collect(),
            learners: BTreeSet::new(),
            crashed: BTreeSet::new(),
        }
    }

    pub fn from_topology(t: &Topology) -> Self {
        let groups = (0..t.shards).map(|s| {
            let members = (0..t.replicas)
                .map(|i| NodeId((s + i) % t.nodes + 1))
                .collect::<Vec<_>>();
            ReplicaGroup::new(ShardId(s), members)
        });
        Self::from_groups(groups)
    }

    pub fn shard_count(&self) -> u32 {
        self.groups.len() as u32
    }

    pub fn shard_of(&self, key: &str) -> ShardId {
        let idx = fnv1a(key.as_bytes()) % self.groups.len() as u64;
        *self
            .groups
            .keys()
            .nth(idx as usize)
            .expect("non-empty shard map")
    }

    pub fn group(&self, shard: ShardId) -> Option<&ReplicaGroup> {
        self.groups.get(&shard)
    }

    pub fn groups(&self) -> impl Iterator<Item = &ReplicaGroup> {
        self.groups.values()
    }

    pub fn leader(&self, shard: ShardId) -> Option<NodeId> {
        self.groups.get(&shard).map(|g| g.leader)
    }

    pub fn is_leader(&self, node: NodeId, shard: ShardId) -> bool {
        self.leader(shard) == Some(node)
    }

    /// Shards `node` holds a replica of.
    pub fn shards_of(&self, node: NodeId) -> impl Iterator<Item = ShardId> + '_ {
        self.groups
            .values()
            .filter(move |g| g.contains(node))
            .map(|g| g.shard)
    }

    /// Every replica of every listed shard, deduplicated and ordered.
    pub fn replicas_of<'a>(
        &self,
        shards: impl IntoIterator<Item = &'a ShardId>,
    ) -> BTreeSet<NodeId> {
        shards
            .into_iter()
            .filter_map(|s| self.groups.get(s))
            .flat_map(|g| g.members.iter().copied())
            .collect()
    }

    pub fn is_crashed(&self, node: NodeId) -> bool {
        self.crashed.contains(&node)
    }

    pub fn is_learner(&self, node: NodeId) -> bool {
        self.learners.contains(&node)
    }

    /// Marks `node` crashed and moves leadership of every group it led to
    /// the next live, non-learner member in list order. Returns the groups
    /// whose leader changed as (shard, new leader, term).
    pub fn on_crash(&mut self, node: NodeId) -> Vec<(ShardId, NodeId, u64)> {
        self.crashed.insert(node);
        let mut changed = Vec::new();
        for g in self.groups.values_mut() {
            if g.leader != node {
                continue;
            }
            let pos = g.members.iter().position(|m| *m == node).unwrap_or(0);
            let n = g.members.len();
            let next = (1..n)
                .map(|i| g.members[(pos + i) % n])
                .find(|m| !self.crashed.contains(m) && !self.learners.contains(m));
            if let Some(next) = next {
                g.leader = next;
                g.term += 1;
                changed.push((g.shard, next, g.term));
            }
        }
        changed
    }

    /// A restarted node comes back empty and only ever acts as a learner.
    pub fn on_restart(&mut self, node: NodeId) {
        self.crashed.remove(&node);
        self.learners.insert(node);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quorum_is_majority() {
        for (n, q) in [(1, 1), (2, 2), (3, 2), (4, 3), (5, 3)] {
            let g = ReplicaGroup::new(ShardId(0), (1..=n).map(NodeId).collect());
            assert_eq!(g.quorum_size(), q);
            assert!(g.members.contains(&g.leader));
        }
    }

    #[test]
    fn consecutive_placement() {
        let m = ShardMap::from_topology(&Topology::new(8, 8, 3));
        assert_eq!(
            m.group(ShardId(7)).unwrap().members,
            vec![NodeId(8), NodeId(1), NodeId(2)]
        );
        assert_eq!(
            m.shards_of(NodeId(1)).collect::<Vec<_>>(),
            vec![ShardId(0), ShardId(6), ShardId(7)]
        );
    }

    #[test]
    fn succession_skips_dead_members() {
        let mut m =
            ShardMap::from_groups([ReplicaGroup::new(ShardId(0), (1..=5).map(NodeId).collect())]);
        m.on_crash(NodeId(2));
        let changed = m.on_crash(NodeId(1));
        assert_eq!(changed, vec![(ShardId(0), NodeId(3), 1)]);
        assert_eq!(m.leader(ShardId(0)), Some(NodeId(3)));
    }

    #[test]
    fn every_key_maps_to_a_group() {
        let m = ShardMap::from_topology(&Topology::new(5, 4, 5));
        for i in 0..100 {
            let s = m.shard_of(&format!("user{i:03}"));
            assert!(m.group(s).is_some());
        }
    }
}
