//! Deterministic discrete-event simulator.
//!
//! Events are processed strictly in (time, sequence) order. Every source of
//! randomness is a ChaCha stream derived from the root seed and a
//! (node, purpose) pair, so a [`SimConfig`] fully determines the trace.

use std::any::Any;
use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::ShardMap;
use crate::trace::{DropReason, EventTrace, TraceKind};
use crate::types::{Ballot, Message, NodeId, ShardId, Time, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayDist {
    Constant { us: Time },
    Uniform { lo: Time, hi: Time },
}

impl DelayDist {
    pub fn sample(&self, rng: &mut impl Rng) -> Time {
        match *self {
            DelayDist::Constant { us } => us,
            DelayDist::Uniform { lo, hi } => rng.gen_range(lo..=hi),
        }
    }

    /// Upper bound of a single network hop.
    pub fn max(&self) -> Time {
        match *self {
            DelayDist::Constant { us } => us,
            DelayDist::Uniform { hi, .. } => hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum FaultAction {
    Crash {
        node: NodeId,
    },
    Restart {
        node: NodeId,
    },
    /// Nodes in different listed groups cannot reach each other; unlisted
    /// nodes form one extra group.
    Partition {
        groups: Vec<Vec<NodeId>>,
    },
    Heal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub at: Time,
    #[serde(flatten)]
    pub action: FaultAction,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("fault schedule line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unknown target node {0}")]
    UnknownNode(NodeId),
    #[error("fault at {at} is in the past (now {now})")]
    PastFault { at: Time, now: Time },
    #[error("event limit of {0} exceeded")]
    EventLimit(u64),
}

/// Parses `<time_us> <action> <target>` lines. Actions: `crash <node>`,
/// `restart <node>`, `partition <a,b|c,d,...>`, `heal`. Blank lines and `#`
/// comments are ignored.
pub fn parse_fault_schedule(text: &str) -> Result<Vec<FaultEvent>, SimError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: &str| SimError::Parse {
            line: i + 1,
            reason: reason.to_string(),
        };
        let mut parts = line.split_whitespace();
        let at: Time = parts
            .next()
            .ok_or_else(|| err("missing time"))?
            .parse()
            .map_err(|_| err("bad time"))?;
        let action = parts.next().ok_or_else(|| err("missing action"))?;
        let target = parts.next();
        let node = |t: Option<&str>| -> Result<NodeId, SimError> {
            let t = t.ok_or_else(|| err("missing target"))?;
            t.trim_start_matches('n')
                .parse()
                .map(NodeId)
                .map_err(|_| err("bad node id"))
        };
        let action = match action {
            "crash" => FaultAction::Crash {
                node: node(target)?,
            },
            "restart" => FaultAction::Restart {
                node: node(target)?,
            },
            "partition" => {
                let spec = target.ok_or_else(|| err("missing partition groups"))?;
                let groups = spec
                    .split('|')
                    .map(|g| {
                        g.split(',')
                            .map(|n| node(Some(n)))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                FaultAction::Partition { groups }
            }
            "heal" => FaultAction::Heal,
            _ => return Err(err("unknown action")),
        };
        if parts.next().is_some() {
            return Err(err("trailing tokens"));
        }
        out.push(FaultEvent { at, action });
    }
    Ok(out)
}

pub fn format_fault_schedule(events: &[FaultEvent]) -> String {
    let mut s = String::new();
    for e in events {
        let body = match &e.action {
            FaultAction::Crash { node } => format!("crash {}", node.0),
            FaultAction::Restart { node } => format!("restart {}", node.0),
            FaultAction::Partition { groups } => format!(
                "partition {}",
                groups
                    .iter()
                    .map(|g| g
                        .iter()
                        .map(|n| n.0.to_string())
                        .collect::<Vec<_>>()
                        .join(","))
                    .collect::<Vec<_>>()
                    .join("|")
            ),
            FaultAction::Heal => "heal".to_string(),
        };
        s.push_str(&format!("{} {}\n", e.at, body));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub one_way_delay: DelayDist,
    pub drop_rate: f64,
    pub fault_schedule: Vec<FaultEvent>,
    /// Livelock guard.
    pub max_events: u64,
    /// Embed full message bodies in send records.
    pub record_messages: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            one_way_delay: DelayDist::Constant { us: 50 },
            drop_rate: 0.0,
            fault_schedule: Vec::new(),
            max_events: 50_000_000,
            record_messages: true,
        }
    }
}

/// Timers understood by the node implementations in this crate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Timer {
    Start,
    NextTxn { slot: u32 },
    OpTimeout { tid: TxnId, seq: u32 },
    Retransmit { tid: TxnId },
    EndDeadline { tid: TxnId },
    Scan,
    StartRecovery { tid: TxnId },
    RoundTimeout { tid: TxnId, ballot: Ballot },
}

impl Timer {
    pub fn name(&self) -> &'static str {
        match self {
            Timer::Start => "start",
            Timer::NextTxn { .. } => "next_txn",
            Timer::OpTimeout { .. } => "op_timeout",
            Timer::Retransmit { .. } => "retransmit",
            Timer::EndDeadline { .. } => "end_deadline",
            Timer::Scan => "scan",
            Timer::StartRecovery { .. } => "start_recovery",
            Timer::RoundTimeout { .. } => "round_timeout",
        }
    }

    pub fn tid(&self) -> Option<TxnId> {
        match self {
            Timer::OpTimeout { tid, .. }
            | Timer::Retransmit { tid }
            | Timer::EndDeadline { tid }
            | Timer::StartRecovery { tid }
            | Timer::RoundTimeout { tid, .. } => Some(*tid),
            _ => None,
        }
    }
}

/// A node state machine driven by the simulator. Handlers never block.
pub trait Process: Any {
    fn on_start(&mut self, _ctx: &mut Ctx<'_>) {}
    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message);
    fn on_timer(&mut self, _ctx: &mut Ctx<'_>, _timer: Timer) {}
    /// This node became leader of `shard` after its previous leader crashed.
    fn on_promoted(&mut self, _ctx: &mut Ctx<'_>, _shard: ShardId) {}
    /// The node came back after a crash with all volatile state lost.
    fn on_restart(&mut self, _ctx: &mut Ctx<'_>) {}
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

enum Action {
    Send {
        to: NodeId,
        msg: Message,
        after: Time,
    },
    Timer {
        after: Time,
        timer: Timer,
    },
}

/// Handler-side view of the simulator.
pub struct Ctx<'a> {
    now: Time,
    node: NodeId,
    cause: u64,
    rng: &'a mut ChaCha8Rng,
    shards: &'a ShardMap,
    trace: &'a mut EventTrace,
    actions: Vec<Action>,
}

impl<'a> Ctx<'a> {
    pub fn now(&self) -> Time {
        self.now
    }

    pub fn me(&self) -> NodeId {
        self.node
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn shards(&self) -> &ShardMap {
        self.shards
    }

    /// Index of the event being handled.
    pub fn cause(&self) -> u64 {
        self.cause
    }

    pub fn send(&mut self, to: NodeId, msg: Message) {
        self.actions.push(Action::Send { to, msg, after: 0 });
    }

    /// Sends after `delay` of local processing; nothing leaves if the node
    /// crashes first.
    pub fn send_after(&mut self, delay: Time, to: NodeId, msg: Message) {
        self.actions.push(Action::Send {
            to,
            msg,
            after: delay,
        });
    }

    pub fn set_timer(&mut self, after: Time, timer: Timer) {
        self.actions.push(Action::Timer { after, timer });
    }

    pub fn record(&mut self, kind: TraceKind) -> u64 {
        self.trace.push(self.now, self.node, Some(self.cause), kind)
    }
}

enum Event {
    Start {
        node: NodeId,
    },
    Depart {
        from: NodeId,
        to: NodeId,
        msg: Message,
        cause: u64,
        incarnation: u32,
    },
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: Message,
        send: u64,
    },
    Timer {
        node: NodeId,
        timer: Timer,
        cause: u64,
        incarnation: u32,
    },
    Promote {
        node: NodeId,
        shard: ShardId,
        cause: u64,
    },
    Fault(FaultAction),
}

struct Scheduled {
    time: Time,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> Ordering {
        // min-heap on (time, seq)
        (o.time, o.seq).cmp(&(self.time, self.seq))
    }
}

struct Slot {
    process: Box<dyn Process>,
    rng: ChaCha8Rng,
    net_rng: ChaCha8Rng,
    crashed: bool,
    incarnation: u32,
}

const PURPOSE_NET: u64 = 1;
const PURPOSE_PROTO: u64 = 2;

/// Independent stream for (node, purpose) under the root seed.
pub fn stream_rng(seed: u64, node: NodeId, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((node.0 as u64) << 8) | purpose);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Until {
    Time(Time),
    Quiescence,
}

pub struct Simulation {
    config: SimConfig,
    now: Time,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    nodes: BTreeMap<NodeId, Slot>,
    shards: ShardMap,
    partition: Option<Vec<BTreeSet<NodeId>>>,
    trace: EventTrace,
    processed: u64,
}

impl Simulation {
    pub fn new(config: SimConfig, shards: ShardMap) -> Self {
        let mut sim = Self {
            config,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes: BTreeMap::new(),
            shards,
            partition: None,
            trace: EventTrace::default(),
            processed: 0,
        };
        // stable sort keeps file order among equal timestamps
        let mut faults = sim.config.fault_schedule.clone();
        faults.sort_by_key(|f| f.at);
        for f in faults {
            sim.schedule(f.at, Event::Fault(f.action));
        }
        sim
    }

    pub fn add_node(&mut self, id: NodeId, process: Box<dyn Process>) {
        let slot = Slot {
            process,
            rng: stream_rng(self.config.seed, id, PURPOSE_PROTO),
            net_rng: stream_rng(self.config.seed, id, PURPOSE_NET),
            crashed: false,
            incarnation: 0,
        };
        assert!(self.nodes.insert(id, slot).is_none(), "duplicate node {id}");
        self.schedule(self.now, Event::Start { node: id });
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Writes the current replica placement into the trace so an offline
    /// auditor can recover it.
    pub fn record_topology(&mut self) {
        let groups = self.shards.groups().cloned().collect();
        self.trace
            .push(self.now, NodeId(0), None, TraceKind::Topology { groups });
    }

    pub fn trace(&self) -> &EventTrace {
        &self.trace
    }

    pub fn into_trace(self) -> EventTrace {
        self.trace
    }

    pub fn shards(&self) -> &ShardMap {
        &self.shards
    }

    pub fn is_crashed(&self, node: NodeId) -> bool {
        self.nodes.get(&node).is_some_and(|s| s.crashed)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn process<T: Process>(&self, node: NodeId) -> Option<&T> {
        self.nodes.get(&node)?.process.as_any().downcast_ref::<T>()
    }

    pub fn process_mut<T: Process>(&mut self, node: NodeId) -> Option<&mut T> {
        self.nodes
            .get_mut(&node)?
            .process
            .as_any_mut()
            .downcast_mut::<T>()
    }

    pub fn inject(&mut self, fault: FaultEvent) -> Result<(), SimError> {
        if fault.at < self.now {
            return Err(SimError::PastFault {
                at: fault.at,
                now: self.now,
            });
        }
        match &fault.action {
            FaultAction::Crash { node } | FaultAction::Restart { node } => {
                if !self.nodes.contains_key(node) {
                    return Err(SimError::UnknownNode(*node));
                }
            }
            FaultAction::Partition { groups } => {
                if let Some(n) = groups
                    .iter()
                    .flatten()
                    .find(|n| !self.nodes.contains_key(n))
                {
                    return Err(SimError::UnknownNode(*n));
                }
            }
            FaultAction::Heal => {}
        }
        self.schedule(fault.at, Event::Fault(fault.action));
        Ok(())
    }

    fn schedule(&mut self, time: Time, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time,
            seq: self.seq,
            event,
        });
    }

    fn partitioned(&self, a: NodeId, b: NodeId) -> bool {
        let Some(groups) = &self.partition else {
            return false;
        };
        let group_of = |n: NodeId| {
            groups
                .iter()
                .position(|g| g.contains(&n))
                .unwrap_or(usize::MAX)
        };
        group_of(a) != group_of(b)
    }

    /// Processes events up to and including time `t`, or until the queue
    /// drains.
    pub fn run_until(&mut self, until: Until) -> Result<&EventTrace, SimError> {
        while let Some(top) = self.queue.peek() {
            if let Until::Time(t) = until {
                if top.time > t {
                    self.now = t;
                    break;
                }
            }
            let Scheduled { time, event, .. } = self.queue.pop().expect("peeked");
            self.now = time;
            self.processed += 1;
            if self.processed > self.config.max_events {
                return Err(SimError::EventLimit(self.config.max_events));
            }
            self.process_event(event);
        }
        if let Until::Time(t) = until {
            self.now = self.now.max(t);
        }
        Ok(&self.trace)
    }

    fn process_event(&mut self, event: Event) {
        match event {
            Event::Start { node } => {
                let idx = self.trace.push(
                    self.now,
                    node,
                    None,
                    TraceKind::Timer {
                        timer: "start".into(),
                        tid: None,
                    },
                );
                self.dispatch(node, idx, |p, ctx| p.on_start(ctx));
            }
            Event::Depart {
                from,
                to,
                msg,
                cause,
                incarnation,
            } => {
                let alive = self
                    .nodes
                    .get(&from)
                    .is_some_and(|s| !s.crashed && s.incarnation == incarnation);
                if alive {
                    self.transmit(from, to, msg, cause);
                }
            }
            Event::Deliver {
                from,
                to,
                msg,
                send,
            } => {
                let Some(slot) = self.nodes.get(&to) else {
                    return;
                };
                let kind: Cow<'static, str> = msg.kind().into();
                let tid = msg.tid();
                if slot.crashed {
                    self.trace.push(
                        self.now,
                        to,
                        Some(send),
                        TraceKind::Discard {
                            from,
                            send,
                            msg: kind,
                            tid,
                        },
                    );
                    return;
                }
                let idx = self.trace.push(
                    self.now,
                    to,
                    Some(send),
                    TraceKind::Deliver {
                        from,
                        send,
                        msg: kind,
                        tid,
                    },
                );
                self.dispatch(to, idx, move |p, ctx| p.on_message(ctx, from, msg));
            }
            Event::Timer {
                node,
                timer,
                cause,
                incarnation,
            } => {
                let live = self
                    .nodes
                    .get(&node)
                    .is_some_and(|s| !s.crashed && s.incarnation == incarnation);
                if !live {
                    return;
                }
                let idx = self.trace.push(
                    self.now,
                    node,
                    Some(cause),
                    TraceKind::Timer {
                        timer: timer.name().into(),
                        tid: timer.tid(),
                    },
                );
                self.dispatch(node, idx, move |p, ctx| p.on_timer(ctx, timer));
            }
            Event::Promote { node, shard, cause } => {
                if self.is_crashed(node) {
                    return;
                }
                self.dispatch(node, cause, move |p, ctx| p.on_promoted(ctx, shard));
            }
            Event::Fault(action) => self.apply_fault(action),
        }
    }

    fn apply_fault(&mut self, action: FaultAction) {
        match action {
            FaultAction::Crash { node } => {
                let Some(slot) = self.nodes.get_mut(&node) else {
                    return;
                };
                if slot.crashed {
                    return;
                }
                slot.crashed = true;
                let idx = self.trace.push(self.now, node, None, TraceKind::Crash);
                for (shard, leader, term) in self.shards.on_crash(node) {
                    let li = self.trace.push(
                        self.now,
                        leader,
                        Some(idx),
                        TraceKind::LeaderChange {
                            shard,
                            leader,
                            term,
                        },
                    );
                    self.schedule(
                        self.now,
                        Event::Promote {
                            node: leader,
                            shard,
                            cause: li,
                        },
                    );
                }
            }
            FaultAction::Restart { node } => {
                let Some(slot) = self.nodes.get_mut(&node) else {
                    return;
                };
                if !slot.crashed {
                    return;
                }
                slot.crashed = false;
                slot.incarnation += 1;
                self.shards.on_restart(node);
                let idx = self.trace.push(self.now, node, None, TraceKind::Restart);
                self.dispatch(node, idx, |p, ctx| p.on_restart(ctx));
            }
            FaultAction::Partition { groups } => {
                self.trace.push(
                    self.now,
                    NodeId(0),
                    None,
                    TraceKind::Partition {
                        groups: groups.clone(),
                    },
                );
                self.partition = Some(
                    groups
                        .into_iter()
                        .map(|g| g.into_iter().collect())
                        .collect(),
                );
            }
            FaultAction::Heal => {
                self.trace.push(self.now, NodeId(0), None, TraceKind::Heal);
                self.partition = None;
            }
        }
    }

    fn dispatch(
        &mut self,
        node: NodeId,
        cause: u64,
        f: impl FnOnce(&mut dyn Process, &mut Ctx<'_>),
    ) {
        let now = self.now;
        let slot = self.nodes.get_mut(&node).expect("dispatch to known node");
        let incarnation = slot.incarnation;
        let mut ctx = Ctx {
            now,
            node,
            cause,
            rng: &mut slot.rng,
            shards: &self.shards,
            trace: &mut self.trace,
            actions: Vec::new(),
        };
        f(slot.process.as_mut(), &mut ctx);
        let actions = ctx.actions;
        for a in actions {
            match a {
                Action::Send { to, msg, after: 0 } => self.transmit(node, to, msg, cause),
                Action::Send { to, msg, after } => self.schedule(
                    now + after,
                    Event::Depart {
                        from: node,
                        to,
                        msg,
                        cause,
                        incarnation,
                    },
                ),
                Action::Timer { after, timer } => self.schedule(
                    now + after,
                    Event::Timer {
                        node,
                        timer,
                        cause,
                        incarnation,
                    },
                ),
            }
        }
    }

    fn transmit(&mut self, from: NodeId, to: NodeId, msg: Message, cause: u64) {
        let dropped = if self.partitioned(from, to) {
            Some(DropReason::Partition)
        } else {
            let rate = self.config.drop_rate;
            let slot = self.nodes.get_mut(&from).expect("sender exists");
            (rate > 0.0 && slot.net_rng.gen_bool(rate.min(1.0))).then_some(DropReason::Random)
        };
        let deliver_at = match dropped {
            Some(_) => None,
            None => {
                let slot = self.nodes.get_mut(&from).expect("sender exists");
                Some(self.now + self.config.one_way_delay.sample(&mut slot.net_rng))
            }
        };
        let kind = TraceKind::Send {
            to,
            msg: msg.kind().into(),
            tid: msg.tid(),
            deliver_at,
            dropped,
            message: self.config.record_messages.then(|| Box::new(msg.clone())),
        };
        let send = self.trace.push(self.now, from, Some(cause), kind);
        if let Some(at) = deliver_at {
            self.schedule(
                at,
                Event::Deliver {
                    from,
                    to,
                    msg,
                    send,
                },
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{ReplicaGroup, ShardMap};

    /// Replies to every ping and counts deliveries.
    struct Echo {
        seen: u32,
        ping_at_start: Option<NodeId>,
    }

    impl Process for Echo {
        fn on_start(&mut self, ctx: &mut Ctx<'_>) {
            if let Some(to) = self.ping_at_start {
                ctx.send(to, Message::DecisionApplied { tid: TxnId(1) });
            }
        }
        fn on_message(&mut self, ctx: &mut Ctx<'_>, from: NodeId, msg: Message) {
            self.seen += 1;
            if let Message::DecisionApplied { tid } = msg {
                if tid.0 < 20 {
                    ctx.send(
                        from,
                        Message::DecisionApplied {
                            tid: TxnId(tid.0 + 1),
                        },
                    );
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

    fn map() -> ShardMap {
        ShardMap::from_groups([ReplicaGroup::new(ShardId(0), vec![NodeId(1), NodeId(2)])])
    }

    fn pair(cfg: SimConfig) -> Simulation {
        let mut sim = Simulation::new(cfg, map());
        sim.add_node(
            NodeId(1),
            Box::new(Echo {
                seen: 0,
                ping_at_start: Some(NodeId(2)),
            }),
        );
        sim.add_node(
            NodeId(2),
            Box::new(Echo {
                seen: 0,
                ping_at_start: None,
            }),
        );
        sim
    }

    #[test]
    fn empty_system_has_empty_trace() {
        let mut sim = Simulation::new(SimConfig::default(), map());
        assert!(sim.run_until(Until::Quiescence).unwrap().is_empty());
    }

    #[test]
    fn constant_delay_delivery_time() {
        let mut sim = pair(SimConfig::default());
        sim.run_until(Until::Quiescence).unwrap();
        let first = sim
            .trace()
            .iter()
            .find(|e| matches!(e.kind, TraceKind::Deliver { .. }))
            .unwrap();
        assert_eq!(first.time, 50);
    }

    #[test]
    fn drop_rate_one_never_delivers() {
        let mut sim = pair(SimConfig {
            drop_rate: 1.0,
            ..Default::default()
        });
        sim.run_until(Until::Quiescence).unwrap();
        assert!(!sim
            .trace()
            .iter()
            .any(|e| matches!(e.kind, TraceKind::Deliver { .. })));
        assert_eq!(sim.process::<Echo>(NodeId(2)).unwrap().seen, 0);
    }

    #[test]
    fn send_to_crashed_node_is_discarded() {
        let mut sim = pair(SimConfig::default());
        sim.inject(FaultEvent {
            at: 0,
            action: FaultAction::Crash { node: NodeId(2) },
        })
        .unwrap();
        sim.run_until(Until::Quiescence).unwrap();
        assert!(sim
            .trace()
            .iter()
            .any(|e| matches!(e.kind, TraceKind::Discard { .. })));
        assert_eq!(sim.process::<Echo>(NodeId(2)).unwrap().seen, 0);
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = SimConfig {
            seed: 9,
            one_way_delay: DelayDist::Uniform { lo: 10, hi: 90 },
            drop_rate: 0.1,
            ..Default::default()
        };
        let run = || {
            let mut sim = pair(cfg.clone());
            sim.run_until(Until::Quiescence).unwrap();
            sim.into_trace().to_jsonl()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn crashed_node_runs_no_handlers_after_crash() {
        let mut sim = pair(SimConfig::default());
        sim.inject(FaultEvent {
            at: 420,
            action: FaultAction::Crash { node: NodeId(1) },
        })
        .unwrap();
        sim.run_until(Until::Quiescence).unwrap();
        let crash_at = sim
            .trace()
            .iter()
            .find(|e| e.kind == TraceKind::Crash)
            .unwrap()
            .time;
        for e in sim
            .trace()
            .iter()
            .filter(|e| e.node == NodeId(1) && e.time > crash_at)
        {
            assert!(!matches!(
                e.kind,
                TraceKind::Deliver { .. } | TraceKind::Send { .. } | TraceKind::Timer { .. }
            ));
        }
    }

    #[test]
    fn partition_blocks_cross_group_sends() {
        let mut sim = pair(SimConfig::default());
        sim.inject(FaultEvent {
            at: 0,
            action: FaultAction::Partition {
                groups: vec![vec![NodeId(1)], vec![NodeId(2)]],
            },
        })
        .unwrap();
        sim.run_until(Until::Quiescence).unwrap();
        assert!(sim.trace().iter().any(|e| matches!(
            e.kind,
            TraceKind::Send {
                dropped: Some(DropReason::Partition),
                ..
            }
        )));
    }

    #[test]
    fn unknown_fault_target_rejected() {
        let mut sim = pair(SimConfig::default());
        let err = sim.inject(FaultEvent {
            at: 0,
            action: FaultAction::Crash { node: NodeId(77) },
        });
        assert_eq!(err, Err(SimError::UnknownNode(NodeId(77))));
    }

    #[test]
    fn event_limit_aborts_run() {
        let mut sim = pair(SimConfig {
            max_events: 5,
            ..Default::default()
        });
        assert_eq!(
            sim.run_until(Until::Quiescence).unwrap_err(),
            SimError::EventLimit(5)
        );
    }

    #[test]
    fn fault_schedule_parses_and_formats() {
        let text = "# comment\n50000000 crash 3\n100000000 partition 1,2|3,4,5\n120000000 heal\n130000000 restart n3\n";
        let events = parse_fault_schedule(text).unwrap();
        assert_eq!(events.len(), 4);
        assert_eq!(
            events[0],
            FaultEvent {
                at: 50_000_000,
                action: FaultAction::Crash { node: NodeId(3) }
            }
        );
        assert_eq!(
            parse_fault_schedule(&format_fault_schedule(&events)).unwrap(),
            events
        );
        assert!(parse_fault_schedule("10 explode 3").is_err());
        assert!(parse_fault_schedule("x crash 3").is_err());
    }
}
