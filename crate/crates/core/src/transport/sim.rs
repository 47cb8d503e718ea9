//! Deterministic in-memory network.
//!
//! Latency per ordered pair is `base + uniform(0, jitter)` drawn from a seeded
//! generator, optionally preceded by serialization on the sender's uplink.
//! Deliveries are ordered by `(arrival time, sender, send counter)`, so a given
//! seed and send sequence always produce the same delivery sequence.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::message::{ConsensusMessage, Envelope, MessageKind};
use crate::types::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Link {
    pub base: Duration,
    pub jitter: Duration,
}

impl Link {
    pub fn fixed(base: Duration) -> Self {
        Self {
            base,
            jitter: Duration::ZERO,
        }
    }
}

/// Drops matching messages with some probability, optionally only within a
/// time window. `None` fields match anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRule {
    pub from: Option<NodeId>,
    pub to: Option<NodeId>,
    pub kind: Option<MessageKind>,
    pub probability: f64,
    pub window: Option<(Duration, Duration)>,
}

/// Nodes in different groups cannot talk during `[start, end)`. Nodes in no
/// group are unaffected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<BTreeSet<NodeId>>,
    pub start: Duration,
    pub end: Duration,
}

impl Partition {
    fn separates(&self, a: NodeId, b: NodeId, now: Duration) -> bool {
        if now < self.start || now >= self.end {
            return false;
        }
        let group_of = |n: NodeId| self.groups.iter().position(|g| g.contains(&n));
        matches!((group_of(a), group_of(b)), (Some(x), Some(y)) if x != y)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NetworkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub bytes_sent: u64,
    pub by_kind: BTreeMap<String, u64>,
}

#[derive(Debug, PartialEq, Eq)]
struct InFlight {
    at: Duration,
    from: NodeId,
    counter: u64,
    to: NodeId,
    message: ConsensusMessage,
}

impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.from, self.counter).cmp(&(other.at, other.from, other.counter))
    }
}

impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
pub struct SimNetwork {
    rng: ChaCha8Rng,
    default_link: Link,
    links: BTreeMap<(NodeId, NodeId), Link>,
    /// Keep per-pair FIFO order even when jitter would reorder.
    fifo: bool,
    /// Sender uplink capacity in bytes per second; unlimited when `None`.
    uplink: Option<u64>,
    uplink_free_at: BTreeMap<NodeId, Duration>,
    last_arrival: BTreeMap<(NodeId, NodeId), Duration>,
    drops: Vec<DropRule>,
    partitions: Vec<Partition>,
    queue: BinaryHeap<Reverse<InFlight>>,
    counter: u64,
    stats: NetworkStats,
}

impl SimNetwork {
    pub fn new(seed: u64, default_link: Link) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            default_link,
            links: BTreeMap::new(),
            fifo: true,
            uplink: None,
            uplink_free_at: BTreeMap::new(),
            last_arrival: BTreeMap::new(),
            drops: Vec::new(),
            partitions: Vec::new(),
            queue: BinaryHeap::new(),
            counter: 0,
            stats: NetworkStats::default(),
        }
    }

    pub fn set_link(&mut self, from: NodeId, to: NodeId, link: Link) {
        self.links.insert((from, to), link);
    }

    pub fn set_fifo(&mut self, fifo: bool) {
        self.fifo = fifo;
    }

    pub fn set_uplink(&mut self, bytes_per_sec: Option<u64>) {
        self.uplink = bytes_per_sec;
    }

    pub fn add_drop_rule(&mut self, rule: DropRule) {
        self.drops.push(rule);
    }

    pub fn add_partition(&mut self, partition: Partition) {
        self.partitions.push(partition);
    }

    pub fn link(&self, from: NodeId, to: NodeId) -> Link {
        self.links.get(&(from, to)).copied().unwrap_or(self.default_link)
    }

    pub fn stats(&self) -> &NetworkStats {
        &self.stats
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    /// Schedules `message` for delivery. Returns `false` if it was dropped.
    pub fn send(&mut self, now: Duration, from: NodeId, to: NodeId, message: ConsensusMessage) -> bool {
        let size = message.wire_size();
        self.stats.sent += 1;
        self.stats.bytes_sent += size;
        *self.stats.by_kind.entry(message.kind().name().to_string()).or_default() += 1;

        let mut departs = now;
        if let Some(bps) = self.uplink.filter(|b| *b > 0) {
            let free = self.uplink_free_at.entry(from).or_default();
            let start = (*free).max(now);
            let transmit = Duration::from_secs_f64(size as f64 / bps as f64);
            *free = start + transmit;
            departs = *free;
        }

        if self.partitions.iter().any(|p| p.separates(from, to, now)) {
            self.stats.dropped += 1;
            return false;
        }
        let kind = message.kind();
        let mut dropped = false;
        for rule in &self.drops {
            let matches = rule.from.map_or(true, |f| f == from)
                && rule.to.map_or(true, |t| t == to)
                && rule.kind.map_or(true, |k| k == kind)
                && rule.window.map_or(true, |(s, e)| now >= s && now < e);
            // Draw for every matching rule so outcomes do not depend on rule order.
            if matches && self.rng.gen_bool(rule.probability.clamp(0.0, 1.0)) {
                dropped = true;
            }
        }
        if dropped {
            self.stats.dropped += 1;
            return false;
        }

        let link = self.link(from, to);
        let jitter = if link.jitter.is_zero() {
            Duration::ZERO
        } else {
            Duration::from_nanos(self.rng.gen_range(0..=link.jitter.as_nanos() as u64))
        };
        let mut at = departs + link.base + jitter;
        if self.fifo {
            let last = self.last_arrival.entry((from, to)).or_default();
            at = at.max(*last);
            *last = at;
        }
        self.counter += 1;
        self.queue.push(Reverse(InFlight {
            at,
            from,
            counter: self.counter,
            to,
            message,
        }));
        true
    }

    pub fn next_arrival(&self) -> Option<Duration> {
        self.queue.peek().map(|Reverse(m)| m.at)
    }

    /// Next message arriving at or before `until`, with its arrival time and
    /// destination.
    pub fn pop_due(&mut self, until: Duration) -> Option<(Duration, NodeId, Envelope)> {
        if self.next_arrival()? > until {
            return None;
        }
        let Reverse(m) = self.queue.pop()?;
        self.stats.delivered += 1;
        Some((
            m.at,
            m.to,
            Envelope {
                sender: m.from,
                message: m.message,
            },
        ))
    }
}
