//! Censorship-resistant block consumption.
//!
//! A consuming peer reads full blocks from one provider and header/metadata
//! summaries from every other consenter. Summaries carry the commit quorum,
//! so they cannot be forged; if at least `f` of them stay ahead of the full
//! stream for a whole threshold window, the provider is withholding blocks
//! and gets replaced by a random node among those ahead.

use std::collections::BTreeMap;
use std::time::Duration;

use bftorder::{AppError, Configuration, Digest, NodeId, Signature};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::info;

use crate::block::{BlockError, BlockSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorSettings {
    /// Number of summary streams that must be ahead (the fault bound `f`).
    pub f: usize,
    /// How long they must stay ahead. Default: twice the batch timeout.
    pub threshold: Duration,
    /// How long a replaced provider is not chosen again. Default: one threshold.
    pub quarantine: Duration,
}

impl MonitorSettings {
    pub fn for_config(config: &Configuration) -> Self {
        let threshold = config.batch_timeout * 2;
        Self {
            f: config.f,
            threshold,
            quarantine: threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switch {
    pub from: NodeId,
    pub to: NodeId,
    pub at: Duration,
}

#[derive(Debug)]
pub struct DeliveryMonitor {
    settings: MonitorSettings,
    nodes: Vec<NodeId>,
    full_provider: NodeId,
    full_frontier: u64,
    header_frontiers: BTreeMap<NodeId, u64>,
    lag_started: Option<Duration>,
    quarantined: BTreeMap<NodeId, Duration>,
    rng: ChaCha8Rng,
    switches: Vec<Switch>,
}

impl DeliveryMonitor {
    pub fn new(settings: MonitorSettings, nodes: Vec<NodeId>, full_provider: NodeId, seed: u64) -> Self {
        Self {
            settings,
            nodes,
            full_provider,
            full_frontier: 0,
            header_frontiers: BTreeMap::new(),
            lag_started: None,
            quarantined: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            switches: Vec::new(),
        }
    }

    pub fn full_provider(&self) -> NodeId {
        self.full_provider
    }

    pub fn full_frontier(&self) -> u64 {
        self.full_frontier
    }

    pub fn header_frontier(&self, node: NodeId) -> u64 {
        self.header_frontiers.get(&node).copied().unwrap_or(0)
    }

    pub fn switches(&self) -> &[Switch] {
        &self.switches
    }

    /// A full block (already validated by the consumer) from the current provider.
    pub fn on_full_block(&mut self, number: u64) {
        self.full_frontier = self.full_frontier.max(number);
    }

    /// A summary from `from`. Counted only if its commit quorum verifies and
    /// it advances that stream's frontier.
    pub fn on_header_item<V>(
        &mut self,
        from: NodeId,
        summary: &BlockSummary,
        against: &Configuration,
        verify: V,
    ) -> Result<bool, BlockError>
    where
        V: Fn(&Signature, &Digest) -> Result<(), AppError>,
    {
        let number = summary.header.number;
        if number <= self.header_frontier(from) {
            return Ok(false);
        }
        summary.verify(against, verify)?;
        self.header_frontiers.insert(from, number);
        Ok(true)
    }

    fn ahead(&self) -> Vec<NodeId> {
        self.header_frontiers
            .iter()
            .filter(|(node, height)| **node != self.full_provider && **height > self.full_frontier)
            .map(|(node, _)| *node)
            .collect()
    }

    /// Keeps the provider or replaces it.
    pub fn evaluate(&mut self, now: Duration) -> Option<Switch> {
        self.quarantined.retain(|_, until| *until > now);
        let ahead = self.ahead();
        if ahead.len() < self.settings.f.max(1) {
            self.lag_started = None;
            return None;
        }
        let started = *self.lag_started.get_or_insert(now);
        if now.saturating_sub(started) < self.settings.threshold {
            return None;
        }
        let candidates: Vec<NodeId> = ahead
            .into_iter()
            .filter(|n| !self.quarantined.contains_key(n) && self.nodes.contains(n))
            .collect();
        let to = *candidates.choose(&mut self.rng)?;
        let from = self.full_provider;
        info!(%from, %to, frontier = self.full_frontier, "replacing block provider");
        self.quarantined.insert(from, now + self.settings.quarantine);
        self.full_provider = to;
        self.lag_started = None;
        let switch = Switch { from, to, at: now };
        self.switches.push(switch);
        Some(switch)
    }
}
