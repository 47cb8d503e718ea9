//! A peer that consumes the ledger: full blocks from one provider, verified
//! headers from everyone else, and a monitor deciding when to switch.

use std::collections::BTreeMap;
use std::time::Duration;

use bftorder::{AppError, Digest, NodeId, Signature};
use bftorder_ordering::app::config_of;
use bftorder_ordering::crypto::verify_digest;
use bftorder_ordering::{
    validate_block, Block, BlockStore, ChannelConfig, DeliveryMonitor, MonitorSettings,
};
use serde::{Deserialize, Serialize};

/// Items read from one stream per poll.
const MAX_ITEMS_PER_POLL: u64 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub from: NodeId,
    pub to: NodeId,
    pub at_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerReport {
    pub initial_provider: NodeId,
    pub final_provider: NodeId,
    pub height: u64,
    pub threshold_ms: f64,
    /// When the initial provider started withholding full blocks.
    pub withhold_from_ms: Option<f64>,
    pub switches: Vec<SwitchRecord>,
    pub rejected_items: u64,
}

#[derive(Debug, Clone, Copy)]
struct Withhold {
    from: Duration,
    cap: Option<u64>,
}

impl Withhold {
    /// Highest block the node still serves.
    fn limit(&mut self, now: Duration, height: u64) -> u64 {
        if now < self.from {
            return height;
        }
        *self.cap.get_or_insert(height)
    }
}

pub struct Consumer {
    store: BlockStore,
    config: ChannelConfig,
    monitor: DeliveryMonitor,
    initial_provider: NodeId,
    threshold: Duration,
    header_next: BTreeMap<NodeId, u64>,
    withhold_blocks: BTreeMap<NodeId, Withhold>,
    withhold_headers: BTreeMap<NodeId, Withhold>,
    rejected: u64,
}

fn verifier(config: &ChannelConfig) -> impl Fn(&Signature, &Digest) -> Result<(), AppError> + '_ {
    move |s, d| {
        let key = config.consensus.key_of(s.signer).ok_or(AppError::UnknownSigner(s.signer))?;
        verify_digest(key, s, d).map_err(|_| AppError::BadSignature)
    }
}

impl Consumer {
    pub fn new(genesis: Block, settings: MonitorSettings, nodes: Vec<NodeId>, provider: NodeId, seed: u64) -> Self {
        let config = match config_of(&genesis) {
            Some(Ok(config)) => config,
            _ => panic!("genesis carries the channel config"),
        };
        Self {
            store: BlockStore::in_memory(genesis),
            config,
            monitor: DeliveryMonitor::new(settings, nodes, provider, seed),
            initial_provider: provider,
            threshold: settings.threshold,
            header_next: BTreeMap::new(),
            withhold_blocks: BTreeMap::new(),
            withhold_headers: BTreeMap::new(),
            rejected: 0,
        }
    }

    pub fn withhold_blocks(&mut self, node: NodeId, from: Duration) {
        self.withhold_blocks.insert(node, Withhold { from, cap: None });
    }

    pub fn withhold_headers(&mut self, node: NodeId, from: Duration) {
        self.withhold_headers.insert(node, Withhold { from, cap: None });
    }

    pub fn height(&self) -> u64 {
        self.store.height()
    }

    pub fn provider(&self) -> NodeId {
        self.monitor.full_provider()
    }

    /// One polling round over the nodes' stores (`None` for nodes that are down).
    pub fn poll(&mut self, now: Duration, nodes: &[(NodeId, Option<BlockStore>)]) {
        let provider = self.monitor.full_provider();
        if let Some((_, Some(store))) = nodes.iter().find(|(id, _)| *id == provider) {
            let mut limit = store.height();
            if let Some(w) = self.withhold_blocks.get_mut(&provider) {
                limit = w.limit(now, limit);
            }
            let start = self.store.height() + 1;
            for number in start..=limit.min(start + MAX_ITEMS_PER_POLL) {
                let Some(block) = store.block(number) else { break };
                let previous = self.store.last().header;
                if validate_block(&block, &previous, &self.config.consensus, verifier(&self.config)).is_err() {
                    self.rejected += 1;
                    break;
                }
                if self.store.append(block.clone()).is_err() {
                    break;
                }
                if let Some(Ok(config)) = config_of(&block) {
                    self.config = config;
                }
                self.monitor.on_full_block(number);
            }
        }
        for (id, store) in nodes {
            let Some(store) = store else { continue };
            if *id == provider {
                continue;
            }
            let mut limit = store.height();
            if let Some(w) = self.withhold_headers.get_mut(id) {
                limit = w.limit(now, limit);
            }
            let next = self.header_next.entry(*id).or_insert(1);
            while *next <= limit && *next < self.store.height() + MAX_ITEMS_PER_POLL {
                let Some(block) = store.block(*next) else { break };
                match self
                    .monitor
                    .on_header_item(*id, &block.summary(), &self.config.consensus, verifier(&self.config))
                {
                    Ok(_) => *next += 1,
                    Err(_) => {
                        self.rejected += 1;
                        break;
                    }
                }
            }
        }
        self.monitor.evaluate(now);
    }

    pub fn report(&self) -> ConsumerReport {
        let ms = |d: Duration| d.as_secs_f64() * 1000.0;
        ConsumerReport {
            initial_provider: self.initial_provider,
            final_provider: self.monitor.full_provider(),
            height: self.store.height(),
            threshold_ms: ms(self.threshold),
            withhold_from_ms: self.withhold_blocks.get(&self.initial_provider).map(|w| ms(w.from)),
            switches: self
                .monitor
                .switches()
                .iter()
                .map(|s| SwitchRecord {
                    from: s.from,
                    to: s.to,
                    at_ms: ms(s.at),
                })
                .collect(),
            rejected_items: self.rejected,
        }
    }
}
