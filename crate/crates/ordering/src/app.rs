//! The ordering node's side of the consensus contract.

use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use bftorder::{
    AppError, Application, Decision, Digest, NodeId, Proposal, ProposalMeta, Reconfig, Request, RequestId,
    Signature, SyncOutcome,
};
use bytes::Bytes;
use tracing::{info, warn};

use crate::block::{validate_block, Block, BlockError};
use crate::crypto::{self, Keypair};
use crate::store::{BlockStore, StoreError};
use crate::tx::{ChannelConfig, Transaction, TxError};

/// Somewhere blocks can be pulled from during sync.
pub trait BlockSource: Send + Sync {
    fn height(&self) -> u64;
    fn block(&self, number: u64) -> Option<Block>;
}

impl BlockSource for BlockStore {
    fn height(&self) -> u64 {
        BlockStore::height(self)
    }

    fn block(&self, number: u64) -> Option<Block> {
        BlockStore::block(self, number)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("block {number} carries an unreadable config transaction: {error}")]
    Config { number: u64, error: TxError },
}

impl From<TxError> for AppError {
    fn from(e: TxError) -> Self {
        match e {
            TxError::Malformed(m) => AppError::Malformed(m),
            TxError::Signature(_) => AppError::BadSignature,
            TxError::BadConfig(m) => AppError::InvalidTransaction(m),
        }
    }
}

impl From<BlockError> for AppError {
    fn from(e: BlockError) -> Self {
        match e {
            BlockError::WrongNumber { expected, got } => AppError::WrongNumber { expected, got },
            BlockError::BadPredecessor => AppError::BadPredecessor,
            BlockError::BadMetadata { number, sequence } => AppError::WrongNumber {
                expected: number,
                got: sequence,
            },
            other => AppError::Malformed(other.to_string()),
        }
    }
}

/// Config transaction of `block`, if the block holds one.
pub fn config_of(block: &Block) -> Option<Result<ChannelConfig, TxError>> {
    let tx = block.data.first().and_then(|b| Transaction::decode(b).ok())?;
    tx.is_config().then(|| tx.channel_config())
}

/// Latest configuration recorded in the store: genesis or the newest config block.
pub fn current_config(store: &BlockStore) -> Result<ChannelConfig, SetupError> {
    let blocks = store.blocks();
    for block in blocks.iter().rev() {
        if let Some(config) = config_of(block) {
            return config.map_err(|error| SetupError::Config {
                number: block.number(),
                error,
            });
        }
    }
    unreachable!("genesis always carries a config transaction")
}

pub fn genesis_block(config: &ChannelConfig, admin: &Keypair) -> Block {
    Block::genesis(Transaction::config(config, admin).encode())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppStats {
    pub proposals_rejected: u64,
    pub synced_blocks: u64,
    pub sync_rejections: u64,
}

/// Signature cache bound; cleared when full.
const VERIFIED_CACHE: usize = 1 << 16;

pub struct OrderingApp {
    id: NodeId,
    key: Keypair,
    store: BlockStore,
    config: ChannelConfig,
    peers: Vec<(NodeId, Arc<dyn BlockSource>)>,
    next_peer: usize,
    verified: Mutex<HashSet<Digest>>,
    stats: AppStats,
}

impl OrderingApp {
    pub fn new(id: NodeId, key: Keypair, store: BlockStore) -> Result<Self, SetupError> {
        let config = current_config(&store)?;
        Ok(Self {
            id,
            key,
            store,
            config,
            peers: Vec::new(),
            next_peer: 0,
            verified: Mutex::default(),
            stats: AppStats::default(),
        })
    }

    /// Peers to pull from during sync, tried in rotation.
    pub fn with_peers(mut self, peers: Vec<(NodeId, Arc<dyn BlockSource>)>) -> Self {
        self.peers = peers;
        self
    }

    pub fn set_peers(&mut self, peers: Vec<(NodeId, Arc<dyn BlockSource>)>) {
        self.peers = peers;
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn stats(&self) -> &AppStats {
        &self.stats
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    /// Latest stored decision, `None` at genesis.
    pub fn last_decision(&self) -> Option<Decision> {
        let last = self.store.last();
        (last.number() > 0).then(|| last.decision())
    }

    fn check_signature(&self, tx: &Transaction, id: Digest) -> Result<(), AppError> {
        if self.verified.lock().expect("cache lock").contains(&id) {
            return Ok(());
        }
        tx.verify_signature()?;
        let mut verified = self.verified.lock().expect("cache lock");
        if verified.len() >= VERIFIED_CACHE {
            verified.clear();
        }
        verified.insert(id);
        Ok(())
    }

    fn check_authorized(&self, tx: &Transaction) -> Result<(), AppError> {
        let allowed = if tx.is_config() {
            self.config.is_admin(&tx.submitter)
        } else {
            self.config.is_client(&tx.submitter)
        };
        if !allowed {
            return Err(AppError::Unauthorized);
        }
        if tx.is_config() {
            tx.channel_config()?;
        }
        Ok(())
    }

    /// Structure, authorization, signature and ledger dedupe.
    pub fn filter(&self, payload: &[u8]) -> Result<Transaction, AppError> {
        let tx = Transaction::decode(payload)?;
        self.check_authorized(&tx)?;
        let id = Digest::of(payload);
        self.check_signature(&tx, id)?;
        if self.store.contains_tx(&id) {
            return Err(AppError::Duplicate);
        }
        Ok(tx)
    }

    fn verify_signature_with(&self, signature: &Signature, digest: &Digest) -> Result<(), AppError> {
        let key = self
            .config
            .consensus
            .key_of(signature.signer)
            .ok_or(AppError::UnknownSigner(signature.signer))?;
        crypto::verify_digest(key, signature, digest).map_err(|_| AppError::BadSignature)
    }

    fn apply(&mut self, block: &Block) -> Reconfig {
        match config_of(block) {
            Some(Ok(config)) => {
                info!(node = %self.id, block = block.number(), n = config.consensus.n, "config block committed");
                self.config = config;
                Reconfig::Changed(self.config.consensus.clone())
            }
            Some(Err(e)) => {
                warn!(node = %self.id, block = block.number(), error = %e, "unreadable config block");
                Reconfig::Unchanged
            }
            None => Reconfig::Unchanged,
        }
    }

    /// Pulls blocks above the local height from peers, validating each against
    /// the configuration active at that point, rotating to the next peer when
    /// one serves something invalid or runs dry.
    pub fn sync_from_peers(&mut self) -> SyncOutcome {
        let mut reconfig = Reconfig::Unchanged;
        let target = self.peers.iter().map(|(_, p)| p.height()).max().unwrap_or(0);
        let mut attempts = 0;
        while self.store.height() < target && attempts < self.peers.len() {
            let (peer_id, peer) = self.peers[self.next_peer % self.peers.len()].clone();
            let mut progressed = false;
            loop {
                let number = self.store.height() + 1;
                let Some(block) = peer.block(number) else { break };
                let previous = self.store.last().header;
                let valid = validate_block(&block, &previous, &self.config.consensus, |s, d| {
                    self.verify_signature_with(s, d)
                });
                if let Err(e) = valid {
                    warn!(node = %self.id, peer = %peer_id, block = number, error = %e, "peer served an invalid block");
                    self.stats.sync_rejections += 1;
                    break;
                }
                if let Err(e) = self.store.append(block.clone()) {
                    warn!(node = %self.id, block = number, error = %e, "cannot store synced block");
                    break;
                }
                self.stats.synced_blocks += 1;
                progressed = true;
                if let Reconfig::Changed(c) = self.apply(&block) {
                    reconfig = Reconfig::Changed(c);
                }
            }
            if self.store.height() >= target {
                break;
            }
            if !progressed {
                attempts += 1;
            }
            self.next_peer = (self.next_peer + 1) % self.peers.len();
        }
        SyncOutcome {
            latest: self.last_decision(),
            reconfig,
        }
    }
}

impl Application for OrderingApp {
    fn assemble(&mut self, metadata: &[u8], requests: &[Request]) -> Proposal {
        let last = self.store.last();
        let mut data: Vec<Bytes> = Vec::with_capacity(requests.len());
        let mut seen = HashSet::new();
        // A config transaction goes into a block of its own.
        let config = requests
            .iter()
            .find(|r| Transaction::decode(r.payload()).is_ok_and(|tx| tx.is_config()));
        if let Some(config) = config {
            if self.filter(config.payload()).is_ok() {
                data.push(config.payload().clone());
            }
        } else {
            for request in requests {
                if seen.contains(&request.id()) || self.filter(request.payload()).is_err() {
                    continue;
                }
                seen.insert(request.id());
                data.push(request.payload().clone());
            }
        }
        let mut block = Block::new(last.number() + 1, last.hash(), data, ProposalMeta::default());
        block.metadata = Bytes::copy_from_slice(metadata);
        block.proposal()
    }

    fn verify_proposal(&mut self, proposal: &Proposal) -> Result<(), AppError> {
        let result = (|| {
            let block = Block::from_proposal(proposal)?;
            block.check_structure(&self.store.last().header)?;
            if block.data.is_empty() {
                return Err(AppError::Malformed("empty block".into()));
            }
            let mut seen = HashSet::new();
            for (i, payload) in block.data.iter().enumerate() {
                let tx = self
                    .filter(payload)
                    .map_err(|e| AppError::InvalidTransaction(format!("tx {i}: {e}")))?;
                if tx.is_config() && block.data.len() > 1 {
                    return Err(AppError::InvalidTransaction("config transaction not alone in its block".into()));
                }
                if !seen.insert(Digest::of(payload)) {
                    return Err(AppError::InvalidTransaction(format!("tx {i}: repeated in block")));
                }
            }
            Ok(())
        })();
        if result.is_err() {
            self.stats.proposals_rejected += 1;
        }
        result
    }

    fn requests_in(&self, proposal: &Proposal) -> Vec<RequestId> {
        Block::from_proposal(proposal)
            .map(|b| b.data.iter().map(|tx| Digest::of(tx)).collect())
            .unwrap_or_default()
    }

    fn sign(&self, digest: &Digest, message: Bytes) -> Signature {
        self.key.sign_digest(self.id, digest, message)
    }

    fn verify_signature(&self, signature: &Signature, digest: &Digest) -> Result<(), AppError> {
        self.verify_signature_with(signature, digest)
    }

    fn verify_request(&self, payload: &[u8]) -> Result<(), AppError> {
        let tx = Transaction::decode(payload)?;
        self.check_authorized(&tx)?;
        let id = Digest::of(payload);
        self.check_signature(&tx, id)?;
        if self.store.contains_tx(&id) {
            return Err(AppError::Duplicate);
        }
        Ok(())
    }

    fn deliver(&mut self, decision: &Decision) -> Reconfig {
        let block = Block::from_decision(decision).expect("decided proposals were verified as blocks");
        if let Err(e) = self.store.append(block.clone()) {
            // Nothing sensible can continue past a failed or conflicting commit.
            panic!("node {}: cannot commit block {}: {e}", self.id, block.number());
        }
        self.apply(&block)
    }

    fn sync(&mut self) -> SyncOutcome {
        self.sync_from_peers()
    }
}
