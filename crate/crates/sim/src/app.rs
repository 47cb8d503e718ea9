//! Simulated node application: the ordering app plus fault hooks.

use std::sync::{Arc, Mutex};

use bftorder::{
    AppError, Application, Decision, Digest, NodeId, Proposal, Reconfig, Request, RequestId, Signature, SyncOutcome,
};
use bftorder_ordering::{Block, BlockSource, BlockStore, OrderingApp, Transaction};
use bytes::Bytes;

/// Transactions a censoring leader leaves out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Censor {
    /// Everything signed by this client key.
    Client(Bytes),
    Tx(Digest),
}

impl Censor {
    fn hits(&self, request: &Request) -> bool {
        match self {
            Censor::Tx(id) => request.id() == *id,
            Censor::Client(key) => Transaction::decode(request.payload()).is_ok_and(|tx| tx.submitter == *key),
        }
    }
}

pub struct SimApp {
    pub inner: OrderingApp,
    censor: Option<Censor>,
}

impl SimApp {
    pub fn new(inner: OrderingApp, censor: Option<Censor>) -> Self {
        Self { inner, censor }
    }
}

impl Application for SimApp {
    fn assemble(&mut self, metadata: &[u8], requests: &[Request]) -> Proposal {
        match &self.censor {
            Some(censor) => {
                let kept: Vec<Request> = requests.iter().filter(|r| !censor.hits(r)).cloned().collect();
                self.inner.assemble(metadata, &kept)
            }
            None => self.inner.assemble(metadata, requests),
        }
    }

    fn verify_proposal(&mut self, proposal: &Proposal) -> Result<(), AppError> {
        self.inner.verify_proposal(proposal)
    }

    fn requests_in(&self, proposal: &Proposal) -> Vec<RequestId> {
        self.inner.requests_in(proposal)
    }

    fn sign(&self, digest: &Digest, message: Bytes) -> Signature {
        self.inner.sign(digest, message)
    }

    fn verify_signature(&self, signature: &Signature, digest: &Digest) -> Result<(), AppError> {
        self.inner.verify_signature(signature, digest)
    }

    fn verify_request(&self, payload: &[u8]) -> Result<(), AppError> {
        self.inner.verify_request(payload)
    }

    fn deliver(&mut self, decision: &Decision) -> Reconfig {
        self.inner.deliver(decision)
    }

    fn sync(&mut self) -> SyncOutcome {
        self.inner.sync()
    }
}

/// What a node exposes to peers pulling blocks. Serves nothing while the
/// node is down.
#[derive(Default)]
pub struct NodeSource {
    store: Mutex<Option<BlockStore>>,
    forge: bool,
}

impl NodeSource {
    pub fn new(forge: bool) -> Self {
        Self {
            store: Mutex::new(None),
            forge,
        }
    }

    pub fn set(&self, store: Option<BlockStore>) {
        *self.store.lock().expect("source lock") = store;
    }
}

/// Same header chaining and signatures, different payload.
pub fn forge(block: &Block) -> Block {
    let mut data = block.data.clone();
    data.push(Bytes::from(format!("forged/{}", block.number())));
    let mut forged = Block::new(block.number(), block.header.previous_hash, data, Default::default());
    forged.metadata = block.metadata.clone();
    forged.signatures = block.signatures.clone();
    forged
}

impl BlockSource for NodeSource {
    fn height(&self) -> u64 {
        self.store.lock().expect("source lock").as_ref().map_or(0, BlockStore::height)
    }

    fn block(&self, number: u64) -> Option<Block> {
        let block = self.store.lock().expect("source lock").as_ref()?.block(number)?;
        Some(if self.forge && number > 0 { forge(&block) } else { block })
    }
}

/// Sync peers of `id`, starting with the node after it.
pub fn peers_of(id: NodeId, sources: &[(NodeId, Arc<NodeSource>)]) -> Vec<(NodeId, Arc<dyn BlockSource>)> {
    let start = sources.iter().position(|(n, _)| *n > id).unwrap_or(0);
    sources[start..]
        .iter()
        .chain(&sources[..start])
        .filter(|(n, _)| *n != id)
        .map(|(n, s)| (*n, s.clone() as Arc<dyn BlockSource>))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peers_rotate_from_the_next_node() {
        let sources: Vec<_> = (0..4).map(|i| (NodeId(i), Arc::new(NodeSource::new(false)))).collect();
        let order: Vec<u64> = peers_of(NodeId(2), &sources).iter().map(|(n, _)| n.0).collect();
        assert_eq!(order, vec![3, 0, 1]);
        let order: Vec<u64> = peers_of(NodeId(3), &sources).iter().map(|(n, _)| n.0).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }
}
