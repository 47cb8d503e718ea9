//! Per-node event traces and their on-disk form.
//!
//! A trace directory holds `trace.json` (events, transactions, run metadata)
//! and one `node-<id>/` store export per node with the final block file and
//! signature index.

use std::path::Path;

use bftorder::{Digest, NodeId, Seq, View};
use bftorder_ordering::store::BlockStore;
use bftorder_ordering::Block;
use serde::{Deserialize, Serialize};

pub const TRACE_FILE: &str = "trace.json";

mod hex_digest {
    use bftorder::Digest;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Digest, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(d.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Digest, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(D::Error::custom)?;
        let array: [u8; 32] = bytes.try_into().map_err(|_| D::Error::custom("digest must be 32 bytes"))?;
        Ok(Digest(array))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotePhase {
    Prepare,
    Commit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    /// The node, as leader, sent a PrePrepare.
    Proposed {
        view: View,
        seq: Seq,
        #[serde(with = "hex_digest")]
        digest: Digest,
    },
    Voted {
        phase: VotePhase,
        view: View,
        seq: Seq,
        #[serde(with = "hex_digest")]
        digest: Digest,
    },
    Delivered {
        view: View,
        seq: Seq,
        #[serde(with = "hex_digest")]
        digest: Digest,
    },
    /// The local ledger grew to `height` through sync.
    Synced { height: u64 },
    ViewInstalled { view: View },
    Crashed,
    Restarted { height: u64, wiped: bool },
    Joined { height: u64 },
    Halted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub at_us: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub id: NodeId,
    pub byzantine: bool,
    /// Running, not halted, and a member of the final configuration.
    pub live_at_end: bool,
    pub events: Vec<Event>,
    /// Final ledger, genesis included.
    #[serde(skip)]
    pub blocks: Vec<Block>,
    /// SHA-256 of the final block file.
    #[serde(skip)]
    pub file_digest: Digest,
}

impl NodeTrace {
    pub fn correct(&self) -> bool {
        !self.byzantine
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxRecord {
    pub index: usize,
    #[serde(with = "hex_digest")]
    pub id: Digest,
    pub client: usize,
    pub submitted_us: u64,
    /// Valid and accepted by a correct node, so it must be delivered.
    pub expected: bool,
    pub delivered_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub scenario: String,
    pub seed: u64,
    /// The run ended because the workload finished and live nodes converged,
    /// not because of the duration limit.
    pub completed: bool,
    pub expect_liveness: bool,
    pub nodes: Vec<NodeTrace>,
    pub txs: Vec<TxRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("node {0} store: {1}")]
    Store(NodeId, bftorder_ordering::StoreError),
}

fn node_dir(dir: &Path, id: NodeId) -> std::path::PathBuf {
    dir.join(format!("node-{}", id.0))
}

impl Trace {
    pub fn node(&self, id: NodeId) -> Option<&NodeTrace> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Writes `trace.json` and exports every node's store next to it.
    pub fn write(&self, dir: &Path, stores: &[(NodeId, BlockStore)]) -> Result<(), TraceError> {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::File::create(dir.join(TRACE_FILE))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        for (id, store) in stores {
            store.export(&node_dir(dir, *id)).map_err(|e| TraceError::Store(*id, e))?;
        }
        Ok(())
    }

    /// Reads a trace directory, loading each node's blocks and hashing its
    /// block file as found on disk.
    pub fn read(dir: &Path) -> Result<Self, TraceError> {
        let file = std::fs::File::open(dir.join(TRACE_FILE))?;
        let mut trace: Trace = serde_json::from_reader(std::io::BufReader::new(file))?;
        for node in &mut trace.nodes {
            let path = node_dir(dir, node.id);
            node.blocks = BlockStore::load(&path).map_err(|e| TraceError::Store(node.id, e))?;
            let bytes = std::fs::read(path.join(bftorder_ordering::store::BLOCK_FILE))?;
            node.file_digest = Digest::of(&bytes);
        }
        Ok(trace)
    }
}
