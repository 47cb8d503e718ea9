//! The contract between the consensus library and the application hosting it.
//!
//! The library owns ordering; everything that depends on what a request or a
//! proposal *means* (block layout, validity, cryptography, durable storage,
//! catching up from peers) is delegated to the application through
//! [`Application`]. All callbacks are invoked serially from the engine's single
//! protocol context.

use bytes::Bytes;

use crate::codec;
use crate::types::{Attestation, Decision, Digest, NodeId, Proposal, Reconfig, Request, RequestId, Signature};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AppError {
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("unauthorized submitter")]
    Unauthorized,
    #[error("request already delivered")]
    Duplicate,
    #[error("invalid transaction: {0}")]
    InvalidTransaction(String),
    #[error("previous hash does not match the local chain head")]
    BadPredecessor,
    #[error("wrong number: expected {expected}, got {got}")]
    WrongNumber { expected: u64, got: u64 },
    #[error("unknown signer {0}")]
    UnknownSigner(NodeId),
    #[error("signature verification failed")]
    BadSignature,
    #[error("{0}")]
    Other(String),
}

/// Result of [`Application::sync`].
#[derive(Debug, Clone, Default)]
pub struct SyncOutcome {
    /// The most recent decision now stored locally (`None` at genesis).
    pub latest: Option<Decision>,
    /// Net configuration effect of everything pulled.
    pub reconfig: Reconfig,
}

pub trait Application {
    /// Called on the leader with a non-empty batch. The returned proposal must
    /// embed `metadata` verbatim. Requests left out stay queued for a later batch.
    fn assemble(&mut self, metadata: &[u8], requests: &[Request]) -> Proposal;

    /// Called on a follower for a proposal received from the leader. The error
    /// names the first violated rule.
    fn verify_proposal(&mut self, proposal: &Proposal) -> Result<(), AppError>;

    /// Identities of the requests a proposal carries, so the pool can prune them.
    fn requests_in(&self, proposal: &Proposal) -> Vec<RequestId>;

    /// Signs `digest` together with `message`.
    fn sign(&self, digest: &Digest, message: Bytes) -> Signature;

    /// Commit-phase signature over a proposal.
    fn sign_proposal(&self, proposal: &Proposal) -> Signature {
        self.sign(&proposal.digest(), Attestation::Commit.to_bytes())
    }

    /// Checks `signature` against its signer's configured key, over `digest`
    /// and the signature's own attested message.
    fn verify_signature(&self, signature: &Signature, digest: &Digest) -> Result<(), AppError>;

    /// Re-validates a client request (forwarded requests, and the whole pool
    /// after a reconfiguration).
    fn verify_request(&self, payload: &[u8]) -> Result<(), AppError>;

    /// Stores a decision durably before returning and reports whether it
    /// changed the configuration.
    fn deliver(&mut self, decision: &Decision) -> Reconfig;

    /// Pulls and stores missing decisions from peers.
    fn sync(&mut self) -> SyncOutcome;
}

/// Application hooks for hosts that have no blocks, no validation and no
/// cryptography: proposals are the encoded request list, every check passes
/// and signatures are placeholders. Decisions are kept in memory.
#[derive(Debug, Default)]
pub struct NoopApp {
    id: NodeId,
    delivered: Vec<Decision>,
}

impl NoopApp {
    pub fn new(id: NodeId) -> Self {
        Self {
            id,
            delivered: Vec::new(),
        }
    }

    pub fn delivered(&self) -> &[Decision] {
        &self.delivered
    }

    /// Requests carried by a proposal built by [`NoopApp::assemble`].
    pub fn payloads(proposal: &Proposal) -> Vec<Bytes> {
        codec::decode(&proposal.payload).unwrap_or_default()
    }
}

impl Application for NoopApp {
    fn assemble(&mut self, metadata: &[u8], requests: &[Request]) -> Proposal {
        let payloads: Vec<&Bytes> = requests.iter().map(Request::payload).collect();
        Proposal::new(Bytes::new(), codec::encode(&payloads), Bytes::copy_from_slice(metadata))
    }

    fn verify_proposal(&mut self, _proposal: &Proposal) -> Result<(), AppError> {
        Ok(())
    }

    fn requests_in(&self, proposal: &Proposal) -> Vec<RequestId> {
        Self::payloads(proposal).iter().map(|p| Digest::of(p)).collect()
    }

    fn sign(&self, digest: &Digest, message: Bytes) -> Signature {
        Signature {
            signer: self.id,
            value: Bytes::copy_from_slice(digest.as_bytes()),
            message: Some(message),
        }
    }

    fn verify_signature(&self, _signature: &Signature, _digest: &Digest) -> Result<(), AppError> {
        Ok(())
    }

    fn verify_request(&self, _payload: &[u8]) -> Result<(), AppError> {
        Ok(())
    }

    fn deliver(&mut self, decision: &Decision) -> Reconfig {
        let seq = decision.sequence();
        if !self.delivered.iter().any(|d| d.sequence() == seq) {
            self.delivered.push(decision.clone());
        }
        Reconfig::Unchanged
    }

    fn sync(&mut self) -> SyncOutcome {
        SyncOutcome {
            latest: self.delivered.last().cloned(),
            reconfig: Reconfig::Unchanged,
        }
    }
}
