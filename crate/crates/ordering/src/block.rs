//! Blocks, their mapping to consensus proposals, and the validation policy.

use bftorder::engine::{verify_decision, CertificateError};
use bftorder::{codec, AppError, Configuration, Decision, Digest, Proposal, ProposalMeta, Seq, Signature, View};
use bytes::Bytes;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub number: u64,
    pub previous_hash: Digest,
    /// Hash of the encoded payload.
    pub data_hash: Digest,
}

impl BlockHeader {
    pub fn hash(&self) -> Digest {
        Digest::of(&self.encode())
    }

    pub fn encode(&self) -> Bytes {
        codec::encode(self).into()
    }
}

/// A block: header, ordered transaction bytes, and consensus metadata (the
/// proposal's view and sequence plus the commit quorum that decided it).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub data: Vec<Bytes>,
    /// Encoded [`ProposalMeta`].
    pub metadata: Bytes,
    pub signatures: Vec<Signature>,
}

/// Header and metadata of a block, without the payload. Enough to check the
/// commit quorum, because the proposal digest covers the payload only
/// through `data_hash`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub header: BlockHeader,
    pub metadata: Bytes,
    pub signatures: Vec<Signature>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BlockError {
    #[error("malformed block: {0}")]
    Malformed(String),
    #[error("expected block {expected}, got {got}")]
    WrongNumber { expected: u64, got: u64 },
    #[error("previous hash does not match the predecessor header")]
    BadPredecessor,
    #[error("data hash does not match the payload")]
    BadDataHash,
    #[error("metadata sequence {sequence} does not match block number {number}")]
    BadMetadata { number: u64, sequence: u64 },
    #[error("commit quorum: {0}")]
    Quorum(#[from] CertificateError),
}

pub fn data_hash(data: &[Bytes]) -> Digest {
    Digest::of(&codec::encode(data))
}

impl Block {
    pub fn new(number: u64, previous_hash: Digest, data: Vec<Bytes>, meta: ProposalMeta) -> Self {
        Self {
            header: BlockHeader {
                number,
                previous_hash,
                data_hash: data_hash(&data),
            },
            data,
            metadata: meta.encode(),
            signatures: Vec::new(),
        }
    }

    /// Block 0, carrying the initial configuration transaction.
    pub fn genesis(config_tx: Bytes) -> Self {
        Self::new(
            0,
            Digest::default(),
            vec![config_tx],
            ProposalMeta {
                view: View(0),
                sequence: Seq(0),
            },
        )
    }

    pub fn number(&self) -> u64 {
        self.header.number
    }

    pub fn hash(&self) -> Digest {
        self.header.hash()
    }

    pub fn meta(&self) -> Result<ProposalMeta, BlockError> {
        ProposalMeta::decode(&self.metadata).map_err(|e| BlockError::Malformed(e.to_string()))
    }

    pub fn proposal(&self) -> Proposal {
        Proposal::new(self.header.encode(), codec::encode(&self.data), self.metadata.clone())
    }

    pub fn decision(&self) -> Decision {
        Decision {
            proposal: self.proposal(),
            signatures: self.signatures.clone(),
        }
    }

    pub fn from_proposal(proposal: &Proposal) -> Result<Self, BlockError> {
        let header: BlockHeader =
            codec::decode(&proposal.header).map_err(|e| BlockError::Malformed(format!("header: {e}")))?;
        let data: Vec<Bytes> =
            codec::decode(&proposal.payload).map_err(|e| BlockError::Malformed(format!("payload: {e}")))?;
        Ok(Self {
            header,
            data,
            metadata: proposal.metadata.clone(),
            signatures: Vec::new(),
        })
    }

    pub fn from_decision(decision: &Decision) -> Result<Self, BlockError> {
        let mut block = Self::from_proposal(&decision.proposal)?;
        block.signatures = decision.signatures.clone();
        Ok(block)
    }

    pub fn summary(&self) -> BlockSummary {
        BlockSummary {
            header: self.header,
            metadata: self.metadata.clone(),
            signatures: self.signatures.clone(),
        }
    }

    /// Same block without its signature set: the part that is identical on
    /// every node.
    pub fn canonical(&self) -> Block {
        Block {
            signatures: Vec::new(),
            ..self.clone()
        }
    }

    /// Structure and chaining only: numbering, predecessor hash, data hash,
    /// metadata sequence.
    pub fn check_structure(&self, previous: &BlockHeader) -> Result<(), BlockError> {
        let expected = previous.number + 1;
        if self.header.number != expected {
            return Err(BlockError::WrongNumber {
                expected,
                got: self.header.number,
            });
        }
        if self.header.previous_hash != previous.hash() {
            return Err(BlockError::BadPredecessor);
        }
        if self.header.data_hash != data_hash(&self.data) {
            return Err(BlockError::BadDataHash);
        }
        let meta = self.meta()?;
        if meta.sequence.0 != self.header.number {
            return Err(BlockError::BadMetadata {
                number: self.header.number,
                sequence: meta.sequence.0,
            });
        }
        Ok(())
    }
}

impl BlockSummary {
    /// Digest of the proposal this summary stands for.
    pub fn proposal_digest(&self) -> Digest {
        Proposal::digest_from_parts(&self.header.encode(), &self.header.data_hash, &self.metadata)
    }

    /// Checks the commit quorum without the payload.
    pub fn verify<V>(&self, against: &Configuration, verify: V) -> Result<(), BlockError>
    where
        V: Fn(&Signature, &Digest) -> Result<(), AppError>,
    {
        let meta = ProposalMeta::decode(&self.metadata).map_err(|e| BlockError::Malformed(e.to_string()))?;
        if meta.sequence.0 != self.header.number {
            return Err(BlockError::BadMetadata {
                number: self.header.number,
                sequence: meta.sequence.0,
            });
        }
        bftorder::engine::verify_quorum(
            &self.signatures,
            &self.proposal_digest(),
            bftorder::Attestation::Commit,
            against,
            verify,
        )?;
        Ok(())
    }
}

/// Structural, chain and policy check: the block follows `previous` and
/// carries at least `q` valid commit signatures from distinct members of
/// `against`.
pub fn validate_block<V>(
    block: &Block,
    previous: &BlockHeader,
    against: &Configuration,
    verify: V,
) -> Result<(), BlockError>
where
    V: Fn(&Signature, &Digest) -> Result<(), AppError>,
{
    block.check_structure(previous)?;
    verify_decision(&block.decision(), against, verify)?;
    Ok(())
}
