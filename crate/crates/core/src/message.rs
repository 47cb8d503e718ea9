//! Protocol messages exchanged between consenters.

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::types::{Decision, Digest, NodeId, Proposal, Seq, Signature, View};

/// Proof that a proposal gathered a quorum of prepare votes in some view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedCertificate {
    /// View in which the votes were cast (may be later than the proposal's own view).
    pub view: View,
    pub sequence: Seq,
    pub proposal: Proposal,
    pub votes: Vec<Signature>,
}

/// A node's state summary, sent to the leader of the view it wants to move to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewData {
    pub next_view: View,
    /// Latest decision the sender delivered, with its commit quorum.
    pub last_decision: Option<Decision>,
    /// The sender's highest prepared certificate for the sequence after `last_decision`.
    pub prepared: Option<PreparedCertificate>,
}

impl ViewData {
    pub fn last_sequence(&self) -> Seq {
        self.last_decision
            .as_ref()
            .and_then(Decision::sequence)
            .unwrap_or_default()
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&codec::encode(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedViewData {
    pub data: ViewData,
    /// Signature over [`ViewData::digest`] with a view-data attestation.
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum ConsensusMessage {
    PrePrepare {
        view: View,
        sequence: Seq,
        proposal: Proposal,
    },
    /// Prepare votes are signed so that a quorum of them forms a transferable
    /// [`PreparedCertificate`].
    Prepare {
        view: View,
        sequence: Seq,
        digest: Digest,
        signature: Signature,
    },
    Commit {
        view: View,
        sequence: Seq,
        digest: Digest,
        signature: Signature,
    },
    ViewChange {
        next_view: View,
    },
    ViewData(SignedViewData),
    NewView {
        view: View,
        view_data: Vec<SignedViewData>,
    },
    Heartbeat {
        view: View,
        sequence: Seq,
    },
    ForwardedRequest {
        payload: Bytes,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    PrePrepare,
    Prepare,
    Commit,
    ViewChange,
    ViewData,
    NewView,
    Heartbeat,
    ForwardedRequest,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::PrePrepare,
        MessageKind::Prepare,
        MessageKind::Commit,
        MessageKind::ViewChange,
        MessageKind::ViewData,
        MessageKind::NewView,
        MessageKind::Heartbeat,
        MessageKind::ForwardedRequest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::PrePrepare => "pre-prepare",
            MessageKind::Prepare => "prepare",
            MessageKind::Commit => "commit",
            MessageKind::ViewChange => "view-change",
            MessageKind::ViewData => "view-data",
            MessageKind::NewView => "new-view",
            MessageKind::Heartbeat => "heartbeat",
            MessageKind::ForwardedRequest => "forwarded-request",
        }
    }
}

impl ConsensusMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            ConsensusMessage::PrePrepare { .. } => MessageKind::PrePrepare,
            ConsensusMessage::Prepare { .. } => MessageKind::Prepare,
            ConsensusMessage::Commit { .. } => MessageKind::Commit,
            ConsensusMessage::ViewChange { .. } => MessageKind::ViewChange,
            ConsensusMessage::ViewData(_) => MessageKind::ViewData,
            ConsensusMessage::NewView { .. } => MessageKind::NewView,
            ConsensusMessage::Heartbeat { .. } => MessageKind::Heartbeat,
            ConsensusMessage::ForwardedRequest { .. } => MessageKind::ForwardedRequest,
        }
    }

    /// The view this message speaks about. Forwarded requests carry none.
    pub fn view(&self) -> Option<View> {
        match self {
            ConsensusMessage::PrePrepare { view, .. }
            | ConsensusMessage::Prepare { view, .. }
            | ConsensusMessage::Commit { view, .. }
            | ConsensusMessage::NewView { view, .. }
            | ConsensusMessage::Heartbeat { view, .. } => Some(*view),
            ConsensusMessage::ViewChange { next_view } => Some(*next_view),
            ConsensusMessage::ViewData(svd) => Some(svd.data.next_view),
            ConsensusMessage::ForwardedRequest { .. } => None,
        }
    }

    pub fn sequence(&self) -> Option<Seq> {
        match self {
            ConsensusMessage::PrePrepare { sequence, .. }
            | ConsensusMessage::Prepare { sequence, .. }
            | ConsensusMessage::Commit { sequence, .. }
            | ConsensusMessage::Heartbeat { sequence, .. } => Some(*sequence),
            _ => None,
        }
    }

    /// Digest voted on or proposed, for normal-case messages.
    pub fn digest(&self) -> Option<Digest> {
        match self {
            ConsensusMessage::PrePrepare { proposal, .. } => Some(proposal.digest()),
            ConsensusMessage::Prepare { digest, .. } | ConsensusMessage::Commit { digest, .. } => {
                Some(*digest)
            }
            _ => None,
        }
    }

    /// Size on the wire, without encoding. Matches [`codec::encoded_len`].
    pub fn wire_size(&self) -> u64 {
        codec::encoded_len(self)
    }
}

/// A message together with its authenticated sender, as framed by transports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: NodeId,
    pub message: ConsensusMessage,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Attestation, ProposalMeta};
    use proptest::prelude::*;

    fn sig(signer: u64) -> Signature {
        Signature {
            signer: NodeId(signer),
            value: Bytes::from(vec![signer as u8; 64]),
            message: Some(Attestation::Commit.to_bytes()),
        }
    }

    fn arb_message() -> impl Strategy<Value = ConsensusMessage> {
        let bytes = || proptest::collection::vec(any::<u8>(), 0..48);
        prop_oneof![
            (any::<u64>(), any::<u64>(), bytes(), bytes()).prop_map(|(v, s, h, p)| {
                let meta = ProposalMeta { view: View(v), sequence: Seq(s) };
                ConsensusMessage::PrePrepare {
                    view: View(v),
                    sequence: Seq(s),
                    proposal: Proposal::new(h, p, meta.encode()),
                }
            }),
            (any::<u64>(), any::<u64>(), any::<[u8; 32]>(), 0u64..10).prop_map(|(v, s, d, n)| {
                ConsensusMessage::Commit {
                    view: View(v),
                    sequence: Seq(s),
                    digest: Digest(d),
                    signature: sig(n),
                }
            }),
            any::<u64>().prop_map(|v| ConsensusMessage::ViewChange { next_view: View(v) }),
            (any::<u64>(), bytes()).prop_map(|(v, p)| {
                let proposal = Proposal::new(p.clone(), p, ProposalMeta { view: View(v), sequence: Seq(1) }.encode());
                let data = ViewData {
                    next_view: View(v),
                    last_decision: Some(Decision { proposal: proposal.clone(), signatures: vec![sig(0), sig(1)] }),
                    prepared: Some(PreparedCertificate { view: View(v), sequence: Seq(2), proposal, votes: vec![sig(2)] }),
                };
                ConsensusMessage::NewView {
                    view: View(v),
                    view_data: vec![SignedViewData { data, signature: sig(3) }],
                }
            }),
            bytes().prop_map(|p| ConsensusMessage::ForwardedRequest { payload: p.into() }),
        ]
    }

    proptest! {
        #[test]
        fn envelopes_round_trip(sender in any::<u64>(), message in arb_message()) {
            let env = Envelope { sender: NodeId(sender), message };
            let bytes = codec::encode(&env);
            prop_assert_eq!(bytes.len() as u64, codec::encoded_len(&env));
            let decoded: Envelope = codec::decode(&bytes).unwrap();
            prop_assert_eq!(&decoded, &env);
            prop_assert_eq!(codec::encode(&decoded), bytes);
        }
    }

    #[test]
    fn every_variant_carries_view_context() {
        let m = ConsensusMessage::Heartbeat { view: View(3), sequence: Seq(9) };
        assert_eq!(m.view(), Some(View(3)));
        assert_eq!(m.sequence(), Some(Seq(9)));
        assert_eq!(m.kind().name(), "heartbeat");
    }
}
