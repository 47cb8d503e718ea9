//! Domain types shared by every module, and the quorum arithmetic.

use std::fmt;
use std::time::Duration;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::codec;

macro_rules! counter_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl $name {
            pub fn next(self) -> Self {
                Self(self.0 + 1)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

counter_newtype!(
    /// Identity of a consenter, unique within a configuration.
    NodeId
);
counter_newtype!(
    /// Epoch with a fixed leader. Non-decreasing over a node's lifetime.
    View
);
counter_newtype!(
    /// Position of a decision. Sequence `s` is delivered right after `s - 1`;
    /// sequence 0 is the out-of-band genesis and is never decided.
    Seq
);

/// SHA-256 output. Used for request identity, proposal identity and block hashing.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const LEN: usize = 32;

    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    /// Hash of several byte strings, each length-prefixed so that section
    /// boundaries cannot shift.
    pub fn of_parts(parts: &[&[u8]]) -> Self {
        let mut hasher = Sha256::new();
        for part in parts {
            hasher.update((part.len() as u64).to_be_bytes());
            hasher.update(part);
        }
        Self(hasher.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", hex::encode(&self.0[..6]))
    }
}

pub type RequestId = Digest;

/// An opaque client request. Identity is the hash of its payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "RequestWire", into = "RequestWire")]
pub struct Request {
    payload: Bytes,
    id: RequestId,
}

#[derive(Serialize, Deserialize)]
struct RequestWire {
    payload: Bytes,
}

impl From<RequestWire> for Request {
    fn from(wire: RequestWire) -> Self {
        Request::new(wire.payload)
    }
}

impl From<Request> for RequestWire {
    fn from(request: Request) -> Self {
        RequestWire {
            payload: request.payload,
        }
    }
}

impl Request {
    pub fn new(payload: impl Into<Bytes>) -> Self {
        let payload = payload.into();
        let id = Digest::of(&payload);
        Self { payload, id }
    }

    pub fn id(&self) -> RequestId {
        self.id
    }

    pub fn payload(&self) -> &Bytes {
        &self.payload
    }
}

impl PartialEq for Request {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for Request {}

/// The consensus coordinates a leader embeds verbatim into every proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProposalMeta {
    pub view: View,
    pub sequence: Seq,
}

impl ProposalMeta {
    pub fn encode(&self) -> Bytes {
        codec::encode(self).into()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, codec::CodecError> {
        codec::decode(bytes)
    }
}

/// Application-assembled unit of consensus.
///
/// The digest covers all three sections. The payload enters through its own
/// hash, so a holder of only the header, the payload hash and the metadata can
/// still recompute the digest (this is what header-only block streams rely on).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "ProposalWire", into = "ProposalWire")]
pub struct Proposal {
    pub header: Bytes,
    pub payload: Bytes,
    pub metadata: Bytes,
    digest: Digest,
}

#[derive(Serialize, Deserialize)]
struct ProposalWire {
    header: Bytes,
    payload: Bytes,
    metadata: Bytes,
}

impl From<ProposalWire> for Proposal {
    fn from(wire: ProposalWire) -> Self {
        Proposal::new(wire.header, wire.payload, wire.metadata)
    }
}

impl From<Proposal> for ProposalWire {
    fn from(p: Proposal) -> Self {
        ProposalWire {
            header: p.header,
            payload: p.payload,
            metadata: p.metadata,
        }
    }
}

impl Proposal {
    pub fn new(header: impl Into<Bytes>, payload: impl Into<Bytes>, metadata: impl Into<Bytes>) -> Self {
        let header = header.into();
        let payload = payload.into();
        let metadata = metadata.into();
        let digest = Self::digest_from_parts(&header, &Digest::of(&payload), &metadata);
        Self {
            header,
            payload,
            metadata,
            digest,
        }
    }

    pub fn digest_from_parts(header: &[u8], payload_hash: &Digest, metadata: &[u8]) -> Digest {
        Digest::of_parts(&[header, payload_hash.as_bytes(), metadata])
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn meta(&self) -> Result<ProposalMeta, codec::CodecError> {
        ProposalMeta::decode(&self.metadata)
    }

    /// Total byte size of the three sections.
    pub fn size(&self) -> usize {
        self.header.len() + self.payload.len() + self.metadata.len()
    }
}

impl PartialEq for Proposal {
    fn eq(&self, other: &Self) -> bool {
        self.digest == other.digest
    }
}

impl Eq for Proposal {}

/// What a library-produced signature attests to besides the digest.
///
/// Stored encoded in [`Signature::message`]. Keeps commit signatures (the ones
/// that end up in decisions) apart from prepare votes and view-data signatures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attestation {
    Commit,
    Prepare { view: View },
    ViewData,
}

impl Attestation {
    pub fn to_bytes(self) -> Bytes {
        codec::encode(&self).into()
    }

    pub fn parse(message: Option<&Bytes>) -> Option<Self> {
        message.and_then(|m| codec::decode(m).ok())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub signer: NodeId,
    pub value: Bytes,
    /// Extra content the signer attests to, on top of the digest.
    pub message: Option<Bytes>,
}

impl Signature {
    /// The exact byte string a signature value is computed over.
    pub fn signed_bytes(digest: &Digest, message: Option<&Bytes>) -> Vec<u8> {
        let mut out = Vec::with_capacity(Digest::LEN + 1 + message.map_or(0, |m| m.len() + 8));
        out.extend_from_slice(digest.as_bytes());
        match message {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                out.extend_from_slice(&(m.len() as u64).to_be_bytes());
                out.extend_from_slice(m);
            }
        }
        out
    }

    pub fn attestation(&self) -> Option<Attestation> {
        Attestation::parse(self.message.as_ref())
    }

    pub fn is_commit(&self) -> bool {
        self.attestation() == Some(Attestation::Commit)
    }
}

/// A proposal together with the commit signatures that decided it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub proposal: Proposal,
    pub signatures: Vec<Signature>,
}

impl Decision {
    pub fn sequence(&self) -> Option<Seq> {
        self.proposal.meta().ok().map(|m| m.sequence)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consenter {
    pub id: NodeId,
    /// Opaque verification key, interpreted by the application.
    pub key: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("cluster of {0} nodes cannot tolerate a Byzantine fault (need at least 4)")]
    TooFewNodes(usize),
    #[error("consenter {0} listed more than once")]
    DuplicateConsenter(NodeId),
    #[error("quorum fields do not match a cluster of {n}: f={f} q={q}")]
    QuorumMismatch { n: usize, f: usize, q: usize },
    #[error("timeouts must satisfy complaint > forward > 0")]
    Timeouts,
    #[error("batch_max_count must be positive")]
    BatchSize,
}

/// Largest tolerated number of Byzantine nodes and the quorum size for `n` nodes.
///
/// `f = floor((n - 1) / 3)` and `q = ceil((n + f + 1) / 2)`, which equals
/// `2f + 1` when `n = 3f + 1` and keeps any two quorums intersecting in at
/// least `f + 1` nodes for every other `n`.
pub fn compute_quorum(n: usize) -> Result<(usize, usize), ConfigError> {
    if n < 4 {
        return Err(ConfigError::TooFewNodes(n));
    }
    let f = (n - 1) / 3;
    let q = (n + f + 1).div_ceil(2);
    Ok((f, q))
}

/// The active consenter set plus every protocol parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub consenters: Vec<Consenter>,
    pub n: usize,
    pub f: usize,
    pub q: usize,
    pub request_forward_timeout: Duration,
    pub request_complaint_timeout: Duration,
    pub leader_heartbeat_timeout: Duration,
    pub heartbeat_interval: Duration,
    /// How long a node waits for a new view after its view-change quorum formed.
    pub view_change_timeout: Duration,
    pub batch_max_count: usize,
    pub batch_timeout: Duration,
    pub sync_lag_threshold: u64,
}

impl Configuration {
    /// Configuration with default timers: forward 2s, complaint 8s, heartbeat
    /// every 1s with a 5s leader timeout, 10s view-change timeout, batches of
    /// up to 100 requests cut after 100ms, sync when 2 decisions behind.
    pub fn new(consenters: Vec<Consenter>) -> Result<Self, ConfigError> {
        let (f, q) = compute_quorum(consenters.len())?;
        let config = Self {
            n: consenters.len(),
            f,
            q,
            consenters,
            request_forward_timeout: Duration::from_secs(2),
            request_complaint_timeout: Duration::from_secs(8),
            leader_heartbeat_timeout: Duration::from_secs(5),
            heartbeat_interval: Duration::from_secs(1),
            view_change_timeout: Duration::from_secs(10),
            batch_max_count: 100,
            batch_timeout: Duration::from_millis(100),
            sync_lag_threshold: 2,
        };
        config.validate()?;
        Ok(config)
    }

    /// Replaces the consenter set and recomputes `n`, `f` and `q`.
    pub fn with_consenters(mut self, consenters: Vec<Consenter>) -> Result<Self, ConfigError> {
        let (f, q) = compute_quorum(consenters.len())?;
        self.n = consenters.len();
        self.f = f;
        self.q = q;
        self.consenters = consenters;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (f, q) = compute_quorum(self.consenters.len())?;
        if self.n != self.consenters.len() || self.f != f || self.q != q {
            return Err(ConfigError::QuorumMismatch {
                n: self.n,
                f: self.f,
                q: self.q,
            });
        }
        let mut ids: Vec<_> = self.consenters.iter().map(|c| c.id).collect();
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ConfigError::DuplicateConsenter(w[0]));
        }
        if self.request_forward_timeout.is_zero()
            || self.request_complaint_timeout <= self.request_forward_timeout
        {
            return Err(ConfigError::Timeouts);
        }
        if self.batch_max_count == 0 {
            return Err(ConfigError::BatchSize);
        }
        Ok(())
    }

    /// Round-robin leader: `consenters[view mod n]`.
    pub fn leader(&self, view: View) -> NodeId {
        self.consenters[(view.0 % self.n as u64) as usize].id
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.consenters.iter().any(|c| c.id == id)
    }

    pub fn key_of(&self, id: NodeId) -> Option<&Bytes> {
        self.consenters.iter().find(|c| c.id == id).map(|c| &c.key)
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.consenters.iter().map(|c| c.id)
    }
}

/// Whether a delivered decision (or a synced history) changed the configuration.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Reconfig {
    #[default]
    Unchanged,
    Changed(Configuration),
}

impl Reconfig {
    pub fn is_changed(&self) -> bool {
        matches!(self, Reconfig::Changed(_))
    }

    pub fn new_config(&self) -> Option<&Configuration> {
        match self {
            Reconfig::Changed(c) => Some(c),
            Reconfig::Unchanged => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn consenters(n: u64) -> Vec<Consenter> {
        (0..n)
            .map(|i| Consenter {
                id: NodeId(i),
                key: Bytes::from(vec![i as u8; 32]),
            })
            .collect()
    }

    /// Smallest quorum such that any two quorums overlap in more than f nodes,
    /// found by enumeration.
    fn brute_force_quorum(n: usize) -> (usize, usize) {
        let f = (0..n).filter(|f| 3 * f < n).max().unwrap();
        let q = (1..=n).find(|q| 2 * q > n + f).unwrap();
        (f, q)
    }

    #[test]
    fn quorum_examples() {
        assert_eq!(compute_quorum(4), Ok((1, 3)));
        assert_eq!(compute_quorum(10), Ok((3, 7)));
        assert_eq!(compute_quorum(6), Ok((1, 4)));
        assert_eq!(compute_quorum(7), Ok((2, 5)));
    }

    #[test]
    fn quorum_matches_enumeration() {
        for n in 4..200 {
            assert_eq!(compute_quorum(n).unwrap(), brute_force_quorum(n), "n={n}");
        }
    }

    #[test]
    fn too_small_cluster_is_rejected() {
        for n in 0..4 {
            assert_eq!(compute_quorum(n), Err(ConfigError::TooFewNodes(n)));
        }
    }

    proptest! {
        #[test]
        fn quorum_is_monotone(a in 4usize..500, b in 4usize..500) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(compute_quorum(lo).unwrap().1 <= compute_quorum(hi).unwrap().1);
        }

        #[test]
        fn quorums_intersect_in_more_than_f(n in 4usize..2000) {
            let (f, q) = compute_quorum(n).unwrap();
            prop_assert!(2 * q - n > f);
            prop_assert!(q <= n - f);
            if n % 3 == 1 {
                prop_assert_eq!(q, 2 * f + 1);
            }
        }

        #[test]
        fn proposal_round_trips(h in proptest::collection::vec(any::<u8>(), 0..64),
                                p in proptest::collection::vec(any::<u8>(), 0..256),
                                view in any::<u64>(), seq in any::<u64>()) {
            let meta = ProposalMeta { view: View(view), sequence: Seq(seq) };
            let proposal = Proposal::new(h, p, meta.encode());
            let decoded: Proposal = codec::decode(&codec::encode(&proposal)).unwrap();
            prop_assert_eq!(decoded.digest(), proposal.digest());
            prop_assert_eq!(&decoded.header, &proposal.header);
            prop_assert_eq!(decoded.meta().unwrap(), meta);
        }

        #[test]
        fn single_bit_flip_changes_digest(p in proptest::collection::vec(any::<u8>(), 1..128),
                                          section in 0usize..3, bit in any::<usize>()) {
            let base = Proposal::new(p.clone(), p.clone(), p.clone());
            let mut parts = [p.clone(), p.clone(), p.clone()];
            let idx = bit % (p.len() * 8);
            parts[section][idx / 8] ^= 1 << (idx % 8);
            let [h, pl, m] = parts;
            prop_assert_ne!(Proposal::new(h, pl, m).digest(), base.digest());
        }
    }

    #[test]
    fn digest_is_deterministic_and_fixed_length() {
        let a = Proposal::new(&b"h"[..], &b"p"[..], &b"m"[..]);
        let b = Proposal::new(&b"h"[..], &b"p"[..], &b"m"[..]);
        assert_eq!(a.digest(), b.digest());
        let c = Proposal::new(&b"h"[..], &b"p"[..], &b"m2"[..]);
        assert_ne!(a.digest(), c.digest());
        let big = Proposal::new(vec![1u8; 10_000], vec![2u8; 10_000], vec![3u8; 10]);
        assert_eq!(big.digest().as_bytes().len(), Digest::LEN);
    }

    #[test]
    fn section_boundaries_matter() {
        let a = Proposal::new(&b"ab"[..], &b"c"[..], &b""[..]);
        let b = Proposal::new(&b"a"[..], &b"bc"[..], &b""[..]);
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn request_identity_is_payload_hash() {
        let a = Request::new(&b"tx"[..]);
        let b = Request::new(&b"tx"[..]);
        assert_eq!(a, b);
        assert_eq!(a.id(), Digest::of(b"tx"));
        let decoded: Request = codec::decode(&codec::encode(&a)).unwrap();
        assert_eq!(decoded.id(), a.id());
    }

    #[test]
    fn configuration_invariants() {
        let config = Configuration::new(consenters(4)).unwrap();
        assert_eq!((config.n, config.f, config.q), (4, 1, 3));
        assert_eq!(config.leader(View(5)), NodeId(1));

        let mut bad = config.clone();
        bad.q = 2;
        assert!(matches!(bad.validate(), Err(ConfigError::QuorumMismatch { .. })));

        let mut bad = config.clone();
        bad.request_forward_timeout = bad.request_complaint_timeout;
        assert_eq!(bad.validate(), Err(ConfigError::Timeouts));

        let mut dup = consenters(4);
        dup[3].id = NodeId(0);
        assert_eq!(Configuration::new(dup), Err(ConfigError::DuplicateConsenter(NodeId(0))));

        let grown = config.with_consenters(consenters(5)).unwrap();
        assert_eq!((grown.n, grown.f, grown.q), (5, 1, 4));
    }

    #[test]
    fn configuration_round_trips() {
        let config = Configuration::new(consenters(7)).unwrap();
        let decoded: Configuration = codec::decode(&codec::encode(&config)).unwrap();
        assert_eq!(decoded, config);
    }

    #[test]
    fn attestations_are_distinct() {
        let commit = Attestation::Commit.to_bytes();
        let prepare = Attestation::Prepare { view: View(0) }.to_bytes();
        assert_ne!(commit, prepare);
        let d = Digest::of(b"x");
        assert_ne!(
            Signature::signed_bytes(&d, Some(&commit)),
            Signature::signed_bytes(&d, Some(&prepare))
        );
        assert_ne!(Signature::signed_bytes(&d, None), Signature::signed_bytes(&d, Some(&Bytes::new())));
    }
}
