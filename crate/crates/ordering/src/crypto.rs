//! Ed25519 keys for consenters and clients.

use bftorder::{Digest, NodeId, Signature};
use bytes::Bytes;
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("public key is not a valid ed25519 point")]
    BadKey,
    #[error("signature has the wrong length")]
    BadEncoding,
    #[error("signature does not verify")]
    Mismatch,
}

#[derive(Clone)]
pub struct Keypair {
    signing: SigningKey,
}

impl std::fmt::Debug for Keypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Keypair({})", hex_prefix(&self.public()))
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes.iter().take(4).map(|b| format!("{b:02x}")).collect()
}

impl Keypair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    /// Deterministic key for simulations and tests: the seed is
    /// `SHA-256(label ‖ index)`.
    pub fn derive(label: &str, index: u64) -> Self {
        let seed = Digest::of_parts(&[label.as_bytes(), &index.to_be_bytes()]);
        Self::from_seed(seed.0)
    }

    pub fn public(&self) -> Bytes {
        Bytes::copy_from_slice(self.signing.verifying_key().as_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> Bytes {
        Bytes::copy_from_slice(&self.signing.sign(message).to_bytes())
    }

    /// Consensus signature over `digest` and an attested `message`.
    pub fn sign_digest(&self, signer: NodeId, digest: &Digest, message: Bytes) -> Signature {
        let value = self.sign(&Signature::signed_bytes(digest, Some(&message)));
        Signature {
            signer,
            value,
            message: Some(message),
        }
    }
}

pub fn verify(public: &[u8], message: &[u8], signature: &[u8]) -> Result<(), CryptoError> {
    let key: [u8; 32] = public.try_into().map_err(|_| CryptoError::BadKey)?;
    let key = VerifyingKey::from_bytes(&key).map_err(|_| CryptoError::BadKey)?;
    let sig = ed25519_dalek::Signature::from_slice(signature).map_err(|_| CryptoError::BadEncoding)?;
    key.verify(message, &sig).map_err(|_| CryptoError::Mismatch)
}

pub fn verify_digest(public: &[u8], signature: &Signature, digest: &Digest) -> Result<(), CryptoError> {
    verify(
        public,
        &Signature::signed_bytes(digest, signature.message.as_ref()),
        &signature.value,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_verify_round_trip_across_instances() {
        let a = Keypair::derive("node", 0);
        let again = Keypair::derive("node", 0);
        let sig = a.sign(b"hello");
        // Deterministic signatures.
        assert_eq!(sig, again.sign(b"hello"));
        assert!(verify(&again.public(), b"hello", &sig).is_ok());
    }

    #[test]
    fn tampering_is_rejected() {
        let a = Keypair::derive("node", 1);
        let sig = a.sign(b"hello");
        let mut bad = sig.to_vec();
        bad[10] ^= 1;
        assert_eq!(verify(&a.public(), b"hello", &bad), Err(CryptoError::Mismatch));
        assert_eq!(verify(&a.public(), b"hellO", &sig), Err(CryptoError::Mismatch));
        let other = Keypair::derive("node", 2);
        assert_eq!(verify(&other.public(), b"hello", &sig), Err(CryptoError::Mismatch));
        assert_eq!(verify(&a.public(), b"hello", &sig[..63]), Err(CryptoError::BadEncoding));
        assert_eq!(verify(&[1, 2, 3], b"hello", &sig), Err(CryptoError::BadKey));
    }

    #[test]
    fn digest_signatures_bind_the_attestation() {
        let k = Keypair::derive("node", 3);
        let d = Digest::of(b"proposal");
        let sig = k.sign_digest(NodeId(3), &d, bftorder::Attestation::Commit.to_bytes());
        assert!(verify_digest(&k.public(), &sig, &d).is_ok());
        let mut relabelled = sig.clone();
        relabelled.message = Some(bftorder::Attestation::Prepare { view: bftorder::View(0) }.to_bytes());
        assert!(verify_digest(&k.public(), &relabelled, &d).is_err());
        assert!(verify_digest(&k.public(), &sig, &Digest::of(b"other")).is_err());
    }
}
