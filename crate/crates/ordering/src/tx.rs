//! Client transactions and channel configuration.

use bftorder::{codec, Configuration, Digest};
use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::crypto::{self, CryptoError, Keypair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxKind {
    Ordinary,
    /// Body is an encoded [`ChannelConfig`] replacing the current one.
    Config,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub kind: TxKind,
    /// Ed25519 public key of the submitter.
    pub submitter: Bytes,
    pub body: Bytes,
    pub signature: Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TxError {
    #[error("malformed transaction: {0}")]
    Malformed(String),
    #[error("submitter signature: {0}")]
    Signature(#[from] CryptoError),
    #[error("config transaction body: {0}")]
    BadConfig(String),
}

#[derive(Serialize)]
struct SigningView<'a> {
    kind: TxKind,
    submitter: &'a Bytes,
    body: &'a Bytes,
}

impl Transaction {
    pub fn signed(kind: TxKind, body: impl Into<Bytes>, key: &Keypair) -> Self {
        let mut tx = Self {
            kind,
            submitter: key.public(),
            body: body.into(),
            signature: Bytes::new(),
        };
        tx.signature = key.sign(&tx.signing_bytes());
        tx
    }

    pub fn config(config: &ChannelConfig, admin: &Keypair) -> Self {
        Self::signed(TxKind::Config, codec::encode(config), admin)
    }

    fn signing_bytes(&self) -> Vec<u8> {
        codec::encode(&SigningView {
            kind: self.kind,
            submitter: &self.submitter,
            body: &self.body,
        })
    }

    pub fn verify_signature(&self) -> Result<(), TxError> {
        crypto::verify(&self.submitter, &self.signing_bytes(), &self.signature)?;
        Ok(())
    }

    pub fn encode(&self) -> Bytes {
        codec::encode(self).into()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TxError> {
        codec::decode(bytes).map_err(|e| TxError::Malformed(e.to_string()))
    }

    /// Identity of the encoded transaction, equal to the consensus request id.
    pub fn id(&self) -> Digest {
        Digest::of(&self.encode())
    }

    pub fn is_config(&self) -> bool {
        self.kind == TxKind::Config
    }

    pub fn channel_config(&self) -> Result<ChannelConfig, TxError> {
        let config: ChannelConfig = codec::decode(&self.body).map_err(|e| TxError::BadConfig(e.to_string()))?;
        config
            .consensus
            .validate()
            .map_err(|e| TxError::BadConfig(e.to_string()))?;
        Ok(config)
    }
}

/// Everything a config transaction replaces: the consensus configuration
/// (consenters with their public keys, quorum, timers) and the client keys
/// allowed to submit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub consensus: Configuration,
    /// Keys allowed to submit ordinary transactions.
    pub clients: Vec<Bytes>,
    /// Keys allowed to submit config transactions.
    pub admins: Vec<Bytes>,
}

impl ChannelConfig {
    pub fn is_client(&self, key: &[u8]) -> bool {
        self.clients.iter().any(|k| k == key)
    }

    pub fn is_admin(&self, key: &[u8]) -> bool {
        self.admins.iter().any(|k| k == key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_transactions_verify_and_round_trip() {
        let k = Keypair::derive("client", 0);
        let tx = Transaction::signed(TxKind::Ordinary, &b"payload"[..], &k);
        tx.verify_signature().unwrap();
        let back = Transaction::decode(&tx.encode()).unwrap();
        assert_eq!(back, tx);
        assert_eq!(back.id(), tx.id());
    }

    #[test]
    fn any_changed_field_breaks_the_signature() {
        let k = Keypair::derive("client", 0);
        let tx = Transaction::signed(TxKind::Ordinary, &b"payload"[..], &k);
        let mut t = tx.clone();
        t.body = Bytes::from_static(b"payloaD");
        assert!(t.verify_signature().is_err());
        let mut t = tx.clone();
        t.kind = TxKind::Config;
        assert!(t.verify_signature().is_err());
        let mut t = tx;
        t.submitter = Keypair::derive("client", 1).public();
        assert!(t.verify_signature().is_err());
    }

    #[test]
    fn truncated_encoding_is_malformed() {
        let k = Keypair::derive("client", 0);
        let bytes = Transaction::signed(TxKind::Ordinary, &b"payload"[..], &k).encode();
        for cut in 0..bytes.len() {
            assert!(matches!(Transaction::decode(&bytes[..cut]), Err(TxError::Malformed(_))));
        }
    }
}
