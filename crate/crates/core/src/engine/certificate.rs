//! Quorum certificate checks shared by the engine, view-change selection and
//! applications validating blocks.

use std::collections::BTreeSet;

use crate::app::AppError;
use crate::message::{PreparedCertificate, SignedViewData};
use crate::types::{Attestation, Configuration, Decision, Digest, NodeId, Signature, View};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CertificateError {
    #[error("{got} signatures, quorum is {need}")]
    TooFewSignatures { got: usize, need: usize },
    #[error("signer {0} appears twice")]
    DuplicateSigner(NodeId),
    #[error("signer {0} is not a consenter")]
    NotAConsenter(NodeId),
    #[error("signature by {0} has the wrong attestation")]
    WrongAttestation(NodeId),
    #[error("signature by {0} does not verify: {1}")]
    Invalid(NodeId, AppError),
    #[error("metadata does not decode or does not match")]
    BadMetadata,
}

/// Checks a set of signatures over `digest`: at least `q` of them, distinct
/// signers, all consenters, all carrying `attestation`, all valid.
pub fn verify_quorum<V>(
    signatures: &[Signature],
    digest: &Digest,
    attestation: Attestation,
    config: &Configuration,
    verify: V,
) -> Result<(), CertificateError>
where
    V: Fn(&Signature, &Digest) -> Result<(), AppError>,
{
    let mut seen = BTreeSet::new();
    for sig in signatures {
        if !seen.insert(sig.signer) {
            return Err(CertificateError::DuplicateSigner(sig.signer));
        }
        if !config.contains(sig.signer) {
            return Err(CertificateError::NotAConsenter(sig.signer));
        }
        if sig.attestation() != Some(attestation) {
            return Err(CertificateError::WrongAttestation(sig.signer));
        }
        verify(sig, digest).map_err(|e| CertificateError::Invalid(sig.signer, e))?;
    }
    if seen.len() < config.q {
        return Err(CertificateError::TooFewSignatures {
            got: seen.len(),
            need: config.q,
        });
    }
    Ok(())
}

pub fn verify_decision<V>(decision: &Decision, config: &Configuration, verify: V) -> Result<(), CertificateError>
where
    V: Fn(&Signature, &Digest) -> Result<(), AppError>,
{
    decision.proposal.meta().map_err(|_| CertificateError::BadMetadata)?;
    verify_quorum(
        &decision.signatures,
        &decision.proposal.digest(),
        Attestation::Commit,
        config,
        verify,
    )
}

pub fn verify_prepared<V>(cert: &PreparedCertificate, config: &Configuration, verify: V) -> Result<(), CertificateError>
where
    V: Fn(&Signature, &Digest) -> Result<(), AppError>,
{
    match cert.proposal.meta() {
        Ok(meta) if meta.sequence == cert.sequence && meta.view <= cert.view => {}
        _ => return Err(CertificateError::BadMetadata),
    }
    verify_quorum(
        &cert.votes,
        &cert.proposal.digest(),
        Attestation::Prepare { view: cert.view },
        config,
        verify,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ViewDataError {
    #[error("view data targets view {got}, expected {expected}")]
    WrongView { expected: View, got: View },
    #[error("view data signature: {0}")]
    Signature(CertificateError),
    #[error("last decision certificate: {0}")]
    LastDecision(CertificateError),
    #[error("prepared certificate: {0}")]
    Prepared(CertificateError),
    #[error("prepared certificate from view {cert} is not older than target view {target}")]
    FutureCertificate { cert: View, target: View },
}

/// Validates one signed view-data message addressed to `target`.
pub fn verify_view_data<V>(
    svd: &SignedViewData,
    target: View,
    config: &Configuration,
    verify: V,
) -> Result<(), ViewDataError>
where
    V: Fn(&Signature, &Digest) -> Result<(), AppError>,
{
    if svd.data.next_view != target {
        return Err(ViewDataError::WrongView {
            expected: target,
            got: svd.data.next_view,
        });
    }
    let sig = &svd.signature;
    if !config.contains(sig.signer) {
        return Err(ViewDataError::Signature(CertificateError::NotAConsenter(sig.signer)));
    }
    if sig.attestation() != Some(Attestation::ViewData) {
        return Err(ViewDataError::Signature(CertificateError::WrongAttestation(sig.signer)));
    }
    verify(sig, &svd.data.digest())
        .map_err(|e| ViewDataError::Signature(CertificateError::Invalid(sig.signer, e)))?;
    if let Some(decision) = &svd.data.last_decision {
        verify_decision(decision, config, &verify).map_err(ViewDataError::LastDecision)?;
    }
    if let Some(cert) = &svd.data.prepared {
        if cert.view >= target {
            return Err(ViewDataError::FutureCertificate {
                cert: cert.view,
                target,
            });
        }
        verify_prepared(cert, config, &verify).map_err(ViewDataError::Prepared)?;
    }
    Ok(())
}
