//! Choosing where a new view resumes.
//!
//! The new leader gathers signed view data from a quorum and broadcasts all of
//! it in the new-view message. Every receiver runs [`select_new_view`] on the
//! same input, so a leader cannot steer the outcome: it can only pick which
//! quorum to forward, and any quorum is guaranteed to contain a correct node
//! that reports every decision that might have been delivered.
//!
//! The rule:
//! - the frontier is the highest verified last decision;
//! - among prepared certificates for the sequence right after the frontier,
//!   the one prepared in the highest view must be re-proposed;
//! - otherwise the new leader proposes a fresh batch at that sequence.

use std::collections::BTreeSet;

use crate::app::AppError;
use crate::message::SignedViewData;
use crate::types::{Configuration, Decision, Digest, NodeId, Proposal, Seq, Signature, View};

use super::certificate::{verify_view_data, ViewDataError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewViewPlan {
    pub view: View,
    /// Highest decision reported by the quorum.
    pub frontier: Option<Decision>,
    pub frontier_seq: Seq,
    /// Sequence the new view starts at (`frontier_seq + 1`).
    pub next_seq: Seq,
    /// Proposal that must be decided at `next_seq` before anything fresh.
    pub reproposal: Option<Proposal>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NewViewError {
    #[error("{got} view data messages, quorum is {need}")]
    NotEnough { got: usize, need: usize },
    #[error("view data from {0} appears twice")]
    DuplicateSender(NodeId),
    #[error("view data from {0}: {1}")]
    Invalid(NodeId, ViewDataError),
    #[error("two prepared certificates from view {0} disagree")]
    ConflictingCertificates(View),
}

pub fn select_new_view<V>(
    view: View,
    view_data: &[SignedViewData],
    config: &Configuration,
    verify: V,
) -> Result<NewViewPlan, NewViewError>
where
    V: Fn(&Signature, &Digest) -> Result<(), AppError>,
{
    let mut senders = BTreeSet::new();
    for svd in view_data {
        let sender = svd.signature.signer;
        if !senders.insert(sender) {
            return Err(NewViewError::DuplicateSender(sender));
        }
        verify_view_data(svd, view, config, &verify).map_err(|e| NewViewError::Invalid(sender, e))?;
    }
    if senders.len() < config.q {
        return Err(NewViewError::NotEnough {
            got: senders.len(),
            need: config.q,
        });
    }

    let frontier = view_data
        .iter()
        .filter_map(|svd| svd.data.last_decision.as_ref())
        .max_by_key(|d| d.sequence().unwrap_or_default());
    let frontier_seq = frontier.and_then(Decision::sequence).unwrap_or_default();
    let next_seq = frontier_seq.next();

    let mut best: Option<(View, &Proposal)> = None;
    for cert in view_data.iter().filter_map(|svd| svd.data.prepared.as_ref()) {
        if cert.sequence != next_seq {
            continue;
        }
        match best {
            Some((v, p)) if v == cert.view && p.digest() != cert.proposal.digest() => {
                return Err(NewViewError::ConflictingCertificates(v));
            }
            Some((v, _)) if v >= cert.view => {}
            _ => best = Some((cert.view, &cert.proposal)),
        }
    }

    Ok(NewViewPlan {
        view,
        frontier: frontier.cloned(),
        frontier_seq,
        next_seq,
        reproposal: best.map(|(_, p)| p.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{PreparedCertificate, ViewData};
    use crate::types::{Attestation, Consenter, ProposalMeta};
    use bytes::Bytes;

    // Test signatures: value = signer byte ‖ digest ‖ message, checked by recomputation.
    fn sign(signer: u64, digest: &Digest, attestation: Attestation) -> Signature {
        let message = attestation.to_bytes();
        let mut value = vec![signer as u8];
        value.extend(Signature::signed_bytes(digest, Some(&message)));
        Signature {
            signer: NodeId(signer),
            value: value.into(),
            message: Some(message),
        }
    }

    fn verify(sig: &Signature, digest: &Digest) -> Result<(), AppError> {
        let mut expected = vec![sig.signer.0 as u8];
        expected.extend(Signature::signed_bytes(digest, sig.message.as_ref()));
        (sig.value == expected).then_some(()).ok_or(AppError::BadSignature)
    }

    fn config(n: u64) -> Configuration {
        Configuration::new(
            (0..n)
                .map(|i| Consenter {
                    id: NodeId(i),
                    key: Bytes::new(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn proposal(view: u64, seq: u64, tag: &str) -> Proposal {
        let meta = ProposalMeta {
            view: View(view),
            sequence: Seq(seq),
        };
        Proposal::new(Bytes::new(), Bytes::copy_from_slice(tag.as_bytes()), meta.encode())
    }

    fn decision(seq: u64, signers: std::ops::Range<u64>) -> Decision {
        let p = proposal(0, seq, "decided");
        let signatures = signers.map(|s| sign(s, &p.digest(), Attestation::Commit)).collect();
        Decision {
            proposal: p,
            signatures,
        }
    }

    fn cert(view: u64, p: &Proposal, signers: std::ops::Range<u64>) -> PreparedCertificate {
        PreparedCertificate {
            view: View(view),
            sequence: p.meta().unwrap().sequence,
            proposal: p.clone(),
            votes: signers
                .map(|s| sign(s, &p.digest(), Attestation::Prepare { view: View(view) }))
                .collect(),
        }
    }

    fn vd(sender: u64, target: u64, last: Option<Decision>, prepared: Option<PreparedCertificate>) -> SignedViewData {
        let data = ViewData {
            next_view: View(target),
            last_decision: last,
            prepared,
        };
        let signature = sign(sender, &data.digest(), Attestation::ViewData);
        SignedViewData { data, signature }
    }

    #[test]
    fn idle_cluster_resumes_at_same_sequence() {
        let c = config(4);
        let d = decision(5, 0..3);
        let vds: Vec<_> = (0..3).map(|i| vd(i, 1, Some(d.clone()), None)).collect();
        let plan = select_new_view(View(1), &vds, &c, verify).unwrap();
        assert_eq!(plan.frontier_seq, Seq(5));
        assert_eq!(plan.next_seq, Seq(6));
        assert_eq!(plan.reproposal, None);
    }

    #[test]
    fn single_prepared_certificate_is_reproposed() {
        let c = config(4);
        let p = proposal(0, 1, "p");
        let vds = vec![
            vd(0, 1, None, None),
            vd(1, 1, None, Some(cert(0, &p, 0..3))),
            vd(2, 1, None, None),
        ];
        let plan = select_new_view(View(1), &vds, &c, verify).unwrap();
        assert_eq!(plan.next_seq, Seq(1));
        assert_eq!(plan.reproposal.map(|p| p.digest()), Some(p.digest()));
    }

    #[test]
    fn highest_view_certificate_wins() {
        let c = config(4);
        let old = proposal(0, 1, "old");
        let new = proposal(1, 1, "new");
        let vds = vec![
            vd(0, 2, None, Some(cert(0, &old, 0..3))),
            vd(1, 2, None, Some(cert(1, &new, 1..4))),
            vd(3, 2, None, None),
        ];
        let plan = select_new_view(View(2), &vds, &c, verify).unwrap();
        assert_eq!(plan.reproposal.unwrap().digest(), new.digest());
    }

    #[test]
    fn certificates_below_the_frontier_are_ignored() {
        let c = config(4);
        let stale = proposal(0, 3, "stale");
        let vds = vec![
            vd(0, 1, Some(decision(3, 0..3)), None),
            vd(1, 1, Some(decision(2, 0..3)), Some(cert(0, &stale, 0..3))),
            vd(2, 1, Some(decision(3, 0..3)), None),
        ];
        let plan = select_new_view(View(1), &vds, &c, verify).unwrap();
        assert_eq!(plan.next_seq, Seq(4));
        assert!(plan.reproposal.is_none());
    }

    #[test]
    fn too_few_or_duplicate_view_data_rejected() {
        let c = config(4);
        let vds = vec![vd(0, 1, None, None), vd(1, 1, None, None)];
        assert_eq!(
            select_new_view(View(1), &vds, &c, verify),
            Err(NewViewError::NotEnough { got: 2, need: 3 })
        );
        let vds = vec![vd(0, 1, None, None), vd(0, 1, None, None), vd(1, 1, None, None)];
        assert_eq!(
            select_new_view(View(1), &vds, &c, verify),
            Err(NewViewError::DuplicateSender(NodeId(0)))
        );
    }

    #[test]
    fn forged_certificates_are_rejected() {
        let c = config(4);
        let p = proposal(0, 1, "p");
        // Only two prepare votes.
        let weak = vd(1, 1, None, Some(cert(0, &p, 0..2)));
        let vds = vec![vd(0, 1, None, None), weak, vd(2, 1, None, None)];
        assert!(matches!(
            select_new_view(View(1), &vds, &c, verify),
            Err(NewViewError::Invalid(NodeId(1), ViewDataError::Prepared(_)))
        ));

        // Commit signatures relabelled as prepare votes.
        let mut relabelled = cert(0, &p, 0..3);
        relabelled.votes = (0..3).map(|s| sign(s, &p.digest(), Attestation::Commit)).collect();
        let vds = vec![vd(0, 1, None, None), vd(1, 1, None, Some(relabelled)), vd(2, 1, None, None)];
        assert!(select_new_view(View(1), &vds, &c, verify).is_err());

        // Tampered view data after signing.
        let mut tampered = vd(2, 1, None, None);
        tampered.data.last_decision = Some(decision(9, 0..3));
        let vds = vec![vd(0, 1, None, None), vd(1, 1, None, None), tampered];
        assert!(matches!(
            select_new_view(View(1), &vds, &c, verify),
            Err(NewViewError::Invalid(NodeId(2), ViewDataError::Signature(_)))
        ));

        // Decision with q - 1 signatures.
        let vds = vec![vd(0, 1, Some(decision(1, 0..2)), None), vd(1, 1, None, None), vd(2, 1, None, None)];
        assert!(matches!(
            select_new_view(View(1), &vds, &c, verify),
            Err(NewViewError::Invalid(NodeId(0), ViewDataError::LastDecision(_)))
        ));
    }

    #[test]
    fn view_data_for_another_view_rejected() {
        let c = config(4);
        let vds = vec![vd(0, 1, None, None), vd(1, 2, None, None), vd(2, 1, None, None)];
        assert!(matches!(
            select_new_view(View(1), &vds, &c, verify),
            Err(NewViewError::Invalid(NodeId(1), ViewDataError::WrongView { .. }))
        ));
    }

    #[test]
    fn selection_is_independent_of_order() {
        let c = config(7);
        let a = proposal(0, 1, "a");
        let b = proposal(2, 1, "b");
        let vds = vec![
            vd(0, 3, None, Some(cert(0, &a, 0..5))),
            vd(1, 3, None, Some(cert(2, &b, 2..7))),
            vd(2, 3, None, None),
            vd(3, 3, None, None),
            vd(4, 3, None, Some(cert(0, &a, 0..5))),
        ];
        let plan = select_new_view(View(3), &vds, &c, verify).unwrap();
        let mut reversed = vds.clone();
        reversed.reverse();
        assert_eq!(select_new_view(View(3), &reversed, &c, verify).unwrap(), plan);
        assert_eq!(plan.reproposal.unwrap().digest(), b.digest());
    }

    /// Exhaustive safety check at n = 4: if a proposal gathered commits from a
    /// quorum in some view (so q - f correct nodes hold its certificate), every
    /// quorum of view data the next leader could pick selects it, whatever the
    /// single Byzantine node reports.
    #[test]
    fn any_quorum_preserves_a_committed_proposal() {
        let c = config(4);
        let committed = proposal(1, 1, "committed");
        let rival = proposal(0, 1, "rival");
        let byz = 3u64;
        let byz_reports = [
            None,
            Some(cert(0, &rival, 0..3)),
            Some(cert(1, &committed, 0..3)),
        ];
        // Correct nodes 0..3; the commit quorum in view 1 was {0, 1, byz}, so
        // 0 and 1 hold the view-1 certificate; node 2 may hold the older rival.
        for byz_report in &byz_reports {
            for node2_has_rival in [false, true] {
                let all = [
                    vd(0, 2, None, Some(cert(1, &committed, 0..3))),
                    vd(1, 2, None, Some(cert(1, &committed, 0..3))),
                    vd(2, 2, None, node2_has_rival.then(|| cert(0, &rival, 0..3))),
                    vd(byz, 2, None, byz_report.clone()),
                ];
                for skip in 0..4 {
                    let quorum: Vec<_> = all
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != skip)
                        .map(|(_, v)| v.clone())
                        .collect();
                    let plan = select_new_view(View(2), &quorum, &c, verify).unwrap();
                    assert_eq!(
                        plan.reproposal.map(|p| p.digest()),
                        Some(committed.digest()),
                        "skip={skip} byz={byz_report:?}"
                    );
                }
            }
        }
    }
}
