//! The consensus state machine.
//!
//! [`Consensus`] is sans-IO: the host feeds it client requests, messages from
//! peers and clock ticks, and drains [`Output`]s to send. Everything runs on
//! the caller's thread, so application callbacks are never concurrent.
//!
//! One proposal is in flight at a time: sequence `s + 1` is proposed only after
//! `s` is delivered.

mod certificate;
mod view_change;

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use bytes::Bytes;
use serde::Serialize;
use tracing::{debug, info, warn};

use crate::app::{AppError, Application};
use crate::message::{ConsensusMessage, PreparedCertificate, SignedViewData, ViewData};
use crate::pool::{PoolError, PoolSettings, RequestPool};
use crate::types::{
    Attestation, ConfigError, Configuration, Decision, Digest, NodeId, Proposal, ProposalMeta, Reconfig, Request,
    RequestId, Seq, Signature, View,
};
use crate::wal::{Wal, WalError, WalPhase, WalRecord};

pub use certificate::{
    verify_decision, verify_prepared, verify_quorum, verify_view_data, CertificateError, ViewDataError,
};
pub use view_change::{select_new_view, NewViewError, NewViewPlan};

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Output {
    Send { to: NodeId, message: ConsensusMessage },
    /// A decision was handed to [`Application::deliver`].
    Delivered { view: View, sequence: Seq, digest: Digest },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    /// Pool capacity as a multiple of the batch size.
    pub pool_capacity_factor: usize,
    /// Recently delivered batches remembered for duplicate rejection.
    pub dedupe_window: usize,
    /// Early messages (future sequence or view) kept for replay.
    pub pending_limit: usize,
    /// Cap on the exponent of the new-view timeout backoff.
    pub max_backoff_exponent: u32,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            pool_capacity_factor: PoolSettings::DEFAULT_CAPACITY_FACTOR,
            dedupe_window: PoolSettings::DEFAULT_DEDUPE_WINDOW,
            pending_limit: 1024,
            max_backoff_exponent: 6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub decisions: u64,
    pub view_changes_started: u64,
    pub views_installed: u64,
    pub abandoned_view_changes: u64,
    pub equivocations_detected: u64,
    pub rejected_proposals: u64,
    pub invalid_messages: u64,
    pub syncs: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Wal(#[from] WalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("node {0} is not a consenter in the configuration")]
    NotAMember(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("request pool is full")]
    Full,
    #[error("request is already pending or was recently delivered")]
    Duplicate,
    #[error("node has halted")]
    Halted,
}

/// Per-sequence voting state.
#[derive(Debug)]
struct Slot {
    view: View,
    seq: Seq,
    /// Verified proposals, by digest.
    proposals: BTreeMap<Digest, Proposal>,
    /// First proposal digest seen from the leader (or mandated by a new view).
    leader_digest: Option<Digest>,
    /// Digest this node prepared. Never changes within a slot.
    accepted: Option<Digest>,
    /// Re-proposal fixed by the new-view selection.
    mandated: Option<Digest>,
    prepares: BTreeMap<Digest, BTreeMap<NodeId, Signature>>,
    commits: BTreeMap<Digest, BTreeMap<NodeId, Signature>>,
    prepare_voters: BTreeMap<NodeId, Digest>,
    commit_voters: BTreeMap<NodeId, Digest>,
    commit_sent: bool,
    /// This node delivered the slot's decision before the view changed.
    already_delivered: bool,
}

impl Slot {
    fn new(view: View, seq: Seq) -> Self {
        Self {
            view,
            seq,
            proposals: BTreeMap::new(),
            leader_digest: None,
            accepted: None,
            mandated: None,
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            prepare_voters: BTreeMap::new(),
            commit_voters: BTreeMap::new(),
            commit_sent: false,
            already_delivered: false,
        }
    }

    fn busy(&self) -> bool {
        self.accepted.is_some() || self.mandated.is_some()
    }
}

#[derive(Debug)]
struct ViewChangeState {
    target: View,
    last_resend: Duration,
    /// Own view data, once a quorum of view-change votes formed.
    view_data: Option<SignedViewData>,
    new_view_deadline: Option<Duration>,
    /// View data collected as the target view's leader.
    collected: BTreeMap<NodeId, SignedViewData>,
    new_view_sent: bool,
}

pub struct Consensus<A, W> {
    id: NodeId,
    config: Configuration,
    options: EngineOptions,
    app: A,
    wal: W,
    view: View,
    view_change: Option<ViewChangeState>,
    /// Latest view-change target announced by each node.
    vc_votes: BTreeMap<NodeId, View>,
    vc_attempt: u32,
    slot: Slot,
    last_decision: Option<Decision>,
    prepared: Option<PreparedCertificate>,
    pool: RequestPool,
    pending: VecDeque<(NodeId, ConsensusMessage)>,
    outbox: Vec<Output>,
    last_leader_activity: Duration,
    last_heartbeat_sent: Duration,
    next_sync_allowed: Duration,
    /// Leader sequence from the last heartbeat that showed this node behind.
    heartbeat_lag: Option<Seq>,
    last_new_view: Option<ConsensusMessage>,
    halted: Option<String>,
    stats: EngineStats,
}

impl<A: Application, W: Wal> Consensus<A, W> {
    /// Starts (or restarts) a node. `last_decision` is the newest decision in
    /// the application's ledger; view and voting locks are restored from `wal`.
    pub fn new(
        id: NodeId,
        config: Configuration,
        app: A,
        wal: W,
        last_decision: Option<Decision>,
        now: Duration,
    ) -> Result<Self, EngineError> {
        Self::with_options(id, config, app, wal, last_decision, now, EngineOptions::default())
    }

    pub fn with_options(
        id: NodeId,
        config: Configuration,
        app: A,
        wal: W,
        last_decision: Option<Decision>,
        now: Duration,
        options: EngineOptions,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        if !config.contains(id) {
            return Err(EngineError::NotAMember(id));
        }
        let record = wal.read_latest()?;
        let last_seq = last_decision.as_ref().and_then(Decision::sequence).unwrap_or_default();
        let view = record.as_ref().map(|r| r.view).unwrap_or_default();
        let prepared = record
            .as_ref()
            .and_then(|r| r.prepared.clone())
            .filter(|c| c.sequence > last_seq);
        let pool = RequestPool::new(pool_settings(&config, &options));
        let mut engine = Self {
            id,
            config,
            options,
            app,
            wal,
            view,
            view_change: None,
            vc_votes: BTreeMap::new(),
            vc_attempt: 0,
            slot: Slot::new(view, last_seq.next()),
            last_decision,
            prepared,
            pool,
            pending: VecDeque::new(),
            outbox: Vec::new(),
            last_leader_activity: now,
            last_heartbeat_sent: now,
            next_sync_allowed: now,
            heartbeat_lag: None,
            last_new_view: None,
            halted: None,
            stats: EngineStats::default(),
        };
        if let Some(record) = record {
            engine.resume(record);
        }
        Ok(engine)
    }

    /// Re-establishes the vote recorded before a restart, so the node never
    /// contradicts it, and re-sends it.
    fn resume(&mut self, record: WalRecord) {
        if record.view != self.slot.view || record.sequence != self.slot.seq {
            return;
        }
        let Some(digest) = record.digest else { return };
        info!(node = %self.id, view = %record.view, seq = %record.sequence, phase = ?record.phase, "resuming from wal");
        self.slot.accepted = Some(digest);
        self.slot.leader_digest = Some(digest);
        let view = self.slot.view;
        let sequence = self.slot.seq;
        let prepare = self.app.sign(&digest, Attestation::Prepare { view }.to_bytes());
        self.slot.prepare_voters.insert(self.id, digest);
        self.slot.prepares.entry(digest).or_default().insert(self.id, prepare.clone());
        self.broadcast(ConsensusMessage::Prepare {
            view,
            sequence,
            digest,
            signature: prepare,
        });
        if record.phase == WalPhase::Prepared {
            let Some(cert) = self.prepared.clone().filter(|c| c.proposal.digest() == digest) else {
                return;
            };
            self.slot.proposals.insert(digest, cert.proposal.clone());
            let commit = self.app.sign_proposal(&cert.proposal);
            self.slot.commit_sent = true;
            self.slot.commit_voters.insert(self.id, digest);
            self.slot.commits.entry(digest).or_default().insert(self.id, commit.clone());
            self.broadcast(ConsensusMessage::Commit {
                view,
                sequence,
                digest,
                signature: commit,
            });
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &Configuration {
        &self.config
    }

    pub fn view(&self) -> View {
        self.view
    }

    /// Sequence currently being decided.
    pub fn sequence(&self) -> Seq {
        self.slot.seq
    }

    pub fn last_decision(&self) -> Option<&Decision> {
        self.last_decision.as_ref()
    }

    pub fn is_leader(&self) -> bool {
        self.config.leader(self.view) == self.id
    }

    /// Target view while a view change is in progress.
    pub fn view_change_target(&self) -> Option<View> {
        self.view_change.as_ref().map(|vc| vc.target)
    }

    pub fn halted(&self) -> Option<&str> {
        self.halted.as_deref()
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn pool(&self) -> &RequestPool {
        &self.pool
    }

    pub fn app(&self) -> &A {
        &self.app
    }

    pub fn app_mut(&mut self) -> &mut A {
        &mut self.app
    }

    pub fn into_parts(self) -> (A, W) {
        (self.app, self.wal)
    }

    pub fn take_outputs(&mut self) -> Vec<Output> {
        std::mem::take(&mut self.outbox)
    }

    fn last_seq(&self) -> Seq {
        self.last_decision.as_ref().and_then(Decision::sequence).unwrap_or_default()
    }

    /// Queues a client request. The payload is assumed to have passed the
    /// application's admission checks.
    pub fn submit_request(&mut self, payload: impl Into<Bytes>, now: Duration) -> Result<RequestId, SubmitError> {
        if self.halted.is_some() {
            return Err(SubmitError::Halted);
        }
        let request = Request::new(payload);
        let id = request.id();
        self.pool.enqueue(request, now).map_err(|e| match e {
            PoolError::Duplicate => SubmitError::Duplicate,
            PoolError::Full => SubmitError::Full,
        })?;
        self.try_propose(now);
        Ok(id)
    }

    /// Earliest time [`Consensus::tick`] has work to do.
    pub fn next_deadline(&self) -> Option<Duration> {
        if self.halted.is_some() {
            return None;
        }
        let hb = self.config.heartbeat_interval;
        if let Some(vc) = &self.view_change {
            let resend = vc.last_resend + hb;
            return Some(vc.new_view_deadline.map_or(resend, |d| d.min(resend)));
        }
        if self.is_leader() {
            let heartbeat = self.last_heartbeat_sent + hb;
            let batch = if self.slot.busy() { None } else { self.pool.batch_deadline() };
            Some(batch.map_or(heartbeat, |b| b.min(heartbeat)))
        } else {
            let silence = self.last_leader_activity + self.config.leader_heartbeat_timeout;
            Some(self.pool.next_timer(self.view).map_or(silence, |t| t.min(silence)))
        }
    }

    pub fn tick(&mut self, now: Duration) {
        if self.halted.is_some() {
            return;
        }
        let hb = self.config.heartbeat_interval;
        if let Some(vc) = &mut self.view_change {
            let target = vc.target;
            if now >= vc.last_resend + hb {
                vc.last_resend = now;
                let resend = vc.view_data.clone();
                self.broadcast(ConsensusMessage::ViewChange { next_view: target });
                let leader = self.config.leader(target);
                if let (Some(svd), true) = (resend, leader != self.id) {
                    self.send(leader, ConsensusMessage::ViewData(svd));
                }
            }
            let expired = self
                .view_change
                .as_ref()
                .and_then(|vc| vc.new_view_deadline)
                .is_some_and(|d| now >= d);
            if expired {
                self.vc_attempt += 1;
                warn!(node = %self.id, view = %target, "no new view in time, escalating");
                self.start_view_change(target.next(), now, "new view timeout");
            }
            return;
        }
        if self.is_leader() {
            if now >= self.last_heartbeat_sent + hb {
                self.last_heartbeat_sent = now;
                self.broadcast(ConsensusMessage::Heartbeat {
                    view: self.view,
                    sequence: self.slot.seq,
                });
            }
            self.try_propose(now);
        } else {
            if now >= self.last_leader_activity + self.config.leader_heartbeat_timeout {
                self.start_view_change(self.view.next(), now, "leader silent");
                return;
            }
            if self.pool.complaint_due(now) {
                self.start_view_change(self.view.next(), now, "request complaint");
                return;
            }
            let leader = self.config.leader(self.view);
            for request in self.pool.due_forwards(now, self.view) {
                self.send(
                    leader,
                    ConsensusMessage::ForwardedRequest {
                        payload: request.payload().clone(),
                    },
                );
            }
        }
    }

    pub fn handle_message(&mut self, from: NodeId, message: ConsensusMessage, now: Duration) {
        if self.halted.is_some() || from == self.id || !self.config.contains(from) {
            return;
        }
        self.dispatch(from, message, now);
    }

    fn dispatch(&mut self, from: NodeId, message: ConsensusMessage, now: Duration) {
        match message {
            ConsensusMessage::ForwardedRequest { payload } => self.on_forwarded(payload, now),
            ConsensusMessage::ViewChange { next_view } => self.on_view_change(from, next_view, now),
            ConsensusMessage::ViewData(svd) => self.on_view_data(from, svd, now),
            ConsensusMessage::NewView { view, view_data } => self.on_new_view(from, view, view_data, now),
            ConsensusMessage::Heartbeat { view, sequence } => {
                if view == self.view && from == self.config.leader(view) {
                    self.last_leader_activity = now;
                }
                if view >= self.view {
                    self.observe_heartbeat(sequence, now);
                }
            }
            normal @ (ConsensusMessage::PrePrepare { .. }
            | ConsensusMessage::Prepare { .. }
            | ConsensusMessage::Commit { .. }) => self.on_normal_case(from, normal, now),
        }
    }

    fn on_normal_case(&mut self, from: NodeId, message: ConsensusMessage, now: Duration) {
        let (Some(view), Some(seq)) = (message.view(), message.sequence()) else {
            return;
        };
        if view < self.view || (view == self.view && seq < self.slot.seq) {
            return;
        }
        if view > self.view || seq > self.slot.seq {
            if view == self.view {
                self.observe_sequence(seq, now);
            }
            self.buffer(from, message);
            return;
        }
        let is_commit = matches!(message, ConsensusMessage::Commit { .. });
        if self.view_change.is_some() && !is_commit {
            // Kept in case the view change is abandoned.
            self.buffer(from, message);
            return;
        }
        match message {
            ConsensusMessage::PrePrepare { proposal, .. } => self.on_pre_prepare(from, proposal, now),
            ConsensusMessage::Prepare { digest, signature, .. } => self.on_prepare(from, digest, signature, now),
            ConsensusMessage::Commit { digest, signature, .. } => self.on_commit(from, digest, signature, now),
            _ => unreachable!("only normal-case messages reach here"),
        }
    }

    fn buffer(&mut self, from: NodeId, message: ConsensusMessage) {
        if self.pending.len() >= self.options.pending_limit {
            self.pending.pop_front();
        }
        self.pending.push_back((from, message));
    }

    fn replay_pending(&mut self, now: Duration) {
        let pending = std::mem::take(&mut self.pending);
        for (from, message) in pending {
            if self.halted.is_some() {
                return;
            }
            self.dispatch(from, message, now);
        }
    }

    fn send(&mut self, to: NodeId, message: ConsensusMessage) {
        self.outbox.push(Output::Send { to, message });
    }

    fn broadcast(&mut self, message: ConsensusMessage) {
        let peers: Vec<NodeId> = self.config.ids().filter(|&id| id != self.id).collect();
        for to in peers {
            self.send(to, message.clone());
        }
    }

    fn halt(&mut self, reason: String) {
        warn!(node = %self.id, %reason, "halting");
        self.halted = Some(reason);
    }

    fn persist(&mut self, phase: WalPhase, view: View, sequence: Seq, digest: Option<Digest>) -> bool {
        let record = WalRecord {
            view,
            sequence,
            phase,
            digest,
            prepared: self.prepared.clone(),
        };
        match self.wal.append(&record) {
            Ok(()) => true,
            Err(e) => {
                self.halt(format!("wal append failed: {e}"));
                false
            }
        }
    }

    fn verify_sig(&self, signature: &Signature, digest: &Digest) -> Result<(), AppError> {
        self.app.verify_signature(signature, digest)
    }

    // Normal case.

    fn try_propose(&mut self, now: Duration) {
        if self.halted.is_some() || self.view_change.is_some() || !self.is_leader() || self.slot.busy() {
            return;
        }
        let Some(batch) = self.pool.cut_batch(now) else { return };
        let meta = ProposalMeta {
            view: self.view,
            sequence: self.slot.seq,
        }
        .encode();
        let proposal = self.app.assemble(&meta, &batch);
        let included = self.app.requests_in(&proposal);
        let deferred: Vec<RequestId> = batch
            .iter()
            .map(Request::id)
            .filter(|id| !included.contains(id))
            .collect();
        self.pool.release(&deferred);
        if proposal.metadata != meta {
            warn!(node = %self.id, "assembled proposal does not carry the given metadata");
            self.pool.release(&included);
            return;
        }
        if included.is_empty() {
            return;
        }
        let digest = proposal.digest();
        debug!(node = %self.id, view = %self.view, seq = %self.slot.seq, %digest, requests = included.len(), "proposing");
        self.slot.leader_digest = Some(digest);
        self.last_heartbeat_sent = now;
        self.broadcast(ConsensusMessage::PrePrepare {
            view: self.view,
            sequence: self.slot.seq,
            proposal: proposal.clone(),
        });
        self.accept(proposal, now);
    }

    fn on_pre_prepare(&mut self, from: NodeId, proposal: Proposal, now: Duration) {
        let (view, seq) = (self.slot.view, self.slot.seq);
        if from != self.config.leader(view) {
            self.stats.invalid_messages += 1;
            return;
        }
        self.last_leader_activity = now;
        match proposal.meta() {
            Ok(meta) if meta.view == view && meta.sequence == seq => {}
            _ => {
                debug!(node = %self.id, "pre-prepare metadata mismatch");
                self.stats.rejected_proposals += 1;
                return;
            }
        }
        let digest = proposal.digest();
        if let Some(first) = self.slot.leader_digest {
            if first != digest {
                warn!(node = %self.id, %view, %seq, %first, second = %digest, "leader equivocated");
                self.stats.equivocations_detected += 1;
                // Kept (not prepared) so a certificate for either one can still be delivered.
                if self.app.verify_proposal(&proposal).is_ok() {
                    self.slot.proposals.insert(digest, proposal);
                    self.check_committed(now);
                }
                if self.halted.is_none() && self.slot.seq == seq && self.view == view {
                    self.start_view_change(view.next(), now, "leader equivocation");
                }
            }
            return;
        }
        self.slot.leader_digest = Some(digest);
        if self.slot.accepted.is_some_and(|a| a != digest) {
            // Locked by a vote recorded before a restart.
            return;
        }
        if let Err(e) = self.app.verify_proposal(&proposal) {
            warn!(node = %self.id, %view, %seq, error = %e, "rejecting proposal");
            self.stats.rejected_proposals += 1;
            return;
        }
        self.accept(proposal, now);
    }

    /// Records the vote durably, then sends it.
    fn accept(&mut self, proposal: Proposal, now: Duration) {
        let digest = proposal.digest();
        let (view, sequence) = (self.slot.view, self.slot.seq);
        self.slot.proposals.insert(digest, proposal);
        if self.slot.accepted != Some(digest) {
            if !self.persist(WalPhase::PrePrepared, view, sequence, Some(digest)) {
                return;
            }
            self.slot.accepted = Some(digest);
            let signature = self.app.sign(&digest, Attestation::Prepare { view }.to_bytes());
            self.broadcast(ConsensusMessage::Prepare {
                view,
                sequence,
                digest,
                signature: signature.clone(),
            });
            self.slot.prepare_voters.insert(self.id, digest);
            self.slot.prepares.entry(digest).or_default().insert(self.id, signature);
        }
        self.check_prepared(now);
        self.check_committed(now);
    }

    fn on_prepare(&mut self, from: NodeId, digest: Digest, signature: Signature, now: Duration) {
        let view = self.slot.view;
        if signature.signer != from
            || signature.attestation() != Some(Attestation::Prepare { view })
            || self.verify_sig(&signature, &digest).is_err()
        {
            self.stats.invalid_messages += 1;
            return;
        }
        match self.slot.prepare_voters.get(&from) {
            Some(d) if *d != digest => {
                self.stats.equivocations_detected += 1;
                return;
            }
            Some(_) => return,
            None => {}
        }
        self.slot.prepare_voters.insert(from, digest);
        self.slot.prepares.entry(digest).or_default().insert(from, signature);
        self.check_prepared(now);
    }

    fn check_prepared(&mut self, now: Duration) {
        if self.slot.commit_sent || self.halted.is_some() {
            return;
        }
        let Some(digest) = self.slot.accepted else { return };
        let Some(votes) = self.slot.prepares.get(&digest) else { return };
        if votes.len() < self.config.q {
            return;
        }
        let Some(proposal) = self.slot.proposals.get(&digest).cloned() else {
            return;
        };
        let (view, sequence) = (self.slot.view, self.slot.seq);
        self.prepared = Some(PreparedCertificate {
            view,
            sequence,
            proposal: proposal.clone(),
            votes: votes.values().take(self.config.q).cloned().collect(),
        });
        if !self.persist(WalPhase::Prepared, view, sequence, Some(digest)) {
            return;
        }
        let signature = self.app.sign_proposal(&proposal);
        self.slot.commit_sent = true;
        self.broadcast(ConsensusMessage::Commit {
            view,
            sequence,
            digest,
            signature: signature.clone(),
        });
        self.slot.commit_voters.insert(self.id, digest);
        self.slot.commits.entry(digest).or_default().insert(self.id, signature);
        self.check_committed(now);
    }

    fn on_commit(&mut self, from: NodeId, digest: Digest, signature: Signature, now: Duration) {
        if signature.signer != from || !signature.is_commit() || self.verify_sig(&signature, &digest).is_err() {
            self.stats.invalid_messages += 1;
            return;
        }
        match self.slot.commit_voters.get(&from) {
            Some(d) if *d != digest => {
                self.stats.equivocations_detected += 1;
                return;
            }
            Some(_) => return,
            None => {}
        }
        self.slot.commit_voters.insert(from, digest);
        self.slot.commits.entry(digest).or_default().insert(from, signature);
        self.check_committed(now);
    }

    fn check_committed(&mut self, now: Duration) {
        if self.halted.is_some() {
            return;
        }
        let q = self.config.q;
        let ready = self
            .slot
            .commits
            .iter()
            .find(|(d, votes)| votes.len() >= q && self.slot.proposals.contains_key(d))
            .map(|(d, _)| *d);
        let Some(digest) = ready else { return };
        let decision = Decision {
            proposal: self.slot.proposals[&digest].clone(),
            signatures: self.slot.commits[&digest].values().take(q).cloned().collect(),
        };
        let view = self.slot.view;
        if self.slot.already_delivered {
            let seq = self.slot.seq;
            self.advance(seq, Reconfig::Unchanged, now);
        } else {
            self.commit_decision(decision, view, now);
        }
        self.abandon_view_change(now);
        self.replay_pending(now);
        self.try_propose(now);
    }

    /// Hands a certified decision to the application and moves to the next slot.
    fn commit_decision(&mut self, decision: Decision, view: View, now: Duration) {
        let digest = decision.proposal.digest();
        let Some(sequence) = decision.sequence() else {
            warn!(node = %self.id, "decision without readable metadata");
            return;
        };
        debug!(node = %self.id, %view, seq = %sequence, %digest, "delivering");
        let reconfig = self.app.deliver(&decision);
        self.outbox.push(Output::Delivered { view, sequence, digest });
        self.stats.decisions += 1;
        let ids = self.app.requests_in(&decision.proposal);
        self.pool.prune_delivered(&ids);
        self.last_decision = Some(decision);
        self.advance(sequence, reconfig, now);
    }

    fn advance(&mut self, delivered: Seq, reconfig: Reconfig, now: Duration) {
        if self.prepared.as_ref().is_some_and(|c| c.sequence <= delivered) {
            self.prepared = None;
        }
        self.slot = Slot::new(self.view, delivered.next());
        self.last_leader_activity = now;
        if let Reconfig::Changed(config) = reconfig {
            self.apply_config(config, now);
        }
    }

    fn apply_config(&mut self, config: Configuration, now: Duration) {
        info!(node = %self.id, n = config.n, f = config.f, q = config.q, "configuration changed");
        self.config = config;
        if !self.config.contains(self.id) {
            self.halt("removed from the consenter set".into());
            return;
        }
        self.pool.update_settings(pool_settings(&self.config, &self.options));
        let app = &self.app;
        let evicted = self.pool.reverify(|payload| app.verify_request(payload));
        if !evicted.is_empty() {
            info!(node = %self.id, evicted = evicted.len(), "evicted requests after reconfiguration");
        }
        let config = &self.config;
        self.vc_votes.retain(|id, _| config.contains(*id));
        if let Some(vc) = &mut self.view_change {
            vc.collected.retain(|id, _| config.contains(*id));
        }
        self.last_leader_activity = now;
    }

    fn on_forwarded(&mut self, payload: Bytes, now: Duration) {
        if self.view_change.is_some() || !self.is_leader() {
            return;
        }
        if let Err(e) = self.app.verify_request(&payload) {
            debug!(node = %self.id, error = %e, "dropping forwarded request");
            return;
        }
        let _ = self.pool.enqueue(Request::new(payload), now);
        self.try_propose(now);
    }

    // Catching up.

    /// A lag below the sync threshold still triggers a sync once two
    /// heartbeats in a row report the same sequence ahead of this node.
    fn observe_heartbeat(&mut self, seq: Seq, now: Duration) {
        if seq <= self.slot.seq {
            self.heartbeat_lag = None;
            return;
        }
        if self.heartbeat_lag == Some(seq) {
            self.heartbeat_lag = None;
            self.catch_up(now);
            return;
        }
        self.heartbeat_lag = Some(seq);
        self.observe_sequence(seq, now);
    }

    fn observe_sequence(&mut self, seq: Seq, now: Duration) {
        if seq.0 >= self.slot.seq.0 + self.config.sync_lag_threshold {
            self.catch_up(now);
        }
    }

    fn catch_up(&mut self, now: Duration) {
        if now >= self.next_sync_allowed && self.sync(now) {
            self.abandon_view_change(now);
            self.replay_pending(now);
            self.try_propose(now);
        }
    }

    /// Pulls missing decisions through the application. Returns whether the
    /// local frontier moved.
    fn sync(&mut self, now: Duration) -> bool {
        self.stats.syncs += 1;
        self.next_sync_allowed = now + self.config.heartbeat_interval;
        let before = self.last_seq();
        let outcome = self.app.sync();
        let latest = outcome.latest.as_ref().and_then(Decision::sequence).unwrap_or_default();
        info!(node = %self.id, from = %before, to = %latest, "synced");
        if let Reconfig::Changed(config) = outcome.reconfig {
            self.apply_config(config, now);
        }
        if latest <= before {
            return false;
        }
        self.last_decision = outcome.latest;
        let app = &self.app;
        self.pool.reverify(|payload| app.verify_request(payload));
        self.advance(latest, Reconfig::Unchanged, now);
        true
    }

    // View change.

    fn current_target(&self) -> View {
        self.view_change.as_ref().map_or(self.view, |vc| vc.target)
    }

    fn start_view_change(&mut self, target: View, now: Duration, reason: &str) {
        if self.halted.is_some() || target <= self.current_target() {
            return;
        }
        info!(node = %self.id, view = %self.view, %target, reason, "starting view change");
        self.stats.view_changes_started += 1;
        self.view_change = Some(ViewChangeState {
            target,
            last_resend: now,
            view_data: None,
            new_view_deadline: None,
            collected: BTreeMap::new(),
            new_view_sent: false,
        });
        self.pool.release_all();
        self.vc_votes.insert(self.id, target);
        self.broadcast(ConsensusMessage::ViewChange { next_view: target });
        self.check_view_change_votes(now);
        self.replay_pending(now);
    }

    /// Drops a view change this node started alone once the current view
    /// turns out to be making progress.
    fn abandon_view_change(&mut self, now: Duration) {
        let Some(vc) = &self.view_change else { return };
        if vc.view_data.is_some() {
            return;
        }
        debug!(node = %self.id, target = %vc.target, "abandoning view change, current view progressed");
        self.view_change = None;
        self.vc_votes.remove(&self.id);
        self.stats.abandoned_view_changes += 1;
        self.last_leader_activity = now;
    }

    fn on_view_change(&mut self, from: NodeId, next_view: View, now: Duration) {
        if next_view <= self.view {
            // A node that missed the new view: re-send it.
            if next_view <= self.view && self.is_leader() && self.view_change.is_none() {
                if let Some(nv) = self.last_new_view.clone() {
                    self.send(from, nv);
                }
            }
            return;
        }
        let entry = self.vc_votes.entry(from).or_default();
        if next_view > *entry {
            *entry = next_view;
        }
        self.check_view_change_votes(now);
    }

    fn check_view_change_votes(&mut self, now: Duration) {
        let target = self.current_target();
        let mut higher: Vec<View> = self
            .vc_votes
            .iter()
            .filter(|(id, v)| **id != self.id && **v > target)
            .map(|(_, v)| *v)
            .collect();
        if higher.len() > self.config.f {
            // f + 1 nodes want to move on, so at least one correct node does.
            higher.sort_unstable_by(|a, b| b.cmp(a));
            let join = higher[self.config.f];
            self.start_view_change(join, now, "joining view change");
            return;
        }
        let Some(vc) = &self.view_change else { return };
        if vc.view_data.is_some() {
            return;
        }
        let votes = self.vc_votes.values().filter(|v| **v == vc.target).count();
        if votes >= self.config.q {
            self.send_view_data(now);
        }
    }

    fn send_view_data(&mut self, now: Duration) {
        let Some(target) = self.view_change.as_ref().map(|vc| vc.target) else {
            return;
        };
        let last = self.last_seq();
        let data = ViewData {
            next_view: target,
            last_decision: self.last_decision.clone(),
            prepared: self.prepared.clone().filter(|c| c.sequence == last.next()),
        };
        let signature = self.app.sign(&data.digest(), Attestation::ViewData.to_bytes());
        let svd = SignedViewData { data, signature };
        let backoff = 1u32 << self.vc_attempt.min(self.options.max_backoff_exponent);
        let deadline = now + self.config.view_change_timeout * backoff;
        if let Some(vc) = &mut self.view_change {
            vc.view_data = Some(svd.clone());
            vc.new_view_deadline = Some(deadline);
        }
        debug!(node = %self.id, %target, "sending view data");
        let leader = self.config.leader(target);
        if leader == self.id {
            self.on_view_data(self.id, svd, now);
        } else {
            self.send(leader, ConsensusMessage::ViewData(svd));
        }
    }

    fn on_view_data(&mut self, from: NodeId, svd: SignedViewData, now: Duration) {
        let target = svd.data.next_view;
        if svd.signature.signer != from || self.config.leader(target) != self.id || target <= self.view {
            return;
        }
        let current = self.current_target();
        if target > current {
            self.buffer(from, ConsensusMessage::ViewData(svd));
            return;
        }
        if target < current {
            return;
        }
        if let Err(e) = verify_view_data(&svd, target, &self.config, |s, d| self.verify_sig(s, d)) {
            warn!(node = %self.id, %from, error = %e, "invalid view data");
            self.stats.invalid_messages += 1;
            return;
        }
        let Some(vc) = &mut self.view_change else { return };
        if vc.new_view_sent {
            return;
        }
        vc.collected.insert(from, svd);
        if vc.collected.len() < self.config.q {
            return;
        }
        let view_data: Vec<SignedViewData> = vc.collected.values().cloned().collect();
        let plan = match select_new_view(target, &view_data, &self.config, |s, d| self.verify_sig(s, d)) {
            Ok(plan) => plan,
            Err(e) => {
                warn!(node = %self.id, %target, error = %e, "cannot build new view yet");
                return;
            }
        };
        if let Some(vc) = &mut self.view_change {
            vc.new_view_sent = true;
        }
        info!(node = %self.id, view = %target, next_seq = %plan.next_seq, reproposal = plan.reproposal.is_some(), "broadcasting new view");
        let new_view = ConsensusMessage::NewView {
            view: target,
            view_data,
        };
        self.broadcast(new_view.clone());
        self.last_new_view = Some(new_view);
        self.install(plan, now);
    }

    fn on_new_view(&mut self, from: NodeId, view: View, view_data: Vec<SignedViewData>, now: Duration) {
        if from != self.config.leader(view) || view <= self.view || view < self.current_target() {
            return;
        }
        match select_new_view(view, &view_data, &self.config, |s, d| self.verify_sig(s, d)) {
            Ok(plan) => self.install(plan, now),
            Err(e) => {
                warn!(node = %self.id, %view, error = %e, "rejecting new view");
                self.stats.invalid_messages += 1;
                self.start_view_change(view.next(), now, "invalid new view");
            }
        }
    }

    fn install(&mut self, plan: NewViewPlan, now: Duration) {
        let view = plan.view;
        info!(node = %self.id, %view, next_seq = %plan.next_seq, "installing view");
        self.view = view;
        self.view_change = None;
        self.vc_attempt = 0;
        self.vc_votes.retain(|_, v| *v > view);
        self.stats.views_installed += 1;
        self.last_leader_activity = now;
        self.last_heartbeat_sent = now;
        self.pool.release_all();
        self.pool.reset_timers(now);

        let last = self.last_seq();
        if plan.frontier_seq > last {
            match plan.frontier.clone() {
                Some(frontier) if plan.frontier_seq == last.next() => {
                    self.commit_decision(frontier, view, now);
                }
                _ => {
                    self.sync(now);
                }
            }
        }
        if self.halted.is_some() {
            return;
        }
        let last = self.last_seq();
        self.slot = Slot::new(view, last.next());
        if !self.persist(WalPhase::ViewAdopted, view, plan.next_seq, None) {
            return;
        }
        if let Some(proposal) = plan.reproposal {
            let digest = proposal.digest();
            if last.next() == plan.next_seq {
                self.slot.mandated = Some(digest);
                self.slot.leader_digest = Some(digest);
                if let Err(e) = self.app.verify_proposal(&proposal) {
                    warn!(node = %self.id, %view, error = %e, "re-proposal fails verification");
                    self.stats.rejected_proposals += 1;
                    self.start_view_change(view.next(), now, "invalid re-proposal");
                    return;
                }
                self.accept(proposal, now);
            } else if last == plan.next_seq
                && self.last_decision.as_ref().map(|d| d.proposal.digest()) == Some(digest)
            {
                // Delivered here before the view changed; vote again so the
                // others can finish it.
                self.slot = Slot::new(view, plan.next_seq);
                self.slot.mandated = Some(digest);
                self.slot.leader_digest = Some(digest);
                self.slot.already_delivered = true;
                self.accept(proposal, now);
            } else {
                warn!(node = %self.id, %view, %last, next = %plan.next_seq, "cannot take part in re-proposal");
            }
        }
        if self.halted.is_some() {
            return;
        }
        self.replay_pending(now);
        self.try_propose(now);
    }
}

fn pool_settings(config: &Configuration, options: &EngineOptions) -> PoolSettings {
    PoolSettings {
        capacity: config.batch_max_count * options.pool_capacity_factor,
        dedupe_window: options.dedupe_window,
        ..PoolSettings::from_config(config)
    }
}
