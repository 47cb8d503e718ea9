//! The simulated cluster: real engines and ordering apps on a simulated
//! network and clock, driven by one deterministic event loop.
//!
//! Each node processes one input at a time. An input arriving while the node
//! is busy waits in its inbox; processing charges simulated CPU time from the
//! scenario's cost model, and whatever the node sends leaves when that work
//! is done.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use bftorder::transport::sim::{DropRule, Partition, SimNetwork};
use bftorder::{
    AppError, Application, Attestation, Consensus, ConsensusMessage, Consenter, Digest, MemWal, NodeId, Output, Seq,
    SignedViewData, SubmitError, View,
};
use bftorder_ordering::app::config_of;
use bftorder_ordering::{
    genesis_block, Block, BlockStore, ChannelConfig, Keypair, MonitorSettings, OrderingApp, Transaction, TxKind,
};
use bytes::Bytes;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::{debug, info};

use crate::app::{peers_of, Censor, NodeSource, SimApp};
use crate::consumer::Consumer;
use crate::invariants::check_invariants;
use crate::profile::Profile;
use crate::report::{ConfigBlock, LatencyStats, RunReport};
use crate::scenario::{CensorTarget, CostModel, Fault, Policy, Scenario, ScenarioError, SubmitTo};
use crate::trace::{Event, EventKind, NodeTrace, Trace, TxRecord, VotePhase};

/// Re-arm delay for a timer that did not move after firing.
const TIMER_GUARD: Duration = Duration::from_millis(1);
/// Back-off range for a submission bounced by a full pool.
const FULL_RETRY_MS: (u64, u64) = (50, 100);

pub fn consenter_key(id: NodeId) -> Keypair {
    Keypair::derive("consenter", id.0)
}

pub fn client_key(client: usize) -> Keypair {
    Keypair::derive("client", client as u64)
}

pub fn admin_key() -> Keypair {
    Keypair::derive("admin", 0)
}

/// Channel configuration at genesis for `scenario`.
pub fn genesis_config(scenario: &Scenario) -> Result<ChannelConfig, ScenarioError> {
    let consenters = (0..scenario.n as u64)
        .map(|i| Consenter {
            id: NodeId(i),
            key: consenter_key(NodeId(i)).public(),
        })
        .collect();
    let mut consensus = bftorder::Configuration::new(consenters).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    consensus.batch_max_count = scenario.batch_max_count;
    let consensus = scenario.timers.apply(consensus);
    consensus.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    Ok(ChannelConfig {
        consensus,
        clients: (0..scenario.clients).map(|c| client_key(c).public()).collect(),
        admins: vec![admin_key().public()],
    })
}

/// Workload transaction `index`, signed by client `index mod clients` and
/// padded to `tx_size` encoded bytes.
pub fn workload_tx(index: usize, keys: &[Keypair], tx_size: usize) -> Bytes {
    let key = &keys[index % keys.len()];
    let overhead = Transaction::signed(TxKind::Ordinary, Bytes::new(), key).encode().len();
    let mut body = vec![0u8; tx_size.saturating_sub(overhead).max(8)];
    body[..8].copy_from_slice(&(index as u64).to_be_bytes());
    Transaction::signed(TxKind::Ordinary, body, key).encode()
}

/// Everything a finished run produced.
pub struct RunOutcome {
    pub report: RunReport,
    pub trace: Trace,
    /// Final block store of every node that ever ran.
    pub stores: Vec<(NodeId, BlockStore)>,
}

pub fn run(scenario: &Scenario, seed: u64) -> Result<RunOutcome, ScenarioError> {
    scenario.validate()?;
    let cluster = Cluster::new(scenario, seed)?;
    Ok(cluster.run())
}

#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
enum Input {
    Message(NodeId, ConsensusMessage),
    Submit(usize),
    Config(usize),
}

#[derive(Debug, Clone, Copy)]
enum Sched {
    Worker(usize),
    Resubmit(usize),
    /// Re-offer a transaction to one node after its pool was full.
    Retry(usize, NodeId),
    RetryConfig(usize, NodeId),
    Crash(NodeId),
    Restart(NodeId, bool),
    Reconfig(usize),
    Join(NodeId),
    Poll,
}

impl Sched {
    /// Events that must happen before a run counts as complete.
    fn is_fault(&self) -> bool {
        matches!(self, Sched::Crash(_) | Sched::Restart(..) | Sched::Reconfig(_) | Sched::Join(_))
    }
}

struct Equivocation {
    a: Digest,
    b: Digest,
    b_set: BTreeSet<NodeId>,
}

#[derive(Default)]
struct Counters {
    equivocations: u64,
    proposals_rejected: u64,
    sync_rejections: u64,
}

struct Node {
    id: NodeId,
    engine: Option<Consensus<SimApp, MemWal>>,
    wal: MemWal,
    store: Option<BlockStore>,
    source: Arc<NodeSource>,
    policy: Option<Policy>,
    censor: Option<Censor>,
    crash_after_wal: Option<(u64, Duration)>,
    busy_until: Duration,
    timer_floor: Duration,
    inbox: VecDeque<(Duration, Input)>,
    events: Vec<Event>,
    proposed: HashSet<(View, Seq)>,
    voted: HashSet<(VotePhase, View, Seq, Digest)>,
    height: u64,
    view: View,
    halted: bool,
    equivocations: HashMap<(View, Seq), Equivocation>,
    counters: Counters,
    configs_seen: usize,
}

impl Node {
    fn byzantine(&self) -> bool {
        self.policy.is_some()
    }

    fn running(&self) -> bool {
        self.engine.as_ref().is_some_and(|e| e.halted().is_none())
    }

    fn record(&mut self, now: Duration, kind: EventKind) {
        self.events.push(Event {
            at_us: now.as_micros() as u64,
            kind,
        });
    }

    fn absorb_counters(&mut self) {
        if let Some(engine) = &self.engine {
            self.counters.equivocations += engine.stats().equivocations_detected;
            self.counters.proposals_rejected += engine.app().inner.stats().proposals_rejected;
            self.counters.sync_rejections += engine.app().inner.stats().sync_rejections;
        }
    }
}

struct TxState {
    payload: Bytes,
    id: Digest,
    client: usize,
    worker: usize,
    submitted: Option<Duration>,
    delivered: Option<Duration>,
    accepted_correct: bool,
    round_targets: usize,
    round_answers: usize,
    round_accepted: bool,
    rejected: bool,
}

impl TxState {
    fn resolved(&self) -> bool {
        self.delivered.is_some() || self.rejected
    }
}

struct ConfigState {
    payload: Bytes,
    removed_clients: BTreeSet<usize>,
    block: Option<ConfigBlock>,
}

struct Cluster<'a> {
    scenario: &'a Scenario,
    seed: u64,
    profile: Profile,
    cost: CostModel,
    rng: ChaCha8Rng,
    now: Duration,
    limit: Duration,
    net: SimNetwork,
    nodes: Vec<Node>,
    sources: Vec<(NodeId, Arc<NodeSource>)>,
    genesis: Block,
    members: Vec<NodeId>,
    client_keys: Vec<Keypair>,
    sched: BTreeMap<(Duration, u64), Sched>,
    sched_counter: u64,
    pending_faults: usize,
    txs: Vec<TxState>,
    tx_by_id: HashMap<Digest, usize>,
    next_tx: usize,
    resolved: usize,
    configs: Vec<ConfigState>,
    config_by_id: HashMap<Digest, usize>,
    resubmit_after: Duration,
    consumer: Option<Consumer>,
    poll_every: Duration,
    linger: Duration,
    views_installed: BTreeSet<View>,
}

fn est_txs(payload_len: usize, tx_size: usize) -> u64 {
    (payload_len / (tx_size + 8)).max(1) as u64
}

fn view_data_sigs(svd: &SignedViewData) -> u64 {
    let decision = svd.data.last_decision.as_ref().map_or(0, |d| d.signatures.len());
    let prepared = svd.data.prepared.as_ref().map_or(0, |p| p.votes.len());
    (1 + decision + prepared) as u64
}

fn input_cost(c: &CostModel, message: &ConsensusMessage, tx_size: usize) -> u64 {
    let work = match message {
        ConsensusMessage::PrePrepare { proposal, .. } => c.per_tx_us * est_txs(proposal.payload.len(), tx_size),
        ConsensusMessage::Prepare { .. } | ConsensusMessage::Commit { .. } => c.per_signature_us,
        ConsensusMessage::ViewData(svd) => c.per_signature_us * view_data_sigs(svd),
        ConsensusMessage::NewView { view_data, .. } => {
            c.per_signature_us * view_data.iter().map(view_data_sigs).sum::<u64>()
        }
        ConsensusMessage::ForwardedRequest { .. } => c.per_tx_us,
        ConsensusMessage::ViewChange { .. } | ConsensusMessage::Heartbeat { .. } => 0,
    };
    c.per_message_us + c.per_kib_us * (message.wire_size() / 1024) + work
}

fn output_cost(c: &CostModel, sends: &[(NodeId, ConsensusMessage)], tx_size: usize) -> u64 {
    let mut cost = 0;
    let mut signed = HashSet::new();
    let mut assembled = HashSet::new();
    for (_, m) in sends {
        cost += c.per_kib_us * (m.wire_size() / 1024);
        match m {
            ConsensusMessage::Prepare { digest, .. } | ConsensusMessage::Commit { digest, .. } => {
                if signed.insert((m.kind(), *digest)) {
                    cost += c.per_signature_us;
                }
            }
            ConsensusMessage::ViewData(svd) => {
                if signed.insert((m.kind(), svd.data.digest())) {
                    cost += c.per_signature_us;
                }
            }
            ConsensusMessage::PrePrepare {
                view,
                sequence,
                proposal,
            }
                if assembled.insert((*view, *sequence)) => {
                    cost += c.per_tx_us * est_txs(proposal.payload.len(), tx_size);
                }
            _ => {}
        }
    }
    cost
}

impl<'a> Cluster<'a> {
    fn new(scenario: &'a Scenario, seed: u64) -> Result<Self, ScenarioError> {
        let profile = scenario.profile()?;
        let config = genesis_config(scenario)?;
        let genesis = genesis_block(&config, &admin_key());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let max_id = scenario
            .reconfig
            .iter()
            .flat_map(|r| r.add.iter().copied())
            .max()
            .map_or(scenario.n as u64, |m| m.max(scenario.n as u64 - 1) + 1);
        let ids: Vec<NodeId> = (0..max_id).map(NodeId).collect();

        let mut net = SimNetwork::new(rng.gen(), profile.link(NodeId(0), NodeId(0)));
        for &a in &ids {
            for &b in &ids {
                net.set_link(a, b, profile.link(a, b));
            }
        }
        net.set_uplink(profile.uplink_bytes_per_sec());

        let client_keys: Vec<Keypair> = (0..scenario.clients).map(client_key).collect();
        let mut policy: BTreeMap<NodeId, Policy> = BTreeMap::new();
        let mut censor: BTreeMap<NodeId, Censor> = BTreeMap::new();
        let mut crash_after_wal = BTreeMap::new();
        let ms = Duration::from_millis;
        for fault in &scenario.faults {
            match fault {
                Fault::Byzantine { node, policy: p } => {
                    policy.insert(NodeId(*node), *p);
                }
                Fault::Censor { node, target } => {
                    let c = match target {
                        CensorTarget::Client(c) => Censor::Client(client_keys[*c].public()),
                        CensorTarget::Tx(i) => Censor::Tx(Digest::of(&workload_tx(*i, &client_keys, scenario.tx_size))),
                    };
                    censor.insert(NodeId(*node), c);
                }
                Fault::CrashAfterWal {
                    node,
                    appends,
                    restart_after_ms,
                } => {
                    crash_after_wal.insert(NodeId(*node), (*appends, ms(*restart_after_ms)));
                }
                Fault::Partition { groups, from_ms, to_ms } => net.add_partition(Partition {
                    groups: groups.iter().map(|g| g.iter().map(|i| NodeId(*i)).collect()).collect(),
                    start: ms(*from_ms),
                    end: ms(*to_ms),
                }),
                Fault::Drop {
                    from,
                    to,
                    message,
                    probability,
                    from_ms,
                    to_ms,
                } => net.add_drop_rule(DropRule {
                    from: from.map(NodeId),
                    to: to.map(NodeId),
                    kind: *message,
                    probability: *probability,
                    window: Some((ms(from_ms.unwrap_or(0)), to_ms.map_or(Duration::MAX, ms))),
                }),
                Fault::Crash { .. } | Fault::WithholdBlocks { .. } | Fault::WithholdHeaders { .. } => {}
            }
        }

        let sources: Vec<(NodeId, Arc<NodeSource>)> = ids
            .iter()
            .map(|id| {
                let forge = policy.get(id) == Some(&Policy::ForgeBlocks);
                (*id, Arc::new(NodeSource::new(forge)))
            })
            .collect();
        let nodes = ids
            .iter()
            .zip(&sources)
            .map(|(id, (_, source))| Node {
                id: *id,
                engine: None,
                wal: MemWal::new(),
                store: None,
                source: source.clone(),
                policy: policy.get(id).copied(),
                censor: censor.get(id).cloned(),
                crash_after_wal: crash_after_wal.get(id).copied(),
                busy_until: Duration::ZERO,
                timer_floor: Duration::ZERO,
                inbox: VecDeque::new(),
                events: Vec::new(),
                proposed: HashSet::new(),
                voted: HashSet::new(),
                height: 0,
                view: View(0),
                halted: false,
                equivocations: HashMap::new(),
                counters: Counters::default(),
                configs_seen: 0,
            })
            .collect();

        let consensus = &config.consensus;
        let resubmit_after = consensus.request_complaint_timeout * 2 + consensus.view_change_timeout;
        let consumer = scenario.consumer.as_ref().map(|spec| {
            let threshold = spec.threshold_ms.map_or(consensus.batch_timeout * 2, ms);
            let settings = MonitorSettings {
                f: scenario.f(),
                threshold,
                quarantine: threshold,
            };
            let initial: Vec<NodeId> = (0..scenario.n as u64).map(NodeId).collect();
            let mut consumer = Consumer::new(genesis.clone(), settings, initial, NodeId(spec.provider), rng.gen());
            for fault in &scenario.faults {
                match fault {
                    Fault::WithholdBlocks { node, from_ms } => consumer.withhold_blocks(NodeId(*node), ms(*from_ms)),
                    Fault::WithholdHeaders { node, from_ms } => consumer.withhold_headers(NodeId(*node), ms(*from_ms)),
                    _ => {}
                }
            }
            consumer
        });
        let (poll_every, linger) = match (&scenario.consumer, &consumer) {
            (Some(spec), Some(c)) => {
                let threshold = Duration::from_secs_f64(c.report().threshold_ms / 1000.0);
                (ms(spec.poll_ms), threshold * 2 + ms(spec.poll_ms) * 3)
            }
            _ => (Duration::ZERO, Duration::ZERO),
        };

        let mut cluster = Self {
            scenario,
            seed,
            profile,
            cost: scenario.cost,
            rng,
            now: Duration::ZERO,
            limit: scenario.duration_limit(),
            net,
            nodes,
            sources,
            genesis,
            members: consensus.ids().collect(),
            client_keys,
            sched: BTreeMap::new(),
            sched_counter: 0,
            pending_faults: 0,
            txs: Vec::new(),
            tx_by_id: HashMap::new(),
            next_tx: 0,
            resolved: 0,
            configs: Vec::new(),
            config_by_id: HashMap::new(),
            resubmit_after,
            consumer,
            poll_every,
            linger,
            views_installed: BTreeSet::new(),
        };
        cluster.setup();
        Ok(cluster)
    }

    fn schedule(&mut self, at: Duration, event: Sched) {
        if event.is_fault() {
            self.pending_faults += 1;
        }
        self.sched_counter += 1;
        self.sched.insert((at, self.sched_counter), event);
    }

    fn setup(&mut self) {
        for i in 0..self.scenario.n {
            self.start_node(NodeId(i as u64), false);
        }
        let ms = Duration::from_millis;
        for fault in &self.scenario.faults {
            if let Fault::Crash {
                node,
                at_ms,
                restart_at_ms,
                wipe,
            } = fault
            {
                self.schedule(ms(*at_ms), Sched::Crash(NodeId(*node)));
                if let Some(r) = restart_at_ms {
                    self.schedule(ms(*r), Sched::Restart(NodeId(*node), *wipe));
                }
            }
        }
        for (k, step) in self.scenario.reconfig.iter().enumerate() {
            self.schedule(ms(step.at_ms), Sched::Reconfig(k));
        }
        for w in 0..self.scenario.workers() {
            let at = Duration::from_micros(self.rng.gen_range(0..1000));
            self.schedule(at, Sched::Worker(w));
        }
        if self.consumer.is_some() {
            self.schedule(self.poll_every, Sched::Poll);
        }
    }

    /// Boots `id` from its store (a fresh one when `wipe` or on first start),
    /// catching up from peers before the engine starts.
    fn start_node(&mut self, id: NodeId, wipe: bool) -> bool {
        let now = self.now;
        let genesis = self.genesis.clone();
        let peers = peers_of(id, &self.sources);
        let node = &mut self.nodes[id.0 as usize];
        let fresh = wipe || node.store.is_none();
        let store = match (&node.store, fresh) {
            (Some(store), false) => store.clone(),
            _ => BlockStore::in_memory(genesis),
        };
        let mut app = match OrderingApp::new(id, consenter_key(id), store.clone()) {
            Ok(app) => app.with_peers(peers),
            Err(e) => panic!("node {id}: store without a readable config: {e}"),
        };
        app.sync_from_peers();
        let config = app.config().consensus.clone();
        let last = app.last_decision();
        let app = SimApp::new(app, node.censor.clone());
        match Consensus::new(id, config, app, node.wal.clone(), last, now) {
            Ok(engine) => {
                node.engine = Some(engine);
                node.store = Some(store.clone());
                node.source.set(Some(store.clone()));
                node.busy_until = now;
                node.timer_floor = now;
                node.halted = false;
                true
            }
            Err(e) => {
                debug!(node = %id, error = %e, "node cannot start yet");
                false
            }
        }
    }

    fn run(mut self) -> RunOutcome {
        let mut completed_at: Option<Duration> = None;
        loop {
            if let Some(done) = completed_at {
                if self.now >= done + self.linger {
                    break;
                }
            } else if self.complete() {
                info!(scenario = %self.scenario.name, at = ?self.now, "workload complete");
                completed_at = Some(self.now);
                if self.linger.is_zero() {
                    break;
                }
            }
            let Some((at, choice)) = self.next_step() else { break };
            if at > self.limit {
                self.now = self.limit;
                break;
            }
            if let Some(done) = completed_at {
                if at > done + self.linger {
                    self.now = done + self.linger;
                    break;
                }
            }
            self.now = at;
            match choice {
                Choice::Sched(key) => {
                    let event = self.sched.remove(&key).expect("scheduled event present");
                    if event.is_fault() {
                        self.pending_faults -= 1;
                    }
                    self.on_sched(event);
                }
                Choice::Net => {
                    if let Some((arrival, to, env)) = self.net.pop_due(at) {
                        let node = &mut self.nodes[to.0 as usize];
                        if node.engine.is_some() {
                            node.inbox.push_back((arrival, Input::Message(env.sender, env.message)));
                        }
                    }
                }
                Choice::Inbox(i) => {
                    let (_, input) = self.nodes[i].inbox.pop_front().expect("inbox not empty");
                    self.step(i, Some(input));
                }
                Choice::Timer(i) => self.step(i, None),
            }
        }
        self.finish(completed_at.is_some())
    }

    fn next_step(&self) -> Option<(Duration, Choice)> {
        let mut best: Option<(Duration, u8, usize, Choice)> = None;
        let mut offer = |at: Duration, rank: u8, idx: usize, choice: Choice| {
            if best.as_ref().map_or(true, |(t, r, i, _)| (at, rank, idx) < (*t, *r, *i)) {
                best = Some((at, rank, idx, choice));
            }
        };
        if let Some((&key, _)) = self.sched.iter().next() {
            offer(key.0, 0, 0, Choice::Sched(key));
        }
        if let Some(at) = self.net.next_arrival() {
            offer(at, 1, 0, Choice::Net);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(engine) = &node.engine else { continue };
            if let Some((arrival, _)) = node.inbox.front() {
                offer((*arrival).max(node.busy_until), 2, i, Choice::Inbox(i));
            }
            if let Some(deadline) = engine.next_deadline() {
                offer(deadline.max(node.busy_until).max(node.timer_floor), 3, i, Choice::Timer(i));
            }
        }
        best.map(|(at, _, _, c)| (at, c))
    }

    fn complete(&self) -> bool {
        if self.resolved < self.scenario.tx_count || self.pending_faults > 0 {
            return false;
        }
        if self.configs.iter().any(|c| c.block.is_none()) {
            return false;
        }
        let mut heights = self
            .nodes
            .iter()
            .filter(|n| !n.byzantine() && n.running() && self.members.contains(&n.id))
            .map(|n| n.height);
        let Some(first) = heights.next() else { return true };
        heights.all(|h| h == first)
    }

    fn on_sched(&mut self, event: Sched) {
        let now = self.now;
        match event {
            Sched::Worker(w) => self.next_tx_for(w),
            Sched::Resubmit(t) => {
                if !self.txs[t].resolved() {
                    self.submit_round(t);
                }
            }
            Sched::Retry(t, node) => {
                if !self.txs[t].resolved() {
                    self.offer(node, Input::Submit(t));
                }
            }
            Sched::RetryConfig(k, node) => {
                if self.configs[k].block.is_none() {
                    self.offer(node, Input::Config(k));
                }
            }
            Sched::Crash(id) => self.crash(id),
            Sched::Restart(id, wipe) => {
                let node = &self.nodes[id.0 as usize];
                if node.engine.is_none() && node.store.is_some() {
                    if self.start_node(id, wipe) {
                        let node = &mut self.nodes[id.0 as usize];
                        let height = node.store.as_ref().map_or(0, BlockStore::height);
                        node.record(now, EventKind::Restarted { height, wiped: wipe });
                        info!(node = %id, height, wipe, "restarted");
                        if wipe {
                            node.height = 0;
                        }
                        self.observe(id.0 as usize, &[]);
                    } else {
                        self.schedule(now + Duration::from_millis(200), Sched::Restart(id, wipe));
                    }
                }
            }
            Sched::Reconfig(k) => self.submit_config(k),
            Sched::Join(id) => {
                if self.nodes[id.0 as usize].engine.is_some() {
                    return;
                }
                if self.start_node(id, false) {
                    let node = &mut self.nodes[id.0 as usize];
                    let height = node.store.as_ref().map_or(0, BlockStore::height);
                    node.record(now, EventKind::Joined { height });
                    info!(node = %id, height, "joined");
                    self.observe(id.0 as usize, &[]);
                } else {
                    self.schedule(now + Duration::from_millis(200), Sched::Join(id));
                }
            }
            Sched::Poll => {
                let views: Vec<(NodeId, Option<BlockStore>)> = self
                    .nodes
                    .iter()
                    .map(|n| (n.id, n.engine.as_ref().and(n.store.clone())))
                    .collect();
                if let Some(consumer) = &mut self.consumer {
                    consumer.poll(now, &views);
                }
                self.schedule(now + self.poll_every, Sched::Poll);
            }
        }
    }

    fn crash(&mut self, id: NodeId) {
        let now = self.now;
        let node = &mut self.nodes[id.0 as usize];
        if node.engine.is_none() {
            return;
        }
        node.absorb_counters();
        node.engine = None;
        node.inbox.clear();
        node.source.set(None);
        node.record(now, EventKind::Crashed);
        info!(node = %id, at = ?now, "crashed");
    }

    fn leader_guess(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .filter(|n| !n.byzantine())
            .filter_map(|n| n.engine.as_ref())
            .max_by_key(|e| e.view())
            .map(|e| e.config().leader(e.view()))
    }

    fn targets(&self) -> Vec<NodeId> {
        match self.scenario.submit_to {
            SubmitTo::All => self.members.clone(),
            SubmitTo::Leader => self.leader_guess().into_iter().collect(),
            SubmitTo::Followers => {
                let leader = self.leader_guess();
                self.members.iter().copied().filter(|m| Some(*m) != leader).collect()
            }
        }
    }

    fn next_tx_for(&mut self, worker: usize) {
        if self.next_tx >= self.scenario.tx_count {
            return;
        }
        let index = self.next_tx;
        self.next_tx += 1;
        let payload = workload_tx(index, &self.client_keys, self.scenario.tx_size);
        let id = Digest::of(&payload);
        self.tx_by_id.insert(id, index);
        self.txs.push(TxState {
            payload,
            id,
            client: index % self.scenario.clients,
            worker,
            submitted: Some(self.now),
            delivered: None,
            accepted_correct: false,
            round_targets: 0,
            round_answers: 0,
            round_accepted: false,
            rejected: false,
        });
        self.submit_round(index);
    }

    fn submit_round(&mut self, t: usize) {
        let targets = self.targets();
        let tx = &mut self.txs[t];
        tx.round_targets = targets.len();
        tx.round_answers = 0;
        tx.round_accepted = false;
        for node in targets {
            self.offer(node, Input::Submit(t));
        }
        let at = self.now + self.resubmit_after;
        self.schedule(at, Sched::Resubmit(t));
    }

    /// Hands an input to a node; a node that is down answers with an error.
    fn offer(&mut self, id: NodeId, input: Input) {
        let now = self.now;
        let node = &mut self.nodes[id.0 as usize];
        if node.engine.is_some() {
            node.inbox.push_back((now, input));
        } else if let Input::Submit(t) = input {
            self.answer(t, false);
        }
    }

    /// Counts one node's answer to the current submission round.
    fn answer(&mut self, t: usize, accepted: bool) {
        let tx = &mut self.txs[t];
        tx.round_answers += 1;
        tx.round_accepted |= accepted;
        if tx.round_answers >= tx.round_targets && !tx.round_accepted && !tx.resolved() {
            tx.rejected = true;
            self.resolve(t);
        }
    }

    fn resolve(&mut self, t: usize) {
        self.resolved += 1;
        let worker = self.txs[t].worker;
        self.schedule(self.now, Sched::Worker(worker));
    }

    fn current_channel_config(&self) -> Option<ChannelConfig> {
        self.nodes
            .iter()
            .filter(|n| !n.byzantine())
            .filter_map(|n| n.engine.as_ref())
            .max_by_key(|e| e.app().inner.store().height())
            .map(|e| e.app().inner.config().clone())
    }

    fn submit_config(&mut self, k: usize) {
        let step = &self.scenario.reconfig[k];
        let Some(mut config) = self.current_channel_config() else { return };
        let mut consenters: Vec<Consenter> = config
            .consensus
            .consenters
            .iter()
            .filter(|c| !step.remove.contains(&c.id.0))
            .cloned()
            .collect();
        for id in &step.add {
            consenters.push(Consenter {
                id: NodeId(*id),
                key: consenter_key(NodeId(*id)).public(),
            });
        }
        let mut consensus = match config.consensus.clone().with_consenters(consenters) {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!(error = %e, "reconfiguration step is not a valid configuration");
                return;
            }
        };
        if let Some(b) = step.batch_max_count {
            consensus.batch_max_count = b;
        }
        config.consensus = consensus;
        let removed: BTreeSet<usize> = step.remove_clients.iter().copied().collect();
        let removed_keys: Vec<Bytes> = removed.iter().map(|c| self.client_keys[*c].public()).collect();
        config.clients.retain(|k| !removed_keys.contains(k));
        let payload = Transaction::config(&config, &admin_key()).encode();
        let index = self.configs.len();
        self.config_by_id.insert(Digest::of(&payload), index);
        self.configs.push(ConfigState {
            payload,
            removed_clients: removed,
            block: None,
        });
        info!(step = k, "submitting config transaction");
        for id in self.members.clone() {
            self.offer(id, Input::Config(index));
        }
    }

    fn pooled_from_removed(&self, i: usize, clients: &BTreeSet<usize>) -> usize {
        let Some(engine) = &self.nodes[i].engine else { return 0 };
        engine
            .pool()
            .iter()
            .filter(|p| {
                self.tx_by_id
                    .get(&p.request.id())
                    .is_some_and(|t| clients.contains(&self.txs[*t].client))
            })
            .count()
    }

    fn pending_removed_clients(&self, i: usize) -> BTreeSet<usize> {
        self.configs[self.nodes[i].configs_seen.min(self.configs.len())..]
            .iter()
            .flat_map(|c| c.removed_clients.iter().copied())
            .collect()
    }

    /// One unit of work at node `i`: a timer tick or one input.
    fn step(&mut self, i: usize, input: Option<Input>) {
        let now = self.now;
        let tx_size = self.scenario.tx_size;
        let c = self.cost;
        let removed = self.pending_removed_clients(i);
        let pooled_before = if removed.is_empty() { 0 } else { self.pooled_from_removed(i, &removed) };

        let mut cost = c.per_message_us;
        let mut answer: Option<(usize, bool)> = None;
        let mut retry: Option<Sched> = None;
        {
            let node = &mut self.nodes[i];
            let byzantine = node.byzantine();
            let Some(engine) = node.engine.as_mut() else { return };
            match input {
                None => {
                    engine.tick(now);
                    node.timer_floor = now + TIMER_GUARD;
                }
                Some(Input::Message(from, message)) => {
                    cost = input_cost(&c, &message, tx_size);
                    engine.handle_message(from, message, now);
                }
                Some(Input::Submit(t)) => {
                    let payload = self.txs[t].payload.clone();
                    let accepted = match engine.app().verify_request(&payload) {
                        Ok(()) => {
                            cost += c.per_tx_us;
                            match engine.submit_request(payload, now) {
                                Ok(_) | Err(SubmitError::Duplicate) => Some(true),
                                Err(SubmitError::Full) => {
                                    retry = Some(Sched::Retry(t, node.id));
                                    None
                                }
                                Err(SubmitError::Halted) => Some(false),
                            }
                        }
                        // Already in the ledger: delivery tracking picks it up.
                        Err(AppError::Duplicate) => Some(true),
                        Err(_) => Some(false),
                    };
                    if let Some(ok) = accepted {
                        if ok && !byzantine {
                            self.txs[t].accepted_correct = true;
                        }
                        answer = Some((t, ok));
                    }
                }
                Some(Input::Config(k)) => {
                    let payload = self.configs[k].payload.clone();
                    if engine.app().verify_request(&payload).is_ok() {
                        cost += c.per_tx_us;
                        if let Err(SubmitError::Full) = engine.submit_request(payload, now) {
                            retry = Some(Sched::RetryConfig(k, node.id));
                        }
                    }
                }
            }
        }
        if let Some((t, ok)) = answer {
            self.answer(t, ok);
        }
        if let Some(r) = retry {
            let backoff = Duration::from_millis(self.rng.gen_range(FULL_RETRY_MS.0..=FULL_RETRY_MS.1));
            self.schedule(now + backoff, r);
        }

        let outputs = self.nodes[i].engine.as_mut().map(|e| e.take_outputs()).unwrap_or_default();
        let mut crashed = false;
        if let Some((appends, restart_after)) = self.nodes[i].crash_after_wal {
            if self.nodes[i].wal.appends() >= appends {
                self.nodes[i].crash_after_wal = None;
                info!(node = i, appends, "crashing right after a wal append");
                self.crash(NodeId(i as u64));
                self.schedule(now + restart_after, Sched::Restart(NodeId(i as u64), false));
                crashed = true;
            }
        }
        self.record_outputs(i, &outputs, crashed);
        let mut sends = Vec::new();
        let mut delivered = Vec::new();
        for out in outputs {
            match out {
                Output::Send { to, message } if !crashed => sends.push((to, message)),
                Output::Send { .. } => {}
                Output::Delivered { view, sequence, digest } => delivered.push((view, sequence, digest)),
            }
        }
        cost += output_cost(&c, &sends, tx_size);
        let done = now + Duration::from_micros(cost);
        self.nodes[i].busy_until = done;

        let sends = self.apply_policy(i, sends);
        let from = NodeId(i as u64);
        for (to, message) in sends {
            self.net.send(done, from, to, message);
        }
        self.observe(i, &delivered);
        if !removed.is_empty() {
            let after = self.pooled_from_removed(i, &removed);
            self.account_config_pools(i, pooled_before, after);
        }
    }

    /// Trace events for one step's outputs, in the order the engine emitted
    /// them. Sends dropped by a crash were never voted.
    fn record_outputs(&mut self, i: usize, outputs: &[Output], crashed: bool) {
        let now = self.now;
        let node = &mut self.nodes[i];
        for out in outputs {
            let m = match out {
                Output::Send { message, .. } if !crashed => message,
                Output::Send { .. } => continue,
                Output::Delivered { view, sequence, digest } => {
                    node.record(
                        now,
                        EventKind::Delivered {
                            view: *view,
                            seq: *sequence,
                            digest: *digest,
                        },
                    );
                    continue;
                }
            };
            match m {
                ConsensusMessage::PrePrepare {
                    view,
                    sequence,
                    proposal,
                } if node.proposed.insert((*view, *sequence)) => node.record(
                    now,
                    EventKind::Proposed {
                        view: *view,
                        seq: *sequence,
                        digest: proposal.digest(),
                    },
                ),
                ConsensusMessage::Prepare {
                    view, sequence, digest, ..
                }
                | ConsensusMessage::Commit {
                    view, sequence, digest, ..
                } => {
                    let phase = if matches!(m, ConsensusMessage::Prepare { .. }) {
                        VotePhase::Prepare
                    } else {
                        VotePhase::Commit
                    };
                    if node.voted.insert((phase, *view, *sequence, *digest)) {
                        node.record(
                            now,
                            EventKind::Voted {
                                phase,
                                view: *view,
                                seq: *sequence,
                                digest: *digest,
                            },
                        );
                    }
                }
                _ => {}
            }
        }
    }

    /// Post-step bookkeeping: ledger growth, view, halting.
    fn observe(&mut self, i: usize, delivered: &[(View, Seq, Digest)]) {
        let now = self.now;
        let (old, new, byzantine) = {
            let node = &self.nodes[i];
            let Some(store) = &node.store else { return };
            (node.height, store.height(), node.byzantine())
        };
        if new > old {
            let store = self.nodes[i].store.clone().expect("store present");
            let from_delivery = delivered.iter().map(|(_, s, _)| s.0).max().unwrap_or(0);
            for number in old + 1..=new {
                let Some(block) = store.block(number) else { break };
                if !byzantine {
                    self.scan_block(i, &block);
                }
            }
            let node = &mut self.nodes[i];
            node.height = new;
            if new > from_delivery && node.engine.is_some() {
                node.record(now, EventKind::Synced { height: new });
            }
        }
        let node = &mut self.nodes[i];
        let Some(engine) = &node.engine else { return };
        let view = engine.view();
        let halted = engine.halted().map(str::to_string);
        if view != node.view {
            node.view = view;
            node.record(now, EventKind::ViewInstalled { view });
            if !node.byzantine() {
                self.views_installed.insert(view);
            }
        }
        if let (Some(reason), false) = (halted, node.halted) {
            node.halted = true;
            node.record(now, EventKind::Halted { reason });
        }
    }

    fn scan_block(&mut self, i: usize, block: &Block) {
        let now = self.now;
        for tx in &block.data {
            let id = Digest::of(tx);
            if let Some(&t) = self.tx_by_id.get(&id) {
                if self.txs[t].delivered.is_none() {
                    let was_resolved = self.txs[t].resolved();
                    self.txs[t].delivered = Some(now);
                    if !was_resolved {
                        self.resolve(t);
                    }
                }
            } else if let Some(&k) = self.config_by_id.get(&id) {
                self.nodes[i].configs_seen = self.nodes[i].configs_seen.max(k + 1);
                if self.configs[k].block.is_none() {
                    self.configs[k].block = Some(ConfigBlock {
                        block: block.number(),
                        alone: block.data.len() == 1,
                        n_after: 0,
                        removed_client_pooled_before: 0,
                        removed_client_pooled_after: 0,
                        blocks_after: 0,
                    });
                }
            }
        }
        if block.number() == 0 {
            return;
        }
        if let Some(Ok(config)) = config_of(block) {
            let members: Vec<NodeId> = config.consensus.ids().collect();
            if members != self.members {
                info!(block = block.number(), n = members.len(), "membership changed");
                for id in &members {
                    let node = &self.nodes[id.0 as usize];
                    if node.store.is_none() && !self.members.contains(id) {
                        self.schedule(now, Sched::Join(*id));
                    }
                }
                self.members = members;
            }
            let removed: Vec<usize> = (0..self.scenario.clients)
                .filter(|c| !config.is_client(&self.client_keys[*c].public()))
                .collect();
            let stuck: Vec<usize> = self
                .txs
                .iter()
                .enumerate()
                .filter(|(_, t)| !t.resolved() && removed.contains(&t.client))
                .map(|(k, _)| k)
                .collect();
            for t in stuck {
                self.schedule(now, Sched::Resubmit(t));
            }
            for c in &mut self.configs {
                if let Some(b) = &mut c.block {
                    if b.block == block.number() {
                        b.n_after = config.consensus.n;
                    }
                }
            }
        }
    }

    fn account_config_pools(&mut self, i: usize, before: usize, after: usize) {
        if self.nodes[i].byzantine() {
            return;
        }
        let seen = self.nodes[i].configs_seen;
        let height = self.nodes[i].height;
        for c in self.configs.iter_mut().take(seen) {
            if let Some(b) = &mut c.block {
                // Only the step that delivered the config block at this node.
                if b.block == height && !c.removed_clients.is_empty() {
                    b.removed_client_pooled_before += before;
                    b.removed_client_pooled_after += after;
                }
            }
        }
    }

    fn apply_policy(&mut self, i: usize, sends: Vec<(NodeId, ConsensusMessage)>) -> Vec<(NodeId, ConsensusMessage)> {
        match self.nodes[i].policy {
            Some(Policy::Silent) => Vec::new(),
            Some(Policy::Equivocate) => self.equivocate(i, sends),
            _ => sends,
        }
    }

    /// Splits the followers: some get the real proposal, the others a
    /// conflicting one, and the node's own votes follow the same split.
    fn equivocate(&mut self, i: usize, sends: Vec<(NodeId, ConsensusMessage)>) -> Vec<(NodeId, ConsensusMessage)> {
        let id = NodeId(i as u64);
        let key = consenter_key(id);
        let mut out = Vec::with_capacity(sends.len() + 1);
        let recipients: Vec<NodeId> = sends
            .iter()
            .filter(|(_, m)| matches!(m, ConsensusMessage::PrePrepare { .. }))
            .map(|(to, _)| *to)
            .collect();
        let mut conflicting: Option<(ConsensusMessage, NodeId)> = None;
        for (to, message) in sends {
            match &message {
                ConsensusMessage::PrePrepare {
                    view,
                    sequence,
                    proposal,
                } if recipients.len() >= 2 => {
                    let slot = (*view, *sequence);
                    if !self.nodes[i].equivocations.contains_key(&slot) {
                        let Some(b) = self.conflicting_proposal(proposal, *view, *sequence) else {
                            out.push((to, message));
                            continue;
                        };
                        let mut shuffled = recipients.clone();
                        shuffled.shuffle(&mut self.rng);
                        let split = self.rng.gen_range(1..shuffled.len());
                        let b_set: BTreeSet<NodeId> = shuffled[..split].iter().copied().collect();
                        let twice = shuffled[split..].first().copied().filter(|_| self.rng.gen_bool(0.5));
                        let b_message = ConsensusMessage::PrePrepare {
                            view: *view,
                            sequence: *sequence,
                            proposal: b.clone(),
                        };
                        if let Some(victim) = twice {
                            conflicting = Some((b_message, victim));
                        }
                        debug!(node = %id, view = %view, seq = %sequence, b = ?b_set, "equivocating");
                        self.nodes[i].equivocations.insert(
                            slot,
                            Equivocation {
                                a: proposal.digest(),
                                b: b.digest(),
                                b_set,
                            },
                        );
                        self.nodes[i].proposed.insert(slot);
                    }
                    let eq = &self.nodes[i].equivocations[&slot];
                    if eq.b_set.contains(&to) {
                        let b = self.conflicting_cached(i, slot, proposal);
                        out.push((
                            to,
                            ConsensusMessage::PrePrepare {
                                view: *view,
                                sequence: *sequence,
                                proposal: b,
                            },
                        ));
                    } else {
                        out.push((to, message.clone()));
                        if conflicting.as_ref().is_some_and(|(_, v)| *v == to) {
                            let (b, _) = conflicting.take().expect("checked");
                            out.push((to, b));
                        }
                    }
                }
                ConsensusMessage::Prepare {
                    view, sequence, digest, ..
                }
                | ConsensusMessage::Commit {
                    view, sequence, digest, ..
                } => {
                    let forged = self.nodes[i]
                        .equivocations
                        .get(&(*view, *sequence))
                        .filter(|eq| eq.a == *digest && eq.b_set.contains(&to))
                        .map(|eq| eq.b);
                    match forged {
                        Some(b) => {
                            let attestation = if matches!(message, ConsensusMessage::Prepare { .. }) {
                                Attestation::Prepare { view: *view }
                            } else {
                                Attestation::Commit
                            };
                            let signature = key.sign_digest(id, &b, attestation.to_bytes());
                            let vote = if matches!(message, ConsensusMessage::Prepare { .. }) {
                                ConsensusMessage::Prepare {
                                    view: *view,
                                    sequence: *sequence,
                                    digest: b,
                                    signature,
                                }
                            } else {
                                ConsensusMessage::Commit {
                                    view: *view,
                                    sequence: *sequence,
                                    digest: b,
                                    signature,
                                }
                            };
                            out.push((to, vote));
                        }
                        None => out.push((to, message)),
                    }
                }
                _ => out.push((to, message)),
            }
        }
        out
    }

    fn conflicting_cached(&mut self, i: usize, slot: (View, Seq), a: &bftorder::Proposal) -> bftorder::Proposal {
        let p = self
            .conflicting_proposal(a, slot.0, slot.1)
            .expect("built once already");
        debug_assert_eq!(Some(p.digest()), self.nodes[i].equivocations.get(&slot).map(|e| e.b));
        p
    }

    /// The same block plus one extra valid transaction; same metadata.
    fn conflicting_proposal(&self, a: &bftorder::Proposal, view: View, seq: Seq) -> Option<bftorder::Proposal> {
        let block = Block::from_proposal(a).ok()?;
        let extra = Transaction::signed(
            TxKind::Ordinary,
            format!("equivocation/{view}/{seq}").into_bytes(),
            &self.client_keys[0],
        )
        .encode();
        let mut data = block.data.clone();
        data.push(extra);
        let mut b = Block::new(block.number(), block.header.previous_hash, data, Default::default());
        b.metadata = block.metadata.clone();
        Some(b.proposal())
    }

    fn finish(mut self, completed: bool) -> RunOutcome {
        let end = self.now;
        for node in &mut self.nodes {
            node.absorb_counters();
        }
        let mut node_traces = Vec::new();
        let mut stores = Vec::new();
        for node in &mut self.nodes {
            let Some(store) = node.store.clone() else { continue };
            let live = node.running() && self.members.contains(&node.id);
            node_traces.push(NodeTrace {
                id: node.id,
                byzantine: node.byzantine(),
                live_at_end: live,
                events: std::mem::take(&mut node.events),
                blocks: store.blocks(),
                file_digest: store.file_digest(),
            });
            stores.push((node.id, store));
        }
        let txs: Vec<TxRecord> = self
            .txs
            .iter()
            .enumerate()
            .map(|(index, t)| TxRecord {
                index,
                id: t.id,
                client: t.client,
                submitted_us: t.submitted.map_or(0, |d| d.as_micros() as u64),
                expected: t.delivered.is_some() || (t.accepted_correct && !t.rejected),
                delivered_us: t.delivered.map(|d| d.as_micros() as u64),
            })
            .collect();
        let trace = Trace {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            completed,
            expect_liveness: self.scenario.expect_liveness,
            nodes: node_traces,
            txs,
        };
        let invariants = check_invariants(&trace);
        let report = self.build_report(&trace, completed, end, invariants);
        RunOutcome { report, trace, stores }
    }

    fn build_report(
        &self,
        trace: &Trace,
        completed: bool,
        end: Duration,
        invariants: crate::invariants::InvariantReport,
    ) -> RunReport {
        let delivered: Vec<&TxState> = self.txs.iter().filter(|t| t.delivered.is_some()).collect();
        let samples: Vec<f64> = delivered
            .iter()
            .map(|t| (t.delivered.unwrap() - t.submitted.unwrap_or_default()).as_secs_f64() * 1000.0)
            .collect();
        let first = self.txs.iter().filter_map(|t| t.submitted).min().unwrap_or_default();
        let last = delivered.iter().filter_map(|t| t.delivered).max().unwrap_or_default();
        let span = last.saturating_sub(first).as_secs_f64();
        let throughput = if span > 0.0 { delivered.len() as f64 / span } else { 0.0 };

        let reference = trace
            .nodes
            .iter()
            .filter(|n| n.correct())
            .max_by_key(|n| n.blocks.len());
        let blocks = reference.map_or(0, |n| n.blocks.len().saturating_sub(1) as u64);
        let block_txs: usize = reference.map_or(0, |n| n.blocks.iter().skip(1).map(|b| b.data.len()).sum());
        let final_view = self
            .nodes
            .iter()
            .filter(|n| !n.byzantine())
            .filter_map(|n| n.engine.as_ref())
            .map(|e| e.view().0)
            .max()
            .unwrap_or(0);
        let stats = self.net.stats();
        let correct = || self.nodes.iter().filter(|n| !n.byzantine());
        let mut config_blocks: Vec<ConfigBlock> = self.configs.iter().filter_map(|c| c.block.clone()).collect();
        for c in &mut config_blocks {
            c.blocks_after = blocks.saturating_sub(c.block);
        }
        RunReport {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            n: self.scenario.n,
            profile: self.profile.name.clone(),
            batch_max_count: self.scenario.batch_max_count,
            tx_size: self.scenario.tx_size,
            completed,
            sim_time_s: end.as_secs_f64(),
            submitted: self.txs.iter().filter(|t| t.submitted.is_some()).count(),
            delivered: delivered.len(),
            rejected: self.txs.iter().filter(|t| t.rejected && t.delivered.is_none()).count(),
            throughput_tps: throughput,
            latency: LatencyStats::from_samples(samples),
            blocks,
            mean_block_txs: if blocks > 0 { block_txs as f64 / blocks as f64 } else { 0.0 },
            view_changes: self.views_installed.iter().filter(|v| v.0 > 0).count() as u64,
            final_view,
            equivocations_detected: correct().map(|n| n.counters.equivocations).sum(),
            proposals_rejected: correct().map(|n| n.counters.proposals_rejected).sum(),
            sync_rejections: correct().map(|n| n.counters.sync_rejections).sum(),
            messages_sent: stats.sent,
            messages_dropped: stats.dropped,
            bytes_sent: stats.bytes_sent,
            messages_by_kind: stats.by_kind.clone(),
            frontiers: trace
                .nodes
                .iter()
                .map(|n| (n.id.to_string(), n.blocks.len().saturating_sub(1) as u64))
                .collect(),
            config_blocks,
            consumer: self.consumer.as_ref().map(Consumer::report),
            invariants,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Choice {
    Sched((Duration, u64)),
    Net,
    Inbox(usize),
    Timer(usize),
}
