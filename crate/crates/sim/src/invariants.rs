//! Mechanical checks over a finished run's traces and ledgers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use bftorder::engine::verify_decision;
use bftorder::{AppError, Configuration, Digest, NodeId, Seq, Signature, View};
use bftorder_ordering::app::config_of;
use bftorder_ordering::crypto::verify_digest;
use serde::{Deserialize, Serialize};

use crate::trace::{EventKind, NodeTrace, Trace, VotePhase};

/// Counterexamples kept per invariant.
const MAX_EXAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    /// Correct nodes never decide different blocks for one sequence.
    Agreement,
    /// Every stored block carries a valid quorum from the configuration active at its height.
    Certificates,
    /// Ledgers are gapless and hash-chained from a common genesis.
    ChainIntegrity,
    /// At the end of a completed run, live correct nodes hold byte-identical block files.
    Convergence,
    /// A leader never proposes sequence `s + 1` before it delivered `s`.
    NoPipelining,
    /// No correct node sends two different Prepare or Commit votes for one view and sequence.
    NoDoubleVote,
    /// Every expected transaction reaches every live correct node.
    Totality,
    /// No transaction is stored twice.
    ExactlyOnce,
}

impl Invariant {
    pub const ALL: [Invariant; 8] = [
        Invariant::Agreement,
        Invariant::Certificates,
        Invariant::ChainIntegrity,
        Invariant::Convergence,
        Invariant::NoPipelining,
        Invariant::NoDoubleVote,
        Invariant::Totality,
        Invariant::ExactlyOnce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Invariant::Agreement => "agreement",
            Invariant::Certificates => "certificates",
            Invariant::ChainIntegrity => "chain-integrity",
            Invariant::Convergence => "convergence",
            Invariant::NoPipelining => "no-pipelining",
            Invariant::NoDoubleVote => "no-double-vote",
            Invariant::Totality => "totality",
            Invariant::ExactlyOnce => "exactly-once",
        }
    }
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub invariant: Invariant,
    /// `false` when the invariant does not apply to this run.
    pub checked: bool,
    pub violations: Vec<String>,
    /// Violations beyond the recorded examples.
    pub more: usize,
}

impl InvariantResult {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub results: Vec<InvariantResult>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(InvariantResult::passed)
    }

    pub fn get(&self, invariant: Invariant) -> &InvariantResult {
        self.results
            .iter()
            .find(|r| r.invariant == invariant)
            .expect("every invariant has a result")
    }

    pub fn violated(&self, invariant: Invariant) -> bool {
        !self.get(invariant).passed()
    }

    pub fn violations(&self) -> impl Iterator<Item = (Invariant, &str)> {
        self.results
            .iter()
            .flat_map(|r| r.violations.iter().map(move |v| (r.invariant, v.as_str())))
    }
}

impl fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let status = match (r.checked, r.passed()) {
                (false, _) => "n/a",
                (true, true) => "ok",
                (true, false) => "VIOLATED",
            };
            writeln!(f, "  {:<16} {status}", r.invariant.name())?;
            for v in &r.violations {
                writeln!(f, "    - {v}")?;
            }
            if r.more > 0 {
                writeln!(f, "    - ... and {} more", r.more)?;
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct Collector {
    found: BTreeMap<Invariant, (Vec<String>, usize)>,
}

impl Collector {
    fn add(&mut self, invariant: Invariant, detail: String) {
        let entry = self.found.entry(invariant).or_default();
        if entry.0.len() < MAX_EXAMPLES {
            entry.0.push(detail);
        } else {
            entry.1 += 1;
        }
    }
}

fn short(d: &Digest) -> String {
    hex::encode(&d.0[..6])
}

fn secs(at_us: u64) -> String {
    format!("{:.3}s", at_us as f64 / 1e6)
}

fn verifier(config: &Configuration) -> impl Fn(&Signature, &Digest) -> Result<(), AppError> + '_ {
    move |s, d| {
        let key = config.key_of(s.signer).ok_or(AppError::UnknownSigner(s.signer))?;
        verify_digest(key, s, d).map_err(|_| AppError::BadSignature)
    }
}

pub fn check_invariants(trace: &Trace) -> InvariantReport {
    let mut c = Collector::default();
    let correct: Vec<&NodeTrace> = trace.nodes.iter().filter(|n| n.correct()).collect();

    check_agreement(&correct, &mut c);
    for node in &correct {
        check_chain(node, &mut c);
        check_double_votes(node, &mut c);
        check_exactly_once(node, &mut c);
    }
    if let Some(first) = correct.first() {
        for other in &correct[1..] {
            if let (Some(a), Some(b)) = (first.blocks.first(), other.blocks.first()) {
                if a.canonical() != b.canonical() {
                    c.add(
                        Invariant::ChainIntegrity,
                        format!("nodes {} and {} start from different genesis blocks", first.id, other.id),
                    );
                }
            }
        }
    }
    for node in &trace.nodes {
        check_pipelining(node, &mut c);
    }
    let live: Vec<&NodeTrace> = correct.iter().copied().filter(|n| n.live_at_end).collect();
    if trace.completed {
        check_convergence(&live, &mut c);
    }
    if trace.expect_liveness {
        check_totality(trace, &live, &mut c);
    }

    let results = Invariant::ALL
        .iter()
        .map(|&invariant| {
            let checked = match invariant {
                Invariant::Convergence => trace.completed,
                Invariant::Totality => trace.expect_liveness,
                _ => true,
            };
            let (violations, more) = c.found.remove(&invariant).unwrap_or_default();
            InvariantResult {
                invariant,
                checked,
                violations,
                more,
            }
        })
        .collect();
    InvariantReport { results }
}

fn check_agreement(correct: &[&NodeTrace], c: &mut Collector) {
    // Ledgers: first height where two nodes hold different blocks.
    for (i, a) in correct.iter().enumerate() {
        for b in &correct[i + 1..] {
            let common = a.blocks.len().min(b.blocks.len());
            let decided = |n: &NodeTrace, h: usize| n.blocks[h].proposal().digest();
            if let Some(h) = (0..common).find(|h| decided(a, *h) != decided(b, *h)) {
                c.add(
                    Invariant::Agreement,
                    format!(
                        "sequence {h}: node {} stores block {} but node {} stores block {}",
                        a.id,
                        short(&decided(a, h)),
                        b.id,
                        short(&decided(b, h))
                    ),
                );
            }
        }
    }
    // Delivery records: one digest per sequence, matching the ledger.
    let mut first: BTreeMap<Seq, (Digest, NodeId)> = BTreeMap::new();
    for node in correct {
        for e in &node.events {
            let EventKind::Delivered { seq, digest, .. } = &e.kind else { continue };
            match first.get(seq) {
                Some((d, other)) if d != digest => c.add(
                    Invariant::Agreement,
                    format!(
                        "sequence {seq} delivered as {} by node {other} and as {} by node {}",
                        short(d),
                        short(digest),
                        node.id
                    ),
                ),
                Some(_) => {}
                None => {
                    first.insert(*seq, (*digest, node.id));
                }
            }
            if let Some(block) = node.blocks.get(seq.0 as usize) {
                let stored = block.proposal().digest();
                if stored != *digest {
                    c.add(
                        Invariant::Agreement,
                        format!(
                            "node {} delivered {} at sequence {seq} but stores {}",
                            node.id,
                            short(digest),
                            short(&stored)
                        ),
                    );
                }
            }
        }
    }
}

fn check_chain(node: &NodeTrace, c: &mut Collector) {
    let Some(genesis) = node.blocks.first() else {
        c.add(Invariant::ChainIntegrity, format!("node {} has no genesis block", node.id));
        return;
    };
    if genesis.number() != 0 {
        c.add(
            Invariant::ChainIntegrity,
            format!("node {} ledger starts at block {}", node.id, genesis.number()),
        );
        return;
    }
    let mut config = match config_of(genesis) {
        Some(Ok(config)) => config,
        _ => {
            c.add(
                Invariant::ChainIntegrity,
                format!("node {} genesis holds no readable config", node.id),
            );
            return;
        }
    };
    for pair in node.blocks.windows(2) {
        let (prev, block) = (&pair[0], &pair[1]);
        if let Err(e) = block.check_structure(&prev.header) {
            c.add(
                Invariant::ChainIntegrity,
                format!("node {} block {}: {e}", node.id, prev.number() + 1),
            );
            return;
        }
        if let Err(e) = verify_decision(&block.decision(), &config.consensus, verifier(&config.consensus)) {
            c.add(
                Invariant::Certificates,
                format!(
                    "node {} block {} ({} signatures, quorum {}): {e}",
                    node.id,
                    block.number(),
                    block.signatures.len(),
                    config.consensus.q
                ),
            );
        }
        if let Some(Ok(next)) = config_of(block) {
            config = next;
        }
    }
}

fn check_double_votes(node: &NodeTrace, c: &mut Collector) {
    let mut votes: HashMap<(VotePhase, View, Seq), Digest> = HashMap::new();
    for e in &node.events {
        let EventKind::Voted {
            phase,
            view,
            seq,
            digest,
        } = &e.kind
        else {
            continue;
        };
        match votes.insert((*phase, *view, *seq), *digest) {
            Some(previous) if previous != *digest => c.add(
                Invariant::NoDoubleVote,
                format!(
                    "node {} sent {phase:?} votes for {} and {} in view {view} sequence {seq} (second at {})",
                    node.id,
                    short(&previous),
                    short(digest),
                    secs(e.at_us)
                ),
            ),
            _ => {}
        }
    }
}

fn check_exactly_once(node: &NodeTrace, c: &mut Collector) {
    let mut seen: HashMap<Digest, u64> = HashMap::new();
    for block in &node.blocks {
        for tx in &block.data {
            let id = Digest::of(tx);
            if let Some(first) = seen.insert(id, block.number()) {
                c.add(
                    Invariant::ExactlyOnce,
                    format!(
                        "node {}: transaction {} stored in blocks {first} and {}",
                        node.id,
                        short(&id),
                        block.number()
                    ),
                );
            }
        }
    }
}

fn check_pipelining(node: &NodeTrace, c: &mut Collector) {
    let mut frontier = 0u64;
    for e in &node.events {
        match &e.kind {
            EventKind::Delivered { seq, .. } => frontier = frontier.max(seq.0),
            EventKind::Synced { height } | EventKind::Restarted { height, .. } | EventKind::Joined { height } => {
                frontier = frontier.max(*height)
            }
            EventKind::Proposed { seq, view, .. } if seq.0 > frontier + 1 => c.add(
                Invariant::NoPipelining,
                format!(
                    "node {} proposed sequence {seq} in view {view} at {} before delivering {}",
                    node.id,
                    secs(e.at_us),
                    seq.0 - 1
                ),
            ),
            _ => {}
        }
    }
}

fn check_convergence(live: &[&NodeTrace], c: &mut Collector) {
    let Some(first) = live.first() else { return };
    for other in &live[1..] {
        if other.file_digest != first.file_digest {
            c.add(
                Invariant::Convergence,
                format!(
                    "block files differ: node {} has {} blocks ({}), node {} has {} blocks ({})",
                    first.id,
                    first.blocks.len(),
                    short(&first.file_digest),
                    other.id,
                    other.blocks.len(),
                    short(&other.file_digest)
                ),
            );
        }
    }
}

fn check_totality(trace: &Trace, live: &[&NodeTrace], c: &mut Collector) {
    let expected: Vec<_> = trace.txs.iter().filter(|t| t.expected).collect();
    for node in live {
        let stored: HashSet<Digest> = node
            .blocks
            .iter()
            .flat_map(|b| b.data.iter().map(|tx| Digest::of(tx)))
            .collect();
        let missing: Vec<_> = expected.iter().filter(|t| !stored.contains(&t.id)).collect();
        if let Some(first) = missing.first() {
            c.add(
                Invariant::Totality,
                format!(
                    "node {} is missing {} of {} expected transactions (first: #{} submitted at {})",
                    node.id,
                    missing.len(),
                    expected.len(),
                    first.index,
                    secs(first.submitted_us)
                ),
            );
        }
    }
}
