//! Declarative scenario files (TOML).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use bftorder::{compute_quorum, Configuration, MessageKind};
use serde::{Deserialize, Serialize};

use crate::profile::Profile;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {0}: {1}")]
    Io(String, std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatencySpec {
    /// `"lan"`, `"wan"`, or a path to a profile file.
    Named(String),
    Inline(Profile),
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec::Named("lan".into())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitTo {
    /// Every consenter, as a censorship-aware client does.
    #[default]
    All,
    Leader,
    /// Everyone except the current leader.
    Followers,
}

/// Overrides of the protocol timers, in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timers {
    pub forward_ms: Option<u64>,
    pub complaint_ms: Option<u64>,
    pub heartbeat_ms: Option<u64>,
    pub leader_timeout_ms: Option<u64>,
    pub view_change_ms: Option<u64>,
    pub batch_timeout_ms: Option<u64>,
    pub sync_lag_threshold: Option<u64>,
}

impl Timers {
    pub fn apply(&self, mut config: Configuration) -> Configuration {
        let ms = Duration::from_millis;
        if let Some(v) = self.forward_ms {
            config.request_forward_timeout = ms(v);
        }
        if let Some(v) = self.complaint_ms {
            config.request_complaint_timeout = ms(v);
        }
        if let Some(v) = self.heartbeat_ms {
            config.heartbeat_interval = ms(v);
        }
        if let Some(v) = self.leader_timeout_ms {
            config.leader_heartbeat_timeout = ms(v);
        }
        if let Some(v) = self.view_change_ms {
            config.view_change_timeout = ms(v);
        }
        if let Some(v) = self.batch_timeout_ms {
            config.batch_timeout = ms(v);
        }
        if let Some(v) = self.sync_lag_threshold {
            config.sync_lag_threshold = v;
        }
        config
    }
}

/// Simulated processing time charged to a node per unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub per_message_us: u64,
    /// Producing or checking one consensus signature.
    pub per_signature_us: u64,
    /// Validating one transaction (admission, assembly, proposal check).
    pub per_tx_us: u64,
    /// Hashing and copying, per KiB of proposal or block.
    pub per_kib_us: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            per_message_us: 20,
            per_signature_us: 60,
            per_tx_us: 80,
            per_kib_us: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// As leader, sends conflicting proposals to different followers.
    Equivocate,
    /// Sends nothing at all.
    Silent,
    /// Serves forged blocks to peers that sync from it.
    ForgeBlocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensorTarget {
    /// Every transaction from this client.
    Client(usize),
    /// The transaction with this index in the workload.
    Tx(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    Crash {
        node: u64,
        at_ms: u64,
        #[serde(default)]
        restart_at_ms: Option<u64>,
        /// Restart with an empty block store.
        #[serde(default)]
        wipe: bool,
    },
    /// Crashes `node` right after its `appends`-th write-ahead-log append,
    /// before anything from that step reaches the network.
    CrashAfterWal {
        node: u64,
        appends: u64,
        restart_after_ms: u64,
    },
    Partition {
        groups: Vec<Vec<u64>>,
        from_ms: u64,
        to_ms: u64,
    },
    Drop {
        #[serde(default)]
        from: Option<u64>,
        #[serde(default)]
        to: Option<u64>,
        #[serde(default)]
        message: Option<MessageKind>,
        probability: f64,
        #[serde(default)]
        from_ms: Option<u64>,
        #[serde(default)]
        to_ms: Option<u64>,
    },
    Byzantine {
        node: u64,
        policy: Policy,
    },
    /// Leaves matching transactions out of every block `node` assembles.
    Censor {
        node: u64,
        target: CensorTarget,
    },
    /// The node stops serving full blocks to the consumer.
    WithholdBlocks {
        node: u64,
        from_ms: u64,
    },
    /// The node stops serving header/metadata items to the consumer.
    WithholdHeaders {
        node: u64,
        from_ms: u64,
    },
}

impl Fault {
    /// Node whose consensus behavior the fault affects, for the fault bound.
    fn faulty_node(&self) -> Option<u64> {
        match self {
            Fault::Crash { node, .. }
            | Fault::CrashAfterWal { node, .. }
            | Fault::Byzantine { node, .. }
            | Fault::Censor { node, .. } => Some(*node),
            _ => None,
        }
    }

    fn nodes(&self) -> Vec<u64> {
        match self {
            Fault::Partition { groups, .. } => groups.iter().flatten().copied().collect(),
            Fault::Drop { from, to, .. } => from.iter().chain(to.iter()).copied().collect(),
            Fault::Crash { node, .. }
            | Fault::CrashAfterWal { node, .. }
            | Fault::Byzantine { node, .. }
            | Fault::Censor { node, .. }
            | Fault::WithholdBlocks { node, .. }
            | Fault::WithholdHeaders { node, .. } => vec![*node],
        }
    }
}

/// A config transaction submitted by the admin at `at_ms`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconfigStep {
    pub at_ms: u64,
    #[serde(default)]
    pub add: Vec<u64>,
    #[serde(default)]
    pub remove: Vec<u64>,
    #[serde(default)]
    pub remove_clients: Vec<usize>,
    #[serde(default)]
    pub batch_max_count: Option<usize>,
}

/// A peer consuming blocks through the censorship monitor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsumerSpec {
    pub provider: u64,
    #[serde(default = "default_poll_ms")]
    pub poll_ms: u64,
    /// Defaults to twice the batch timeout.
    #[serde(default)]
    pub threshold_ms: Option<u64>,
}

fn default_poll_ms() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub profile: LatencySpec,
    #[serde(default = "default_batch")]
    pub batch_max_count: usize,
    /// Encoded transaction size in bytes.
    #[serde(default = "default_tx_size")]
    pub tx_size: usize,
    #[serde(default = "default_tx_count")]
    pub tx_count: usize,
    /// Closed-loop clients, each with one transaction outstanding. Defaults
    /// to twice the batch size.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Distinct client keys; worker `w` signs with key `w mod clients`.
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default)]
    pub submit_to: SubmitTo,
    #[serde(default = "default_limit")]
    pub duration_limit_s: f64,
    #[serde(default)]
    pub timers: Timers,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub reconfig: Vec<ReconfigStep>,
    #[serde(default)]
    pub consumer: Option<ConsumerSpec>,
    /// Whether every valid transaction must be delivered.
    #[serde(default = "yes")]
    pub expect_liveness: bool,
    /// Directory profile paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_batch() -> usize {
    100
}
fn default_tx_size() -> usize {
    4096
}
fn default_tx_count() -> usize {
    1000
}
fn default_clients() -> usize {
    2
}
fn default_limit() -> f64 {
    600.0
}
fn yes() -> bool {
    true
}

/// Smallest transaction that still fits its index and signature envelope.
pub const MIN_TX_SIZE: usize = 160;

impl Scenario {
    /// A fault-free LAN scenario with defaults.
    pub fn new(name: &str, n: usize) -> Self {
        Self {
            name: name.into(),
            n,
            seed: 0,
            profile: LatencySpec::default(),
            batch_max_count: default_batch(),
            tx_size: default_tx_size(),
            tx_count: default_tx_count(),
            workers: None,
            clients: default_clients(),
            submit_to: SubmitTo::All,
            duration_limit_s: default_limit(),
            timers: Timers::default(),
            cost: CostModel::default(),
            faults: Vec::new(),
            reconfig: Vec::new(),
            consumer: None,
            expect_liveness: true,
            base_dir: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(path.display().to_string(), e))?;
        let mut scenario = Self::parse(&text)?;
        scenario.base_dir = path.parent().map(Path::to_path_buf);
        Ok(scenario)
    }

    pub fn profile(&self) -> Result<Profile, ScenarioError> {
        match &self.profile {
            LatencySpec::Named(name) => Profile::resolve(name, self.base_dir.as_deref()),
            LatencySpec::Inline(profile) => {
                profile.validate()?;
                Ok(profile.clone())
            }
        }
    }

    pub fn f(&self) -> usize {
        compute_quorum(self.n).map(|(f, _)| f).unwrap_or(0)
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(2 * self.batch_max_count).clamp(1, self.tx_count.max(1))
    }

    pub fn duration_limit(&self) -> Duration {
        Duration::from_secs_f64(self.duration_limit_s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if let Err(e) = compute_quorum(self.n) {
            return invalid(format!("n = {}: {e}", self.n));
        }
        if self.batch_max_count == 0 {
            return invalid("batch_max_count must be positive".into());
        }
        if self.tx_size < MIN_TX_SIZE {
            return invalid(format!("tx_size must be at least {MIN_TX_SIZE} bytes"));
        }
        if self.clients == 0 {
            return invalid("at least one client is needed".into());
        }
        if !(self.duration_limit_s.is_finite() && self.duration_limit_s > 0.0) {
            return invalid("duration_limit_s must be positive".into());
        }
        let added: BTreeSet<u64> = self.reconfig.iter().flat_map(|r| r.add.iter().copied()).collect();
        let known = |id: u64| (id as usize) < self.n || added.contains(&id);
        for fault in &self.faults {
            if let Some(bad) = fault.nodes().into_iter().find(|id| !known(*id)) {
                return invalid(format!("fault refers to unknown node {bad}"));
            }
            match fault {
                Fault::Drop { probability, .. } if !(0.0..=1.0).contains(probability) => {
                    return invalid("drop probability must be within [0, 1]".into());
                }
                Fault::Censor {
                    target: CensorTarget::Client(c),
                    ..
                } if *c >= self.clients => {
                    return invalid(format!("censor target client {c} does not exist"));
                }
                Fault::Partition { from_ms, to_ms, .. } if from_ms >= to_ms => {
                    return invalid("partition window is empty".into());
                }
                _ => {}
            }
        }
        for step in &self.reconfig {
            if let Some(id) = step.add.iter().find(|id| (**id as usize) < self.n) {
                return invalid(format!("reconfig adds node {id}, which already exists"));
            }
            if let Some(id) = step.remove.iter().find(|id| !known(**id)) {
                return invalid(format!("reconfig removes unknown node {id}"));
            }
            if let Some(c) = step.remove_clients.iter().find(|c| **c >= self.clients) {
                return invalid(format!("reconfig removes unknown client {c}"));
            }
        }
        if let Some(consumer) = &self.consumer {
            if consumer.provider as usize >= self.n {
                return invalid(format!("consumer provider {} is not an initial node", consumer.provider));
            }
            if consumer.poll_ms == 0 {
                return invalid("consumer poll_ms must be positive".into());
            }
        }
        if self.expect_liveness {
            let faulty: BTreeSet<u64> = self.faults.iter().filter_map(Fault::faulty_node).collect();
            if faulty.len() > self.f() {
                return invalid(format!(
                    "{} faulty nodes exceed f = {} while liveness is expected",
                    faulty.len(),
                    self.f()
                ));
            }
        }
        self.profile()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_gets_defaults() {
        let s = Scenario::parse("n = 4\n").unwrap();
        assert_eq!(s.batch_max_count, 100);
        assert_eq!(s.tx_size, 4096);
        assert_eq!(s.workers(), 200);
        assert_eq!(s.submit_to, SubmitTo::All);
        assert_eq!(s.profile().unwrap().name, "lan");
        assert!(s.expect_liveness);
    }

    #[test]
    fn faults_parse_from_tables() {
        let s = Scenario::parse(
            r#"
            n = 7
            profile = "wan"
            [[faults]]
            kind = "crash"
            node = 0
            at_ms = 5000
            [[faults]]
            kind = "byzantine"
            node = 1
            policy = "equivocate"
            [[faults]]
            kind = "censor"
            node = 1
            target = { client = 1 }
            [[faults]]
            kind = "drop"
            message = "Commit"
            probability = 0.5
            [[faults]]
            kind = "partition"
            groups = [[0, 1], [2, 3, 4, 5, 6]]
            from_ms = 0
            to_ms = 100
            "#,
        )
        .unwrap();
        assert_eq!(s.faults.len(), 5);
        assert_eq!(
            s.faults[2],
            Fault::Censor {
                node: 1,
                target: CensorTarget::Client(1)
            }
        );
        assert_eq!(s.profile().unwrap().name, "wan");
    }

    #[test]
    fn rejects_too_many_faulty_nodes_when_liveness_is_expected() {
        let text = r#"
            n = 4
            [[faults]]
            kind = "crash"
            node = 0
            at_ms = 1
            [[faults]]
            kind = "crash"
            node = 1
            at_ms = 1
        "#;
        assert!(matches!(Scenario::parse(text), Err(ScenarioError::Invalid(_))));
        let relaxed = format!("expect_liveness = false\n{text}");
        assert!(Scenario::parse(&relaxed).is_ok());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Scenario::parse("n = 3\n").is_err());
        assert!(Scenario::parse("n = 4\ntx_size = 10\n").is_err());
        assert!(Scenario::parse("n = 4\nunknown_field = 1\n").is_err());
        assert!(Scenario::parse("n = 4\n[[faults]]\nkind = \"crash\"\nnode = 9\nat_ms = 1\n").is_err());
        assert!(Scenario::parse("n = 4\nprofile = \"nowhere.toml\"\n").is_err());
        assert!(Scenario::parse("n = 4\n[[reconfig]]\nat_ms = 1\nadd = [2]\n").is_err());
    }

    #[test]
    fn inline_profile_is_accepted() {
        let s = Scenario::parse("n = 4\nprofile = { name = \"two-sites\", one_way_ms = [[1.0, 9.0], [9.0, 1.0]] }\n")
            .unwrap();
        assert_eq!(s.profile().unwrap().one_way_ms[0][1], 9.0);
    }

    #[test]
    fn timers_override_configuration() {
        let s = Scenario::parse("n = 4\n[timers]\ncomplaint_ms = 3000\nbatch_timeout_ms = 50\n").unwrap();
        let consenters = (0..4)
            .map(|i| bftorder::Consenter {
                id: bftorder::NodeId(i),
                key: bytes::Bytes::new(),
            })
            .collect();
        let config = s.timers.apply(Configuration::new(consenters).unwrap());
        assert_eq!(config.request_complaint_timeout, Duration::from_secs(3));
        assert_eq!(config.batch_timeout, Duration::from_millis(50));
        assert_eq!(config.request_forward_timeout, Duration::from_secs(2));
    }
}
