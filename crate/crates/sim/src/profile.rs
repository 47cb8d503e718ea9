//! Network latency profiles.

use std::path::Path;
use std::time::Duration;

use bftorder::transport::sim::Link;
use bftorder::NodeId;
use serde::{Deserialize, Serialize};

use crate::scenario::ScenarioError;

const LAN: &str = include_str!("../profiles/lan.toml");
const WAN: &str = include_str!("../profiles/wan.toml");

/// Sites with pairwise one-way latencies. Node `i` sits at site `i mod sites`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub one_way_ms: Vec<Vec<f64>>,
    #[serde(default)]
    pub jitter_ms: f64,
    /// Per-node uplink; unlimited when absent.
    #[serde(default)]
    pub uplink_mbps: Option<f64>,
}

impl Profile {
    pub fn lan() -> Self {
        Self::parse(LAN).expect("shipped lan profile parses")
    }

    pub fn wan() -> Self {
        Self::parse(WAN).expect("shipped wan profile parses")
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let profile: Profile = toml::from_str(text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// `"lan"`, `"wan"`, or a profile file (relative to `base`).
    pub fn resolve(name: &str, base: Option<&Path>) -> Result<Self, ScenarioError> {
        match name {
            "lan" => Ok(Self::lan()),
            "wan" => Ok(Self::wan()),
            path => {
                let path = base.map_or_else(|| Path::new(path).to_path_buf(), |b| b.join(path));
                Self::load(&path)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let sites = self.one_way_ms.len();
        if sites == 0 || self.one_way_ms.iter().any(|row| row.len() != sites) {
            return Err(ScenarioError::Invalid(format!(
                "profile {}: latency matrix must be square and non-empty",
                self.name
            )));
        }
        let finite = |v: f64| v.is_finite() && v >= 0.0;
        if !self.one_way_ms.iter().flatten().all(|v| finite(*v)) || !finite(self.jitter_ms) {
            return Err(ScenarioError::Invalid(format!("profile {}: negative or non-finite latency", self.name)));
        }
        if self.uplink_mbps.is_some_and(|u| !(u.is_finite() && u > 0.0)) {
            return Err(ScenarioError::Invalid(format!("profile {}: uplink must be positive", self.name)));
        }
        Ok(())
    }

    pub fn link(&self, from: NodeId, to: NodeId) -> Link {
        let sites = self.one_way_ms.len();
        let ms = self.one_way_ms[from.0 as usize % sites][to.0 as usize % sites];
        Link {
            base: Duration::from_secs_f64(ms / 1000.0),
            jitter: Duration::from_secs_f64(self.jitter_ms / 1000.0),
        }
    }

    pub fn uplink_bytes_per_sec(&self) -> Option<u64> {
        self.uplink_mbps.map(|m| (m * 1_000_000.0 / 8.0) as u64)
    }

    /// Mean one-way latency from `leader` to the other `n - 1` nodes.
    pub fn mean_from(&self, leader: NodeId, n: usize) -> Duration {
        let others: Vec<Duration> = (0..n as u64)
            .map(NodeId)
            .filter(|id| *id != leader)
            .map(|id| self.link(leader, id).base)
            .collect();
        others.iter().sum::<Duration>() / others.len().max(1) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_profiles_parse() {
        let lan = Profile::lan();
        assert_eq!(lan.link(NodeId(0), NodeId(3)).base, Duration::from_micros(100));
        let wan = Profile::wan();
        assert_eq!(wan.one_way_ms.len(), 10);
        for (i, row) in wan.one_way_ms.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, wan.one_way_ms[j][i], "asymmetric at {i},{j}");
            }
        }
    }

    #[test]
    fn wan_leader_row_spans_twenty_to_two_fifty_with_mean_near_133() {
        let wan = Profile::wan();
        for n in [4usize, 7, 10] {
            let row: Vec<f64> = (1..n).map(|j| wan.one_way_ms[0][j]).collect();
            let min = row.iter().cloned().fold(f64::MAX, f64::min);
            let max = row.iter().cloned().fold(0.0, f64::max);
            assert_eq!((min, max), (20.0, 250.0), "n={n}");
            let mean = wan.mean_from(NodeId(0), n).as_secs_f64() * 1000.0;
            assert!((mean - 133.0).abs() < 1.0, "n={n}: mean {mean}");
        }
    }

    #[test]
    fn malformed_profiles_are_rejected() {
        assert!(Profile::parse("name = \"x\"\none_way_ms = [[1.0, 2.0]]\n").is_err());
        assert!(Profile::parse("name = \"x\"\none_way_ms = [[-1.0]]\n").is_err());
        assert!(Profile::parse("name = \"x\"\none_way_ms = [[1.0]]\nuplink_mbps = 0.0\n").is_err());
    }
}
