//! Run summaries: a structured report per run and its human rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::consumer::ConsumerReport;
use crate::invariants::InvariantReport;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over `samples` (milliseconds).
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_by(f64::total_cmp);
        let rank = |p: f64| {
            let i = ((p / 100.0) * samples.len() as f64).ceil() as usize;
            samples[i.clamp(1, samples.len()) - 1]
        };
        Self {
            mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
            p50_ms: rank(50.0),
            p95_ms: rank(95.0),
            p99_ms: rank(99.0),
            max_ms: samples[samples.len() - 1],
        }
    }
}

/// A config transaction as it ended up in the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigBlock {
    pub block: u64,
    /// The config transaction was the block's only transaction.
    pub alone: bool,
    pub n_after: usize,
    /// Pooled requests from removed clients, summed over correct nodes,
    /// right before and right after the block was delivered.
    pub removed_client_pooled_before: usize,
    pub removed_client_pooled_after: usize,
    /// Blocks decided after this one.
    pub blocks_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub n: usize,
    pub profile: String,
    pub batch_max_count: usize,
    pub tx_size: usize,
    pub completed: bool,
    pub sim_time_s: f64,
    pub submitted: usize,
    pub delivered: usize,
    /// Rejected at admission by every node they reached.
    pub rejected: usize,
    pub throughput_tps: f64,
    pub latency: LatencyStats,
    pub blocks: u64,
    pub mean_block_txs: f64,
    /// Views above 0 installed by at least one correct node.
    pub view_changes: u64,
    pub final_view: u64,
    pub equivocations_detected: u64,
    pub proposals_rejected: u64,
    pub sync_rejections: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub bytes_sent: u64,
    pub messages_by_kind: BTreeMap<String, u64>,
    /// Final ledger height per node.
    pub frontiers: BTreeMap<String, u64>,
    pub config_blocks: Vec<ConfigBlock>,
    pub consumer: Option<ConsumerReport>,
    pub invariants: InvariantReport,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.invariants.passed()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario {} (seed {}, n = {}, {} profile, batch {}, tx {} B)",
            self.scenario, self.seed, self.n, self.profile, self.batch_max_count, self.tx_size
        );
        let rows: Vec<(&str, String)> = vec![
            ("completed", self.completed.to_string()),
            ("simulated time", format!("{:.3} s", self.sim_time_s)),
            (
                "transactions",
                format!("{} submitted, {} delivered, {} rejected", self.submitted, self.delivered, self.rejected),
            ),
            ("throughput", format!("{:.1} tx/s", self.throughput_tps)),
            (
                "latency",
                format!(
                    "mean {:.1} ms, p50 {:.1}, p95 {:.1}, p99 {:.1}, max {:.1}",
                    self.latency.mean_ms, self.latency.p50_ms, self.latency.p95_ms, self.latency.p99_ms, self.latency.max_ms
                ),
            ),
            ("blocks", format!("{} ({:.1} tx/block)", self.blocks, self.mean_block_txs)),
            ("view changes", format!("{} (final view {})", self.view_changes, self.final_view)),
            ("equivocations seen", self.equivocations_detected.to_string()),
            ("sync rejections", self.sync_rejections.to_string()),
            (
                "messages",
                format!(
                    "{} sent, {} dropped, {:.1} MiB",
                    self.messages_sent,
                    self.messages_dropped,
                    self.bytes_sent as f64 / (1 << 20) as f64
                ),
            ),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "  {k:<20} {v}");
        }
        let kinds: Vec<String> = self.messages_by_kind.iter().map(|(k, v)| format!("{k} {v}")).collect();
        let _ = writeln!(out, "  {:<20} {}", "by kind", kinds.join(", "));
        let frontiers: Vec<String> = self.frontiers.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        let _ = writeln!(out, "  {:<20} {}", "frontiers", frontiers.join(" "));
        for c in &self.config_blocks {
            let _ = writeln!(
                out,
                "  {:<20} block {} alone={} n={} removed-client pooled {} -> {}",
                "config", c.block, c.alone, c.n_after, c.removed_client_pooled_before, c.removed_client_pooled_after
            );
        }
        if let Some(c) = &self.consumer {
            let switches: Vec<String> = c
                .switches
                .iter()
                .map(|s| format!("{}->{} at {:.0} ms", s.from, s.to, s.at_ms))
                .collect();
            let _ = writeln!(
                out,
                "  {:<20} height {}, provider {} -> {}, switches [{}]",
                "consumer",
                c.height,
                c.initial_provider,
                c.final_provider,
                switches.join(", ")
            );
        }
        let _ = writeln!(out, "  invariants:");
        out.push_str(&self.invariants.to_string());
        out
    }
}

/// One line per run, for sweeps.
pub fn render_table(reports: &[RunReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>7} {:>9} {:>12} {:>10} {:>10} {:>5} {:>10}",
        "batch", "blocks", "tx/block", "tx/s", "p50 ms", "p99 ms", "vc", "invariants"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:>6} {:>7} {:>9.1} {:>12.1} {:>10.1} {:>10.1} {:>5} {:>10}",
            r.batch_max_count,
            r.blocks,
            r.mean_block_txs,
            r.throughput_tps,
            r.latency.p50_ms,
            r.latency.p99_ms,
            r.view_changes,
            if r.passed() { "ok" } else { "VIOLATED" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let s = LatencyStats::from_samples((1..=100).map(f64::from).collect());
        assert_eq!((s.p50_ms, s.p95_ms, s.p99_ms, s.max_ms), (50.0, 95.0, 99.0, 100.0));
        assert_eq!(s.mean_ms, 50.5);
        let one = LatencyStats::from_samples(vec![7.0]);
        assert_eq!((one.p50_ms, one.p99_ms), (7.0, 7.0));
        assert_eq!(LatencyStats::from_samples(vec![]), LatencyStats::default());
    }
}
