//! Deterministic cluster simulator for `bftorder`.
//!
//! A [`Scenario`] describes the cluster, workload, network profile and the
//! faults to inject. [`run`] executes it on a simulated clock with real
//! consensus engines and ordering apps, returning a [`RunReport`] plus the
//! full [`Trace`], which [`check_invariants`] audits. The same scenario and
//! seed always give the same report.

pub mod app;
pub mod cluster;
pub mod consumer;
pub mod invariants;
pub mod profile;
pub mod report;
pub mod scenario;
pub mod sweep;
pub mod trace;

pub use cluster::{run, RunOutcome};
pub use invariants::{check_invariants, Invariant, InvariantReport, InvariantResult};
pub use profile::Profile;
pub use report::{render_table, LatencyStats, RunReport};
pub use scenario::{Fault, Policy, Scenario, ScenarioError, SubmitTo};
pub use sweep::sweep;
pub use trace::{Trace, TraceError};
