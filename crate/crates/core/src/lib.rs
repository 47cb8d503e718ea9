//! Byzantine fault-tolerant consensus for ordering services.
//!
//! The crate orders opaque client requests among `n >= 4` consenters, of which
//! up to `f = floor((n - 1) / 3)` may be arbitrarily faulty. Everything
//! application-specific (what a proposal looks like, how it is validated and
//! signed, how decisions are stored) lives behind [`Application`].
//!
//! The engine is sans-IO: [`Consensus`] consumes requests, messages and clock
//! ticks and produces messages to send. [`transport`] provides a deterministic
//! simulated network and an authenticated TCP transport to drive it.

pub mod app;
pub mod codec;
pub mod engine;
pub mod message;
pub mod pool;
pub mod transport;
pub mod types;
pub mod wal;

pub use app::{AppError, Application, NoopApp, SyncOutcome};
pub use engine::{Consensus, EngineError, EngineOptions, EngineStats, Output, SubmitError};
pub use message::{ConsensusMessage, Envelope, MessageKind, PreparedCertificate, SignedViewData, ViewData};
pub use pool::{PoolError, PoolSettings, RequestPool};
pub use types::{
    compute_quorum, Attestation, ConfigError, Configuration, Consenter, Decision, Digest, NodeId, Proposal,
    ProposalMeta, Reconfig, Request, RequestId, Seq, Signature, View,
};
pub use wal::{FileWal, MemWal, Wal, WalError, WalPhase, WalRecord};
