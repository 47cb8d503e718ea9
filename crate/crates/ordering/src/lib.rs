//! A miniature blockchain ordering node on top of `bftorder`.
//!
//! Transactions signed by authorized clients are batched into hash-chained
//! blocks. A block is valid when a quorum of the consenter set active at that
//! height signed it, which is what lets nodes catch up from untrusted peers and
//! lets consumers detect a provider withholding blocks.

pub mod app;
pub mod block;
pub mod client;
pub mod crypto;
pub mod delivery;
pub mod monitor;
pub mod store;
pub mod tx;

pub use app::{current_config, genesis_block, BlockSource, OrderingApp, SetupError};
pub use block::{validate_block, Block, BlockError, BlockHeader, BlockSummary};
pub use client::{submit_to_all, SubmitTarget};
pub use crypto::Keypair;
pub use delivery::{serve_blocks, BlockStream, DeliveryItem, DeliveryMode};
pub use monitor::{DeliveryMonitor, MonitorSettings, Switch};
pub use store::{Appended, BlockStore, StoreError};
pub use tx::{ChannelConfig, Transaction, TxKind};
