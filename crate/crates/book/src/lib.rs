//! The guide in `book/src`, compiled as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/quorums.md")]
pub mod quorums {}

#[doc = include_str!("../../../book/src/engine.md")]
pub mod engine {}

#[doc = include_str!("../../../book/src/requests.md")]
pub mod requests {}

#[doc = include_str!("../../../book/src/wal.md")]
pub mod wal {}

#[doc = include_str!("../../../book/src/ordering.md")]
pub mod ordering {}

#[doc = include_str!("../../../book/src/monitor.md")]
pub mod monitor {}

#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}

#[doc = include_str!("../../../book/src/acceptance.md")]
pub mod acceptance {}
