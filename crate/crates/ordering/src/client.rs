//! Client-side submission.

use bytes::Bytes;

/// A consenter accepting transactions.
pub trait SubmitTarget {
    type Error: std::fmt::Display;
    fn submit(&mut self, tx: Bytes) -> Result<(), Self::Error>;
}

/// Sends `tx` to every consenter, so a censoring leader cannot keep it from
/// the others. Returns how many accepted it; individual failures are not
/// errors.
pub fn submit_to_all<T: SubmitTarget>(tx: &Bytes, targets: &mut [T]) -> usize {
    let mut accepted = 0;
    for target in targets.iter_mut() {
        match target.submit(tx.clone()) {
            Ok(()) => accepted += 1,
            Err(e) => tracing::debug!(error = %e, "submission failed"),
        }
    }
    accepted
}
