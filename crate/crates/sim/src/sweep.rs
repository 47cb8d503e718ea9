//! Batch-size sweeps: one run per batch size, run in parallel.

use std::thread;

use crate::cluster::run;
use crate::report::RunReport;
use crate::scenario::{Scenario, ScenarioError};

/// Runs `scenario` once per entry of `batches`, overriding its batch size.
/// Each run is deterministic on its own, so the result does not depend on
/// thread scheduling. Reports come back in the order of `batches`.
pub fn sweep(scenario: &Scenario, seed: u64, batches: &[usize]) -> Result<Vec<RunReport>, ScenarioError> {
    let variants: Vec<Scenario> = batches
        .iter()
        .map(|&b| {
            let mut s = scenario.clone();
            s.batch_max_count = b;
            s.workers = scenario.workers.map(|w| w.max(2 * b));
            s
        })
        .collect();
    for v in &variants {
        v.validate()?;
    }
    let workers = thread::available_parallelism().map_or(1, usize::from).min(variants.len()).max(1);
    let chunks: Vec<Vec<(usize, &Scenario)>> = (0..workers)
        .map(|w| variants.iter().enumerate().skip(w).step_by(workers).collect())
        .collect();
    let mut results: Vec<Option<Result<RunReport, ScenarioError>>> = (0..variants.len()).map(|_| None).collect();
    thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(i, s)| (i, run(s, seed).map(|o| o.report)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every run finished")).collect()
}
