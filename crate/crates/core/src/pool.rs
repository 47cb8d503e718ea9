//! Request pool: queued client requests, their forward/complaint timers and
//! leader-side batching.
//!
//! Every request gets two deadlines on arrival. Past the first, a follower
//! forwards the request to the leader (once per view). Past the second, the
//! follower considers the leader faulty and asks for a view change. Both
//! deadlines are re-armed when a new view is installed.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::time::Duration;

use indexmap::IndexMap;

use crate::types::{Configuration, Request, RequestId, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum PoolError {
    #[error("request already pooled or recently delivered")]
    Duplicate,
    #[error("request pool is full")]
    Full,
}

#[derive(Debug, Clone)]
pub struct PoolSettings {
    pub batch_max_count: usize,
    pub batch_timeout: Duration,
    pub forward_timeout: Duration,
    pub complaint_timeout: Duration,
    pub capacity: usize,
    /// Number of recent decisions whose requests are remembered for replay suppression.
    pub dedupe_window: usize,
}

impl PoolSettings {
    pub const DEFAULT_CAPACITY_FACTOR: usize = 4;
    pub const DEFAULT_DEDUPE_WINDOW: usize = 10;

    pub fn from_config(config: &Configuration) -> Self {
        Self {
            batch_max_count: config.batch_max_count,
            batch_timeout: config.batch_timeout,
            forward_timeout: config.request_forward_timeout,
            complaint_timeout: config.request_complaint_timeout,
            capacity: config.batch_max_count * Self::DEFAULT_CAPACITY_FACTOR,
            dedupe_window: Self::DEFAULT_DEDUPE_WINDOW,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PooledRequest {
    pub request: Request,
    pub arrival: Duration,
    pub forward_deadline: Duration,
    pub complaint_deadline: Duration,
    /// View in which this request was last forwarded to the leader.
    pub forwarded_in: Option<View>,
    /// Part of the leader's current proposal.
    pub in_flight: bool,
}

#[derive(Debug)]
pub struct RequestPool {
    settings: PoolSettings,
    entries: IndexMap<RequestId, PooledRequest>,
    in_flight: usize,
    recent: VecDeque<Vec<RequestId>>,
    recent_index: HashMap<RequestId, usize>,
}

impl RequestPool {
    pub fn new(settings: PoolSettings) -> Self {
        Self {
            settings,
            entries: IndexMap::new(),
            in_flight: 0,
            recent: VecDeque::new(),
            recent_index: HashMap::new(),
        }
    }

    pub fn settings(&self) -> &PoolSettings {
        &self.settings
    }

    /// Adopts new batching limits and timeouts. Existing deadlines are kept.
    pub fn update_settings(&mut self, settings: PoolSettings) {
        self.settings = settings;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &RequestId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &RequestId) -> Option<&PooledRequest> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PooledRequest> {
        self.entries.values()
    }

    pub fn recently_delivered(&self, id: &RequestId) -> bool {
        self.recent_index.contains_key(id)
    }

    pub fn enqueue(&mut self, request: Request, now: Duration) -> Result<(), PoolError> {
        let id = request.id();
        if self.entries.contains_key(&id) || self.recently_delivered(&id) {
            return Err(PoolError::Duplicate);
        }
        if self.entries.len() >= self.settings.capacity {
            return Err(PoolError::Full);
        }
        self.entries.insert(
            id,
            PooledRequest {
                request,
                arrival: now,
                forward_deadline: now + self.settings.forward_timeout,
                complaint_deadline: now + self.settings.complaint_timeout,
                forwarded_in: None,
                in_flight: false,
            },
        );
        Ok(())
    }

    fn available(&self) -> impl Iterator<Item = &PooledRequest> {
        self.entries.values().filter(|e| !e.in_flight)
    }

    /// When the next batch becomes due, if anything is waiting.
    pub fn batch_deadline(&self) -> Option<Duration> {
        let available = self.entries.len() - self.in_flight;
        if available == 0 {
            return None;
        }
        if available >= self.settings.batch_max_count {
            return Some(Duration::ZERO);
        }
        self.available()
            .next()
            .map(|oldest| oldest.arrival + self.settings.batch_timeout)
    }

    pub fn batch_ready(&self, now: Duration) -> bool {
        self.batch_deadline().is_some_and(|d| d <= now)
    }

    /// Cuts the next batch in arrival order if it is full or its oldest
    /// request has waited `batch_timeout`. Returned requests are marked in flight.
    pub fn cut_batch(&mut self, now: Duration) -> Option<Vec<Request>> {
        if !self.batch_ready(now) {
            return None;
        }
        let max = self.settings.batch_max_count;
        let mut batch = Vec::with_capacity(max.min(self.entries.len()));
        for entry in self.entries.values_mut().filter(|e| !e.in_flight).take(max) {
            entry.in_flight = true;
            batch.push(entry.request.clone());
        }
        self.in_flight += batch.len();
        Some(batch)
    }

    /// Returns in-flight requests to the queue (assembler deferred them, or the
    /// proposal was abandoned).
    pub fn release<'a>(&mut self, ids: impl IntoIterator<Item = &'a RequestId>) {
        for id in ids {
            if let Some(e) = self.entries.get_mut(id) {
                if e.in_flight {
                    e.in_flight = false;
                    self.in_flight -= 1;
                }
            }
        }
    }

    pub fn release_all(&mut self) {
        for e in self.entries.values_mut() {
            e.in_flight = false;
        }
        self.in_flight = 0;
    }

    /// Requests whose forward deadline passed and that were not yet forwarded
    /// in `view`. Marks them forwarded.
    pub fn due_forwards(&mut self, now: Duration, view: View) -> Vec<Request> {
        self.entries
            .values_mut()
            .filter(|e| e.forward_deadline <= now && e.forwarded_in != Some(view))
            .map(|e| {
                e.forwarded_in = Some(view);
                e.request.clone()
            })
            .collect()
    }

    pub fn complaint_due(&self, now: Duration) -> bool {
        self.entries.values().any(|e| e.complaint_deadline <= now)
    }

    /// Earliest pending forward or complaint deadline relevant in `view`.
    pub fn next_timer(&self, view: View) -> Option<Duration> {
        self.entries
            .values()
            .flat_map(|e| {
                let fwd = (e.forwarded_in != Some(view)).then_some(e.forward_deadline);
                fwd.into_iter().chain(std::iter::once(e.complaint_deadline))
            })
            .min()
    }

    /// Fresh forward and complaint windows for every pooled request.
    pub fn reset_timers(&mut self, now: Duration) {
        for e in self.entries.values_mut() {
            e.forward_deadline = now + self.settings.forward_timeout;
            e.complaint_deadline = now + self.settings.complaint_timeout;
            e.forwarded_in = None;
        }
    }

    /// Re-runs `verify` on every pooled request and evicts the failures.
    pub fn reverify<E>(&mut self, mut verify: impl FnMut(&[u8]) -> Result<(), E>) -> Vec<RequestId> {
        let mut evicted = Vec::new();
        let mut released = 0;
        self.entries.retain(|id, e| {
            let keep = verify(e.request.payload()).is_ok();
            if !keep {
                evicted.push(*id);
                released += usize::from(e.in_flight);
            }
            keep
        });
        self.in_flight -= released;
        evicted
    }

    /// Removes the requests of a just-delivered decision and remembers their
    /// identities for the dedupe window.
    pub fn prune_delivered(&mut self, ids: &[RequestId]) {
        let set: BTreeSet<&RequestId> = ids.iter().collect();
        let mut released = 0;
        self.entries.retain(|id, e| {
            let keep = !set.contains(id);
            if !keep {
                released += usize::from(e.in_flight);
            }
            keep
        });
        self.in_flight -= released;

        if self.settings.dedupe_window == 0 {
            return;
        }
        for id in ids {
            *self.recent_index.entry(*id).or_default() += 1;
        }
        self.recent.push_back(ids.to_vec());
        while self.recent.len() > self.settings.dedupe_window {
            for id in self.recent.pop_front().unwrap_or_default() {
                if let Some(count) = self.recent_index.get_mut(&id) {
                    *count -= 1;
                    if *count == 0 {
                        self.recent_index.remove(&id);
                    }
                }
            }
        }
    }
}
