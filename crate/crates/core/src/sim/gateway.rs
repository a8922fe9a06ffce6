//! Request batching and least-loaded dispatch.

use std::collections::VecDeque;

use crate::domain::InstanceId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_id: u64,
    pub requests: Vec<u64>,
    pub fired_ms: u64,
}

/// Requests held by one inference instance: the batch being filled, fired
/// batches waiting for the instance, and the batch executing.
#[derive(Debug, Clone, Default)]
pub struct BatchQueue {
    open: Vec<u64>,
    oldest_arrival_ms: Option<u64>,
    ready: VecDeque<Batch>,
    running: Option<Batch>,
}

impl BatchQueue {
    pub fn new() -> Self {
        BatchQueue::default()
    }

    /// Requests held in any stage.
    pub fn outstanding(&self) -> usize {
        self.open.len() + self.ready.iter().map(|b| b.requests.len()).sum::<usize>() + self.running.as_ref().map_or(0, |b| b.requests.len())
    }

    pub fn push(&mut self, request: u64, arrival_ms: u64) {
        if self.open.is_empty() {
            self.oldest_arrival_ms = Some(arrival_ms);
        }
        self.open.push(request);
    }

    pub fn open_len(&self) -> usize {
        self.open.len()
    }

    /// Whether the open batch is full or its oldest member waited `max_wait_ms`.
    pub fn due(&self, now_ms: u64, ibs: u32, max_wait_ms: f64) -> bool {
        match self.oldest_arrival_ms {
            Some(oldest) if !self.open.is_empty() => {
                self.open.len() >= ibs as usize || (now_ms.saturating_sub(oldest)) as f64 >= max_wait_ms
            }
            _ => false,
        }
    }

    /// Closes the open batch, which must be non-empty.
    pub fn fire(&mut self, batch_id: u64, now_ms: u64) {
        debug_assert!(!self.open.is_empty());
        self.ready.push_back(Batch {
            batch_id,
            requests: std::mem::take(&mut self.open),
            fired_ms: now_ms,
        });
        self.oldest_arrival_ms = None;
    }

    /// Moves the next fired batch to execution when idle.
    pub fn start_next(&mut self) -> Option<&Batch> {
        if self.running.is_none() {
            self.running = self.ready.pop_front();
            return self.running.as_ref();
        }
        None
    }

    pub fn running(&self) -> Option<&Batch> {
        self.running.as_ref()
    }

    pub fn finish_running(&mut self) -> Option<Batch> {
        self.running.take()
    }

    pub fn is_idle(&self) -> bool {
        self.outstanding() == 0
    }

    /// Every request id held, for conservation checks.
    pub fn request_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.open
            .iter()
            .chain(self.ready.iter().flat_map(|b| b.requests.iter()))
            .chain(self.running.iter().flat_map(|b| b.requests.iter()))
            .copied()
    }
}

/// Fewest outstanding requests wins; ties go to the lowest instance id.
pub fn pick_least_loaded<I>(candidates: I) -> Option<InstanceId>
where
    I: IntoIterator<Item = (InstanceId, usize)>,
{
    candidates
        .into_iter()
        .min_by_key(|&(id, load)| (load, id))
        .map(|(id, _)| id)
}
