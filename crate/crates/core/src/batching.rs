//! Online dynamic batching over length buckets.
//!
//! Each bucket owns a FIFO of preprocessed requests and its own `batch_max`.
//! A bucket dispatches as soon as it holds `batch_max` requests, or when its
//! oldest request has waited `time_queue`. A timeout batch that is short of
//! its cap pulls requests from neighbouring buckets, never letting the batch
//! exceed the cap of the bucket holding its longest member.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineError, Event, EventHandler, EventKind};
use crate::time::SimTime;
use crate::tuning::BatchingPolicy;
use crate::workload::RequestId;

#[derive(Debug, Error, PartialEq)]
pub enum BatchingError {
    #[error("length and bucket width must be positive (length={length}, width={width})")]
    NonPositive { length: f64, width: f64 },
    #[error("invalid batching policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Neighbour visiting order when filling an undersized timeout batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOrder {
    /// At each distance, the lower-index (shorter) neighbour first.
    #[default]
    ShorterFirst,
    LongerFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Size,
    Timeout,
}

impl Trigger {
    pub fn as_str(self) -> &'static str {
        match self {
            Trigger::Size => "size",
            Trigger::Timeout => "timeout",
        }
    }
}

/// A preprocessed request waiting in a bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pending {
    pub id: RequestId,
    /// When preprocessing finished.
    pub ready: SimTime,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub id: u64,
    pub members: Vec<Pending>,
    pub longest_length: f64,
    /// Bucket of the longest member, which sets the batch's cap.
    pub bucket: usize,
    /// Bucket whose trigger formed the batch.
    pub origin: usize,
    pub dispatch_time: SimTime,
    pub trigger: Trigger,
}

impl Batch {
    pub fn size(&self) -> u32 {
        self.members.len() as u32
    }
}

/// `floor(length / width)`; an infinite width maps everything to bucket 0.
pub fn bucket_index(length: f64, width: f64) -> Result<usize, BatchingError> {
    if !(length > 0.0 && width > 0.0) {
        return Err(BatchingError::NonPositive { length, width });
    }
    Ok((length / width).floor() as usize)
}

#[derive(Debug, Clone)]
pub struct BucketQueue {
    pub index: usize,
    pub batch_max: u32,
    pending: VecDeque<Pending>,
}

impl BucketQueue {
    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn oldest(&self) -> Option<&Pending> {
        self.pending.front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pending> {
        self.pending.iter()
    }
}

#[derive(Debug, Clone)]
pub struct Batcher {
    policy: BatchingPolicy,
    merge_order: MergeOrder,
    queues: Vec<BucketQueue>,
    armed: Vec<Option<SimTime>>,
    next_batch_id: u64,
    clamped: u64,
}

impl Batcher {
    pub fn new(policy: BatchingPolicy, merge_order: MergeOrder) -> Result<Self, BatchingError> {
        policy.validate().map_err(BatchingError::InvalidPolicy)?;
        let queues = policy
            .batch_max
            .iter()
            .enumerate()
            .map(|(index, &batch_max)| BucketQueue {
                index,
                batch_max,
                pending: VecDeque::new(),
            })
            .collect();
        let armed = vec![None; policy.batch_max.len()];
        Ok(Self {
            policy,
            merge_order,
            queues,
            armed,
            next_batch_id: 0,
            clamped: 0,
        })
    }

    pub fn policy(&self) -> &BatchingPolicy {
        &self.policy
    }

    pub fn queues(&self) -> &[BucketQueue] {
        &self.queues
    }

    pub fn pending(&self) -> usize {
        self.queues.iter().map(BucketQueue::len).sum()
    }

    /// Requests whose length fell past the last bucket and were clamped into it.
    pub fn clamped(&self) -> u64 {
        self.clamped
    }

    /// Bucket for `length`, clamped to the last bucket.
    pub fn bucket_of(&self, length: f64) -> usize {
        let last = self.queues.len() - 1;
        bucket_index(length, self.policy.bucket_width_s).map_or(0, |i| i.min(last))
    }

    /// `batch_max` of the bucket that holds `length`.
    pub fn cap_for(&self, length: f64) -> u32 {
        self.queues[self.bucket_of(length)].batch_max
    }

    /// Appends a preprocessed request to its bucket. Returns `(bucket, deadline)`
    /// when the bucket was empty and its timer must be armed.
    pub fn enqueue(&mut self, request: Pending) -> Option<(usize, SimTime)> {
        let raw = bucket_index(request.length, self.policy.bucket_width_s).unwrap_or(0);
        let bucket = raw.min(self.queues.len() - 1);
        if raw != bucket {
            self.clamped += 1;
            if self.clamped == 1 {
                log::warn!(
                    "request {} length {:.2}s beyond last bucket; clamped to bucket {bucket}",
                    request.id,
                    request.length
                );
            }
        }
        let queue = &mut self.queues[bucket];
        let was_empty = queue.pending.is_empty();
        queue.pending.push_back(request);
        if was_empty {
            let deadline = request.ready + self.policy.time_queue;
            self.armed[bucket] = Some(deadline);
            Some((bucket, deadline))
        } else {
            None
        }
    }

    /// Forms every batch that is due at `now`: size triggers first across all
    /// buckets in index order, then timeout triggers in index order until no
    /// queue holds an expired request.
    pub fn poll_dispatch(&mut self, now: SimTime) -> Vec<Batch> {
        let mut out = Vec::new();
        for b in 0..self.queues.len() {
            let cap = self.queues[b].batch_max as usize;
            while self.queues[b].len() >= cap {
                let members: Vec<Pending> = self.queues[b].pending.drain(..cap).collect();
                out.push(self.make_batch(b, members, now, Trigger::Size));
            }
        }
        let tq = self.policy.time_queue;
        for b in 0..self.queues.len() {
            while self.queues[b].oldest().is_some_and(|p| p.ready + tq <= now) {
                let cap = self.queues[b].batch_max as usize;
                let take = cap.min(self.queues[b].len());
                let mut members: Vec<Pending> = self.queues[b].pending.drain(..take).collect();
                if members.len() < cap {
                    self.merge_fill(b, &mut members);
                }
                out.push(self.make_batch(b, members, now, Trigger::Timeout));
            }
        }
        out
    }

    /// Deadlines that changed since the last call, as `(bucket, deadline)`;
    /// `deadline` never precedes `now`.
    pub fn rearm(&mut self, now: SimTime) -> Vec<(usize, SimTime)> {
        let tq = self.policy.time_queue;
        let mut out = Vec::new();
        for (b, q) in self.queues.iter().enumerate() {
            let desired = q.oldest().map(|p| (p.ready + tq).max(now));
            if desired != self.armed[b] {
                self.armed[b] = desired;
                if let Some(t) = desired {
                    out.push((b, t));
                }
            }
        }
        out
    }

    /// Neighbour buckets of `bucket` by increasing distance.
    fn neighbours(&self, bucket: usize) -> Vec<usize> {
        let n = self.queues.len();
        let mut order = Vec::with_capacity(n.saturating_sub(1));
        for d in 1..n {
            let lower = bucket.checked_sub(d);
            let upper = Some(bucket + d).filter(|u| *u < n);
            let pair = match self.merge_order {
                MergeOrder::ShorterFirst => [lower, upper],
                MergeOrder::LongerFirst => [upper, lower],
            };
            order.extend(pair.into_iter().flatten());
        }
        order
    }

    /// Tops up an undersized timeout batch from neighbouring buckets.
    ///
    /// After each accepted request the cap is recomputed from the longest
    /// member. A candidate that would push the batch over its own cap is left
    /// in place and no longer buckets on that side are tried.
    pub fn merge_fill(&mut self, bucket: usize, members: &mut Vec<Pending>) {
        let mut longest = members.iter().map(|p| p.length).fold(0.0, f64::max);
        let mut cap = if members.is_empty() {
            self.queues[bucket].batch_max
        } else {
            self.cap_for(longest)
        };
        let mut upper_closed = false;
        for c in self.neighbours(bucket) {
            if members.len() >= cap as usize {
                break;
            }
            if c > bucket && upper_closed {
                continue;
            }
            while members.len() < cap as usize {
                let Some(candidate) = self.queues[c].oldest().copied() else {
                    break;
                };
                let new_longest = longest.max(candidate.length);
                let new_cap = self.cap_for(new_longest);
                if members.len() + 1 > new_cap as usize {
                    if c > bucket {
                        upper_closed = true;
                    }
                    break;
                }
                self.queues[c].pending.pop_front();
                members.push(candidate);
                longest = new_longest;
                cap = new_cap;
            }
        }
    }

    fn make_batch(
        &mut self,
        origin: usize,
        members: Vec<Pending>,
        now: SimTime,
        trigger: Trigger,
    ) -> Batch {
        let longest_length = members.iter().map(|p| p.length).fold(0.0, f64::max);
        let id = self.next_batch_id;
        self.next_batch_id += 1;
        let bucket = self.bucket_of(longest_length);
        debug_assert!(members.len() <= self.queues[bucket].batch_max as usize);
        Batch {
            id,
            members,
            longest_length,
            bucket,
            origin,
            dispatch_time: now,
            trigger,
        }
    }
}

struct ReplayDriver<'a> {
    arrivals: &'a [Pending],
    batcher: Batcher,
    batches: Vec<Batch>,
}

impl EventHandler for ReplayDriver<'_> {
    type Error = EngineError;

    fn handle(&mut self, event: &Event, engine: &mut Engine) -> Result<(), EngineError> {
        let now = event.time;
        if event.kind == EventKind::PreprocDone {
            let mut p = self.arrivals[event.payload as usize];
            p.ready = now;
            if let Some((bucket, deadline)) = self.batcher.enqueue(p) {
                engine.schedule(deadline, EventKind::BatchTimerFired, bucket as u64)?;
            }
        }
        self.batches.extend(self.batcher.poll_dispatch(now));
        for (bucket, deadline) in self.batcher.rearm(now) {
            engine.schedule(deadline, EventKind::BatchTimerFired, bucket as u64)?;
        }
        Ok(())
    }
}

/// Runs the batcher alone over requests that become ready at `ready` times
/// and returns every dispatched batch in dispatch order. Requests must be
/// given in non-decreasing `ready` order.
pub fn replay(
    arrivals: &[Pending],
    policy: &BatchingPolicy,
    merge_order: MergeOrder,
) -> Result<Vec<Batch>, BatchingError> {
    let mut engine = Engine::new();
    for (i, p) in arrivals.iter().enumerate() {
        engine.schedule(p.ready, EventKind::PreprocDone, i as u64)?;
    }
    let mut driver = ReplayDriver {
        arrivals,
        batcher: Batcher::new(policy.clone(), merge_order)?,
        batches: Vec::new(),
    };
    engine.run_until(SimTime::MAX, &mut driver)?;
    Ok(driver.batches)
}
