//! Reference models used by the integration tests. They are written as
//! straightforward step-by-step interpreters and share no logic with the
//! library.

#![allow(dead_code)]

use std::collections::VecDeque;

/// One request seen by the reference batcher: (id, ready time in µs, length in s).
#[derive(Debug, Clone, Copy)]
pub struct RefRequest {
    pub id: u64,
    pub ready: u64,
    pub length: f64,
}

/// A batch produced by the reference batcher.
#[derive(Debug, Clone, PartialEq)]
pub struct RefBatch {
    pub ids: Vec<u64>,
    pub time: u64,
}

struct RefBatcher {
    width: f64,
    caps: Vec<usize>,
    tq: u64,
    queues: Vec<VecDeque<RefRequest>>,
    out: Vec<RefBatch>,
}

impl RefBatcher {
    fn bucket(&self, length: f64) -> usize {
        let raw = if self.width.is_infinite() {
            0
        } else {
            (length / self.width).floor() as usize
        };
        raw.min(self.caps.len() - 1)
    }

    fn cap(&self, length: f64) -> usize {
        self.caps[self.bucket(length)]
    }

    fn poll(&mut self, t: u64) {
        let n = self.queues.len();
        for b in 0..n {
            while self.queues[b].len() >= self.caps[b] {
                let ids = (0..self.caps[b])
                    .map(|_| self.queues[b].pop_front().unwrap().id)
                    .collect();
                self.out.push(RefBatch { ids, time: t });
            }
        }
        for b in 0..n {
            loop {
                match self.queues[b].front() {
                    Some(r) if r.ready + self.tq <= t => {}
                    _ => break,
                }
                let mut batch: Vec<RefRequest> = Vec::new();
                while batch.len() < self.caps[b] {
                    match self.queues[b].pop_front() {
                        Some(r) => batch.push(r),
                        None => break,
                    }
                }
                // Top up from neighbours, nearest first, lower side before upper.
                let mut upper_open = true;
                for d in 1..n {
                    let mut sides = Vec::new();
                    if d <= b {
                        sides.push(b - d);
                    }
                    if b + d < n {
                        sides.push(b + d);
                    }
                    for c in sides {
                        if c > b && !upper_open {
                            continue;
                        }
                        loop {
                            let longest = batch.iter().map(|r| r.length).fold(0.0, f64::max);
                            if batch.len() >= self.cap(longest) {
                                break;
                            }
                            let Some(cand) = self.queues[c].front().copied() else {
                                break;
                            };
                            if batch.len() + 1 > self.cap(longest.max(cand.length)) {
                                if c > b {
                                    upper_open = false;
                                }
                                break;
                            }
                            batch.push(self.queues[c].pop_front().unwrap());
                        }
                    }
                }
                self.out.push(RefBatch {
                    ids: batch.iter().map(|r| r.id).collect(),
                    time: t,
                });
            }
        }
    }
}

/// Walks time one microsecond at a time. Requests become ready in input
/// order and the batcher is polled after each one and once per quiet tick.
pub fn reference_batches(
    requests: &[RefRequest],
    width: f64,
    caps: &[usize],
    tq: u64,
) -> Vec<RefBatch> {
    let mut rb = RefBatcher {
        width,
        caps: caps.to_vec(),
        tq,
        queues: vec![VecDeque::new(); caps.len()],
        out: Vec::new(),
    };
    let last = requests.iter().map(|r| r.ready).max().unwrap_or(0);
    let mut next = 0;
    for t in 0..=last + tq + 1 {
        let mut arrived = false;
        while next < requests.len() && requests[next].ready == t {
            let r = requests[next];
            let b = rb.bucket(r.length);
            rb.queues[b].push_back(r);
            rb.poll(t);
            next += 1;
            arrived = true;
        }
        if !arrived {
            rb.poll(t);
        }
    }
    assert!(rb.queues.iter().all(VecDeque::is_empty));
    rb.out
}

/// Completion times of jobs through a chain of single-server stages with
/// unbounded buffers, simulated tick by tick. `ready` must be sorted.
pub fn tick_flow_shop(ready: &[u64], stages: &[u64]) -> Vec<u64> {
    let n = ready.len();
    let k = stages.len();
    let mut buffers: Vec<VecDeque<usize>> = vec![VecDeque::new(); k];
    // (job, finish time) currently in service at each stage.
    let mut serving: Vec<Option<(usize, u64)>> = vec![None; k];
    let mut done = vec![u64::MAX; n];
    let mut released = 0;
    let mut finished = 0;
    let mut t = 0u64;
    while finished < n {
        while released < n && ready[released] <= t {
            buffers[0].push_back(released);
            released += 1;
        }
        // Finishing work moves downstream before stages pick up new jobs.
        for s in 0..k {
            if let Some((job, end)) = serving[s] {
                if end == t {
                    serving[s] = None;
                    if s + 1 < k {
                        buffers[s + 1].push_back(job);
                    } else {
                        done[job] = t;
                        finished += 1;
                    }
                }
            }
        }
        for s in 0..k {
            if serving[s].is_none() {
                if let Some(job) = buffers[s].pop_front() {
                    serving[s] = Some((job, t + stages[s]));
                }
            }
        }
        // Zero-length stages are not used by the tests.
        t += 1;
    }
    done
}

/// Greedy list scheduling of batches (ready time, duration) on `servers`
/// identical machines in FIFO order, lowest free index first. Returns start times.
pub fn list_schedule(batches: &[(u64, u64)], servers: usize) -> Vec<u64> {
    let mut starts = Vec::with_capacity(batches.len());
    let mut t = 0u64;
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut next = 0;
    let mut busy: Vec<Option<u64>> = vec![None; servers];
    while starts.len() < batches.len() {
        while next < batches.len() && batches[next].0 <= t {
            queue.push_back(next);
            next += 1;
        }
        for slot in busy.iter_mut() {
            if slot.is_some_and(|end| end <= t) {
                *slot = None;
            }
        }
        for slot in busy.iter_mut().filter(|s| s.is_none()) {
            if let Some(i) = queue.pop_front() {
                starts.push((i, t));
                *slot = Some(t + batches[i].1);
            }
        }
        t += 1;
    }
    starts.sort();
    starts.into_iter().map(|(_, s)| s).collect()
}
