//! Deterministic discrete-event core.
//!
//! The [`Engine`] owns the virtual clock and a min-heap of pending [`Event`]s
//! ordered by `(time, sequence)`. Events scheduled for the same instant fire
//! in insertion order. The loop is single-threaded; independent runs own
//! independent engines.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{SimDuration, SimTime};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("event in past: scheduled at {at} while clock is {now}")]
    EventInPast { at: SimTime, now: SimTime },
    #[error("resource {id} over capacity ({capacity})")]
    OverCapacity { id: usize, capacity: u32 },
    #[error("resource {id} released while idle")]
    ReleaseIdle { id: usize },
}

/// Kind of a simulation event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// A request enters the server.
    Arrival,
    /// A request left an intermediate CU group of the DPU.
    CuDone,
    /// A request finished preprocessing.
    PreprocDone,
    /// A bucket's batching deadline was reached.
    BatchTimerFired,
    /// A vGPU finished executing a batch.
    ExecDone,
    Shutdown,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::CuDone => "cu_done",
            EventKind::PreprocDone => "preproc_done",
            EventKind::BatchTimerFired => "batch_timer_fired",
            EventKind::ExecDone => "exec_done",
            EventKind::Shutdown => "shutdown",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifier returned by [`Engine::schedule`]; equal to the event's sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub time: SimTime,
    pub sequence: u64,
    pub kind: EventKind,
    /// Request, bucket, or vGPU id depending on `kind`.
    pub payload: u64,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap: reverse so the earliest (time, sequence) pops first.
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One processed event, as written to the event-trace dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub time: SimTime,
    pub kind: EventKind,
    pub payload: u64,
}

/// Receives events popped by [`Engine::run_until`].
pub trait EventHandler {
    type Error: From<EngineError>;

    fn handle(&mut self, event: &Event, engine: &mut Engine) -> Result<(), Self::Error>;
}

#[derive(Debug, Default)]
pub struct Engine {
    clock: SimTime,
    queue: BinaryHeap<Event>,
    next_sequence: u64,
    processed: u64,
    trace: Option<Vec<TraceEntry>>,
}

impl Engine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables recording of every processed event.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Option<Vec<TraceEntry>> {
        self.trace.take()
    }

    /// Inserts an event. Scheduling at the current instant is allowed and
    /// fires after every already-queued event at that instant.
    pub fn schedule(
        &mut self,
        time: SimTime,
        kind: EventKind,
        payload: u64,
    ) -> Result<EventId, EngineError> {
        if time < self.clock {
            return Err(EngineError::EventInPast {
                at: time,
                now: self.clock,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Event {
            time,
            sequence,
            kind,
            payload,
        });
        Ok(EventId(sequence))
    }

    pub fn schedule_in(
        &mut self,
        delay: SimDuration,
        kind: EventKind,
        payload: u64,
    ) -> Result<EventId, EngineError> {
        self.schedule(self.clock + delay, kind, payload)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|e| e.time)
    }

    /// Pops the next event if it fires no later than `limit`, advancing the clock.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Event> {
        if self.queue.peek()?.time > limit {
            return None;
        }
        let event = self.queue.pop()?;
        debug_assert!(event.time >= self.clock);
        self.clock = event.time;
        self.processed += 1;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry {
                time: event.time,
                kind: event.kind,
                payload: event.payload,
            });
        }
        Some(event)
    }

    /// Processes every event with `time <= t_end` in `(time, sequence)` order.
    ///
    /// A [`EventKind::Shutdown`] event is delivered to the handler and then
    /// stops the loop. Otherwise the clock is left at `t_end`.
    pub fn run_until<H: EventHandler>(
        &mut self,
        t_end: SimTime,
        handler: &mut H,
    ) -> Result<u64, H::Error> {
        let start = self.processed;
        while let Some(event) = self.pop_until(t_end) {
            handler.handle(&event, self)?;
            if event.kind == EventKind::Shutdown {
                return Ok(self.processed - start);
            }
        }
        if self.clock < t_end {
            self.clock = t_end;
        }
        Ok(self.processed - start)
    }
}

/// Writes an event trace as `time_us,kind,payload_id` lines with a header.
pub fn write_event_trace<W: Write>(mut out: W, trace: &[TraceEntry]) -> io::Result<()> {
    writeln!(out, "time_us,kind,payload_id")?;
    for e in trace {
        writeln!(out, "{},{},{}", e.time.as_micros(), e.kind, e.payload)?;
    }
    Ok(())
}

/// Accumulates busy time that overlaps a fixed measurement window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusyMeter {
    window_start: SimTime,
    window_end: SimTime,
    busy_us: u128,
}

impl BusyMeter {
    pub fn new(window_start: SimTime, window_end: SimTime) -> Self {
        Self {
            window_start,
            window_end: window_end.max(window_start),
            busy_us: 0,
        }
    }

    /// An unbounded window, for runs where everything counts.
    pub fn unbounded() -> Self {
        Self::new(SimTime::ZERO, SimTime::MAX)
    }

    /// Adds `weight` servers busy over `[start, end)`.
    pub fn record(&mut self, start: SimTime, end: SimTime, weight: u32) {
        let lo = start.max(self.window_start);
        let hi = end.min(self.window_end);
        if hi > lo {
            self.busy_us += u128::from(hi.0 - lo.0) * u128::from(weight);
        }
    }

    pub fn busy_us(&self) -> u128 {
        self.busy_us
    }

    pub fn window(&self) -> (SimTime, SimTime) {
        (self.window_start, self.window_end)
    }
}

/// A pool of identical parallel servers (vGPUs, CPU workers, CU instances).
#[derive(Debug, Clone)]
pub struct Resource {
    id: usize,
    capacity: u32,
    busy: u32,
    last_change: SimTime,
    meter: BusyMeter,
}

impl Resource {
    pub fn new(id: usize, capacity: u32, meter: BusyMeter) -> Self {
        Self {
            id,
            capacity,
            busy: 0,
            last_change: SimTime::ZERO,
            meter,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn busy(&self) -> u32 {
        self.busy
    }

    pub fn idle(&self) -> u32 {
        self.capacity - self.busy
    }

    fn advance(&mut self, now: SimTime) {
        self.meter.record(self.last_change, now, self.busy);
        self.last_change = self.last_change.max(now);
    }

    pub fn acquire(&mut self, now: SimTime) -> Result<(), EngineError> {
        if self.busy >= self.capacity {
            return Err(EngineError::OverCapacity {
                id: self.id,
                capacity: self.capacity,
            });
        }
        self.advance(now);
        self.busy += 1;
        Ok(())
    }

    pub fn release(&mut self, now: SimTime) -> Result<(), EngineError> {
        if self.busy == 0 {
            return Err(EngineError::ReleaseIdle { id: self.id });
        }
        self.advance(now);
        self.busy -= 1;
        Ok(())
    }

    /// Busy-time integral up to `now`, clipped to the meter window.
    pub fn busy_us(&self, now: SimTime) -> u128 {
        let mut meter = self.meter;
        meter.record(self.last_change, now, self.busy);
        meter.busy_us()
    }
}
