//! End-to-end assembly: workload -> preprocessing -> batching -> vGPUs -> metrics.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::{Batch, Batcher, BatchingError, MergeOrder, Pending, Trigger};
use crate::engine::{BusyMeter, Engine, EngineError, Event, EventHandler, EventKind, TraceEntry};
use crate::metrics::{
    build_report, utilization, MeasurementWindow, MetricsError, PriceModel, SimReport, TraceRecord,
};
use crate::preproc::{CpuPool, CpuPoolSpec, Dpu, DpuSpec, PreprocError};
use crate::server::{Assignment, ExecModel, Server, ServerError};
use crate::time::{SimDuration, SimTime};
use crate::tuning::{BatchingPolicy, ModelProfile, TuningError};
use crate::workload::{generate_arrivals, Request, TrafficSpec, WorkloadError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
    #[error(transparent)]
    Batching(#[from] BatchingError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid simulation config: {0}")]
    Config(String),
}

/// Preprocessing backend; exactly one per scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocSpec {
    Cpu(CpuPoolSpec),
    Dpu(DpuSpec),
}

impl PreprocSpec {
    pub fn label(&self) -> &'static str {
        match self {
            PreprocSpec::Cpu(_) => "cpu",
            PreprocSpec::Dpu(_) => "dpu",
        }
    }
}

/// Fully resolved inputs of one simulation run.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub traffic: TrafficSpec,
    pub preproc: PreprocSpec,
    pub profile: Arc<ModelProfile>,
    pub policy: BatchingPolicy,
    pub merge_order: MergeOrder,
    /// vGPUs serving requests; may be fewer than the MIG partition count.
    pub active_vgpus: u32,
    pub warmup_fraction: f64,
    pub price: Option<PriceModel>,
    pub record_events: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.traffic.validate()?;
        if self.active_vgpus == 0 {
            return Err(SimError::Config("active vGPU count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(SimError::Config(
                "warmup_fraction must lie in [0, 1)".into(),
            ));
        }
        self.policy.validate().map_err(SimError::Config)?;
        match &self.preproc {
            PreprocSpec::Cpu(c) => c.validate()?,
            PreprocSpec::Dpu(d) => d.validate()?,
        }
        Ok(())
    }
}

/// One row of the per-dispatch trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DispatchRecord {
    pub dispatch_time: SimTime,
    pub bucket: usize,
    pub batch_size: u32,
    pub longest_len_s: f64,
    pub trigger: Trigger,
}

/// Writes `dispatch_time_us,bucket,batch_size,longest_len_s,trigger`.
pub fn write_dispatch_csv<W: Write>(mut out: W, records: &[DispatchRecord]) -> io::Result<()> {
    writeln!(
        out,
        "dispatch_time_us,bucket,batch_size,longest_len_s,trigger"
    )?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.dispatch_time.as_micros(),
            r.bucket,
            r.batch_size,
            r.longest_len_s,
            r.trigger.as_str()
        )?;
    }
    Ok(())
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: SimReport,
    pub traces: Vec<TraceRecord>,
    pub dispatches: Vec<DispatchRecord>,
    pub events: Option<Vec<TraceEntry>>,
}

struct CountingProfile {
    profile: Arc<ModelProfile>,
    clamped: Cell<u64>,
}

impl ExecModel for CountingProfile {
    fn exec_time(&self, batch_size: u32, longest_length: f64) -> Result<SimDuration, TuningError> {
        let lookup = self.profile.lookup(batch_size, longest_length)?;
        if lookup.clamped {
            self.clamped.set(self.clamped.get() + 1);
        }
        Ok(lookup.latency)
    }
}

enum Preproc {
    Cpu(CpuPool),
    Dpu { dpu: Dpu, overhead: SimDuration },
}

struct State {
    requests: Vec<Request>,
    request_bucket: Vec<(usize, u64, u32)>,
    dpu_group: Vec<u8>,
    preproc: Preproc,
    batcher: Batcher,
    server: Server<CountingProfile>,
    traces: Vec<TraceRecord>,
    dispatches: Vec<DispatchRecord>,
}

impl State {
    fn preproc_submit(
        &mut self,
        id: usize,
        group: usize,
        now: SimTime,
        engine: &mut Engine,
    ) -> Result<(), SimError> {
        let length = self.requests[id].input_length;
        let (slot, kind, at) = match &mut self.preproc {
            Preproc::Cpu(pool) => {
                let slot = pool.submit(length, now);
                (slot, EventKind::PreprocDone, slot.done)
            }
            Preproc::Dpu { dpu, overhead } => {
                let slot = dpu.submit(group, length, now)?;
                if group + 1 < dpu.group_count() {
                    self.dpu_group[id] = (group + 1) as u8;
                    (slot, EventKind::CuDone, slot.done)
                } else {
                    (slot, EventKind::PreprocDone, slot.done + *overhead)
                }
            }
        };
        if group == 0 {
            self.requests[id].timestamps.preproc_start = Some(slot.start);
        }
        engine.schedule(at, kind, id as u64)?;
        Ok(())
    }

    fn dispatch(&mut self, now: SimTime, engine: &mut Engine) -> Result<(), SimError> {
        for batch in self.batcher.poll_dispatch(now) {
            self.dispatches.push(DispatchRecord {
                dispatch_time: batch.dispatch_time,
                bucket: batch.bucket,
                batch_size: batch.size(),
                longest_len_s: batch.longest_length,
                trigger: batch.trigger,
            });
            for m in &batch.members {
                let id = m.id as usize;
                self.requests[id].timestamps.batch_dispatched = Some(now);
                self.request_bucket[id] = (batch.bucket, batch.id, batch.size());
            }
            if let Some(a) = self.server.submit(batch, now)? {
                self.start(a, engine)?;
            }
        }
        for (bucket, deadline) in self.batcher.rearm(now) {
            engine.schedule(deadline, EventKind::BatchTimerFired, bucket as u64)?;
        }
        Ok(())
    }

    fn start(&mut self, a: Assignment, engine: &mut Engine) -> Result<(), SimError> {
        for m in &a.batch.members {
            let ts = &mut self.requests[m.id as usize].timestamps;
            ts.exec_start = Some(a.exec_start);
            ts.exec_done = Some(a.exec_done);
        }
        engine.schedule(a.exec_done, EventKind::ExecDone, a.vgpu as u64)?;
        Ok(())
    }

    fn finish(&mut self, batch: &Batch) {
        for m in &batch.members {
            let r = &self.requests[m.id as usize];
            let ts = r.timestamps;
            let (bucket, batch_id, batch_size) = self.request_bucket[m.id as usize];
            let record = TraceRecord {
                id: r.id,
                arrival: r.arrival,
                preproc_start: ts.preproc_start.unwrap_or(r.arrival),
                preproc_done: ts.preproc_done.expect("preprocessed"),
                dispatched: ts.batch_dispatched.expect("dispatched"),
                exec_start: ts.exec_start.expect("started"),
                exec_done: ts.exec_done.expect("finished"),
                input_length: r.input_length,
                bucket,
                batch_id,
                batch_size,
            };
            debug_assert!(record.is_ordered());
            self.traces.push(record);
        }
    }
}

impl EventHandler for State {
    type Error = SimError;

    fn handle(&mut self, event: &Event, engine: &mut Engine) -> Result<(), SimError> {
        let now = event.time;
        match event.kind {
            EventKind::Arrival => {
                let id = event.payload as usize;
                if let Some(next) = self.requests.get(id + 1) {
                    engine.schedule(next.arrival, EventKind::Arrival, next.id)?;
                }
                self.preproc_submit(id, 0, now, engine)?;
            }
            EventKind::CuDone => {
                let id = event.payload as usize;
                let group = self.dpu_group[id] as usize;
                self.preproc_submit(id, group, now, engine)?;
            }
            EventKind::PreprocDone => {
                let id = event.payload as usize;
                let r = &mut self.requests[id];
                r.timestamps.preproc_done = Some(now);
                let pending = Pending {
                    id: r.id,
                    ready: now,
                    length: r.input_length,
                };
                if let Some((bucket, deadline)) = self.batcher.enqueue(pending) {
                    engine.schedule(deadline, EventKind::BatchTimerFired, bucket as u64)?;
                }
                self.dispatch(now, engine)?;
            }
            EventKind::BatchTimerFired => self.dispatch(now, engine)?,
            EventKind::ExecDone => {
                let (batch, next) = self.server.on_exec_done(event.payload as usize, now)?;
                self.finish(&batch);
                if let Some(a) = next {
                    self.start(a, engine)?;
                }
            }
            EventKind::Shutdown => {}
        }
        Ok(())
    }
}

/// A single simulation instance.
pub struct Simulation {
    engine: Engine,
    state: State,
    config: SimConfig,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let requests = generate_arrivals(&config.traffic)?;
        let window =
            MeasurementWindow::after_warmup(config.traffic.duration, config.warmup_fraction);
        let meter = BusyMeter::new(window.start, window.end);
        let preproc = match &config.preproc {
            PreprocSpec::Cpu(spec) => Preproc::Cpu(CpuPool::new(spec.clone(), meter)?),
            PreprocSpec::Dpu(spec) => Preproc::Dpu {
                dpu: Dpu::new(spec.clone(), meter)?,
                overhead: spec.transfer_overhead(),
            },
        };
        let exec = CountingProfile {
            profile: Arc::clone(&config.profile),
            clamped: Cell::new(0),
        };
        let mut engine = if config.record_events {
            Engine::new().with_trace()
        } else {
            Engine::new()
        };
        if let Some(first) = requests.first() {
            engine.schedule(first.arrival, EventKind::Arrival, first.id)?;
        }
        let n = requests.len();
        let state = State {
            requests,
            request_bucket: vec![(0, 0, 0); n],
            dpu_group: vec![0; n],
            preproc,
            batcher: Batcher::new(config.policy.clone(), config.merge_order)?,
            server: Server::new(exec, config.active_vgpus, meter),
            traces: Vec::new(),
            dispatches: Vec::new(),
        };
        Ok(Self {
            engine,
            state,
            config,
        })
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    /// Processes every event up to `t_end` and reports on the window ending there.
    pub fn run_until(&mut self, t_end: SimTime) -> Result<SimReport, SimError> {
        self.engine.run_until(t_end, &mut self.state)?;
        self.report(t_end)
    }

    fn report(&self, t_end: SimTime) -> Result<SimReport, SimError> {
        let window = MeasurementWindow::after_warmup(t_end, self.config.warmup_fraction);
        let w = window.len_us();
        let mut util = BTreeMap::new();
        util.insert(
            "vgpu".to_string(),
            utilization(
                self.state.server.busy_us(t_end),
                self.state.server.capacity(),
                w,
            ),
        );
        match &self.state.preproc {
            Preproc::Cpu(pool) => {
                util.insert(
                    "cpu".into(),
                    utilization(pool.busy_us(), pool.capacity(), w),
                );
            }
            Preproc::Dpu { dpu, .. } => {
                util.insert(
                    "dpu".into(),
                    utilization(dpu.busy_us(), dpu.stage_slots(), w),
                );
            }
        }
        let clamped = self.state.server.model().clamped.get();
        if clamped > 0 {
            log::warn!(
                "{clamped} execution lookups fell outside the profiled grid and were clamped"
            );
        }
        Ok(build_report(
            &self.state.traces,
            self.state.requests.len() as u64,
            window,
            util,
            self.config.price.as_ref(),
        )?)
    }

    /// Runs to the end of the traffic duration and returns every artifact.
    pub fn run(mut self) -> Result<SimOutput, SimError> {
        let report = self.run_until(self.config.traffic.duration)?;
        Ok(SimOutput {
            report,
            traces: self.state.traces,
            dispatches: self.state.dispatches,
            events: self.engine.take_trace(),
        })
    }

    /// Requests still inside the pipeline.
    pub fn in_flight(&self) -> usize {
        self.state.requests.len() - self.state.traces.len()
    }

    pub fn traces(&self) -> &[TraceRecord] {
        &self.state.traces
    }

    pub fn requests(&self) -> &[Request] {
        &self.state.requests
    }
}

pub fn simulate(config: SimConfig) -> Result<SimOutput, SimError> {
    Simulation::new(config)?.run()
}

/// Result of a saturated-feed run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturatedFeed {
    pub qps: f64,
    pub vgpu_utilization: f64,
    pub batches: u64,
}

struct FeedDriver<'a> {
    server: Server<&'a ModelProfile>,
    batch: u32,
    length: f64,
    next_id: u64,
    completed_requests: u64,
}

impl<M: ExecModel + ?Sized> ExecModel for &M {
    fn exec_time(&self, batch_size: u32, longest_length: f64) -> Result<SimDuration, TuningError> {
        (**self).exec_time(batch_size, longest_length)
    }
}

impl FeedDriver<'_> {
    fn make_batch(&mut self, now: SimTime) -> Batch {
        let id = self.next_id;
        self.next_id += 1;
        Batch {
            id,
            members: (0..self.batch)
                .map(|i| Pending {
                    id: id * u64::from(self.batch) + u64::from(i),
                    ready: now,
                    length: self.length,
                })
                .collect(),
            longest_length: self.length,
            bucket: 0,
            origin: 0,
            dispatch_time: now,
            trigger: Trigger::Size,
        }
    }
}

impl EventHandler for FeedDriver<'_> {
    type Error = SimError;

    fn handle(&mut self, event: &Event, engine: &mut Engine) -> Result<(), SimError> {
        if event.kind != EventKind::ExecDone {
            return Ok(());
        }
        let (done, next) = self
            .server
            .on_exec_done(event.payload as usize, event.time)?;
        self.completed_requests += u64::from(done.size());
        if let Some(a) = next {
            engine.schedule(a.exec_done, EventKind::ExecDone, a.vgpu as u64)?;
        }
        // Keep the ready queue topped up so no vGPU ever starves.
        let batch = self.make_batch(event.time);
        if let Some(a) = self.server.submit(batch, event.time)? {
            engine.schedule(a.exec_done, EventKind::ExecDone, a.vgpu as u64)?;
        }
        Ok(())
    }
}

/// Feeds `vgpus` vGPUs an unlimited supply of size-`batch` batches at input
/// length `length` for `duration`, measuring carried throughput.
pub fn saturated_feed(
    profile: &ModelProfile,
    vgpus: u32,
    batch: u32,
    length: f64,
    duration: SimTime,
) -> Result<SaturatedFeed, SimError> {
    let mut engine = Engine::new();
    let mut driver = FeedDriver {
        server: Server::new(profile, vgpus, BusyMeter::new(SimTime::ZERO, duration)),
        batch,
        length,
        next_id: 0,
        completed_requests: 0,
    };
    for _ in 0..=vgpus {
        let b = driver.make_batch(SimTime::ZERO);
        if let Some(a) = driver.server.submit(b, SimTime::ZERO)? {
            engine.schedule(a.exec_done, EventKind::ExecDone, a.vgpu as u64)?;
        }
    }
    engine.run_until(duration, &mut driver)?;
    let batches = driver
        .server
        .vgpus()
        .iter()
        .map(|v| v.executed_batches)
        .sum();
    Ok(SaturatedFeed {
        qps: driver.completed_requests as f64 / duration.as_secs_f64(),
        vgpu_utilization: utilization(
            driver.server.busy_us(duration),
            driver.server.capacity(),
            duration.as_micros(),
        ),
        batches,
    })
}
