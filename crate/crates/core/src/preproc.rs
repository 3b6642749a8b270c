//! Preprocessing stage models: a CPU worker pool and a DPU built from
//! compute units (CUs) of pipelined functional units.
//!
//! Both models are driven in event-time order, so assigning each submission
//! to the earliest-completing server reproduces FIFO queueing without a
//! separate wait list.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::BusyMeter;
use crate::time::{SimDuration, SimTime};

/// Default host-DPU transit time added once per request.
pub const DEFAULT_TRANSFER_OVERHEAD: SimDuration = SimDuration::from_micros(50);

#[derive(Debug, Error, PartialEq)]
pub enum PreprocError {
    #[error("invalid preprocessing spec: {0}")]
    InvalidSpec(String),
    #[error("no CU group {0}")]
    NoSuchGroup(usize),
}

/// Stage cost as a function of input length: `base_us + per_second_us * length^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    #[serde(default)]
    pub base_us: f64,
    #[serde(default)]
    pub per_second_us: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
}

fn default_exponent() -> f64 {
    1.0
}

impl LatencyModel {
    pub fn constant(us: f64) -> Self {
        Self {
            base_us: us,
            per_second_us: 0.0,
            exponent: 1.0,
        }
    }

    pub fn linear(base_us: f64, per_second_us: f64) -> Self {
        Self {
            base_us,
            per_second_us,
            exponent: 1.0,
        }
    }

    /// Latency at `length` seconds, rounded to whole microseconds (at least one).
    pub fn at(&self, length: f64) -> SimDuration {
        let us = self.base_us + self.per_second_us * length.max(0.0).powf(self.exponent);
        SimDuration((us.round().max(1.0)) as u64)
    }

    fn validate(&self, what: &str) -> Result<(), PreprocError> {
        let ok = [self.base_us, self.per_second_us, self.exponent]
            .iter()
            .all(|v| v.is_finite())
            && self.base_us >= 0.0
            && self.per_second_us >= 0.0
            && self.base_us + self.per_second_us > 0.0;
        if ok {
            Ok(())
        } else {
            Err(PreprocError::InvalidSpec(format!(
                "{what}: latency must be strictly positive"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpuPoolSpec {
    pub workers: u32,
    pub service: LatencyModel,
    /// Upper bound on achievable worker utilization, in (0, 1].
    #[serde(default = "default_efficiency_cap")]
    pub efficiency_cap: f64,
}

fn default_efficiency_cap() -> f64 {
    1.0
}

impl CpuPoolSpec {
    pub fn validate(&self) -> Result<(), PreprocError> {
        if self.workers == 0 {
            return Err(PreprocError::InvalidSpec("cpu.workers must be >= 1".into()));
        }
        if !(self.efficiency_cap > 0.0 && self.efficiency_cap <= 1.0) {
            return Err(PreprocError::InvalidSpec(
                "cpu.efficiency_cap must be in (0, 1]".into(),
            ));
        }
        self.service.validate("cpu.service")
    }

    /// Wall time a worker is held for one request: useful work stretched by the efficiency cap.
    pub fn occupancy(&self, length: f64) -> SimDuration {
        let useful = self.service.at(length);
        SimDuration((useful.0 as f64 / self.efficiency_cap).ceil() as u64)
    }
}

/// A scheduled preprocessing slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub server: usize,
    pub start: SimTime,
    pub done: SimTime,
}

/// FIFO pool of identical CPU workers.
#[derive(Debug, Clone)]
pub struct CpuPool {
    spec: CpuPoolSpec,
    free_at: Vec<SimTime>,
    meter: BusyMeter,
}

impl CpuPool {
    pub fn new(spec: CpuPoolSpec, meter: BusyMeter) -> Result<Self, PreprocError> {
        spec.validate()?;
        let free_at = vec![SimTime::ZERO; spec.workers as usize];
        Ok(Self {
            spec,
            free_at,
            meter,
        })
    }

    pub fn spec(&self) -> &CpuPoolSpec {
        &self.spec
    }

    /// Schedules one request that became ready at `now`. Submissions must
    /// arrive in non-decreasing `now` order.
    pub fn submit(&mut self, length: f64, now: SimTime) -> Slot {
        let (worker, free) = self
            .free_at
            .iter()
            .copied()
            .enumerate()
            .min_by_key(|&(i, t)| (t, i))
            .expect("pool has at least one worker");
        let start = free.max(now);
        let done = start + self.spec.occupancy(length);
        self.free_at[worker] = done;
        self.meter
            .record(start, start + self.spec.service.at(length), 1);
        Slot {
            server: worker,
            start,
            done,
        }
    }

    /// Useful (non-stall) busy time inside the meter window.
    pub fn busy_us(&self) -> u128 {
        self.meter.busy_us()
    }

    pub fn capacity(&self) -> u32 {
        self.spec.workers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Decode,
    Resize,
    Crop,
    Normalize,
    Resample,
    MelSpectrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalUnitSpec {
    pub name: UnitKind,
    pub latency: LatencyModel,
}

impl FunctionalUnitSpec {
    pub fn new(name: UnitKind, latency: LatencyModel) -> Self {
        Self { name, latency }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuSpec {
    pub units: Vec<FunctionalUnitSpec>,
    /// When set, successive requests overlap across units of this CU.
    pub pipelined: bool,
}

impl CuSpec {
    pub fn validate(&self) -> Result<(), PreprocError> {
        if self.units.is_empty() {
            return Err(PreprocError::InvalidSpec(
                "a CU needs at least one functional unit".into(),
            ));
        }
        for u in &self.units {
            u.latency.validate(&format!("unit {:?}", u.name))?;
        }
        Ok(())
    }

    /// Vision CU: decode, resize, crop, normalize, pipelined. Latencies in microseconds.
    pub fn vision(decode: f64, resize: f64, crop: f64, normalize: f64) -> Self {
        Self {
            units: vec![
                FunctionalUnitSpec::new(UnitKind::Decode, LatencyModel::constant(decode)),
                FunctionalUnitSpec::new(UnitKind::Resize, LatencyModel::constant(resize)),
                FunctionalUnitSpec::new(UnitKind::Crop, LatencyModel::constant(crop)),
                FunctionalUnitSpec::new(UnitKind::Normalize, LatencyModel::constant(normalize)),
            ],
            pipelined: true,
        }
    }

    /// Audio CU type A (resample + mel spectrogram), run as one unit per request.
    pub fn audio_front(resample: LatencyModel, mel: LatencyModel) -> Self {
        Self {
            units: vec![
                FunctionalUnitSpec::new(UnitKind::Resample, resample),
                FunctionalUnitSpec::new(UnitKind::MelSpectrogram, mel),
            ],
            pipelined: false,
        }
    }

    /// Audio CU type B (normalize).
    pub fn audio_normalize(normalize: LatencyModel) -> Self {
        Self {
            units: vec![FunctionalUnitSpec::new(UnitKind::Normalize, normalize)],
            pipelined: false,
        }
    }

    /// A single CU holding every unit of `parts`; one request at a time.
    pub fn monolithic(parts: &[&CuSpec]) -> Self {
        Self {
            units: parts.iter().flat_map(|c| c.units.iter().cloned()).collect(),
            pipelined: false,
        }
    }

    /// Total latency of one request through this CU without contention.
    pub fn total_latency(&self, length: f64) -> SimDuration {
        self.units.iter().map(|u| u.latency.at(length)).sum()
    }

    /// Scheduling stages: one per unit when pipelined, otherwise a single
    /// stage covering every unit.
    pub fn stage_latencies(&self, length: f64) -> Vec<SimDuration> {
        if self.pipelined {
            self.units.iter().map(|u| u.latency.at(length)).collect()
        } else {
            vec![self.total_latency(length)]
        }
    }

    fn stage_count(&self) -> usize {
        if self.pipelined {
            self.units.len()
        } else {
            1
        }
    }
}

/// One CU instance: per-stage next-free times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CuInstance {
    stage_free: Vec<SimTime>,
}

impl CuInstance {
    fn new(stages: usize) -> Self {
        Self {
            stage_free: vec![SimTime::ZERO; stages],
        }
    }

    fn completion_if(&self, ready: SimTime, stages: &[SimDuration]) -> SimTime {
        stages
            .iter()
            .zip(&self.stage_free)
            .fold(ready, |t, (s, free)| t.max(*free) + *s)
    }

    /// Reserves every stage for one request; returns per-stage `(start, end)`.
    fn commit(&mut self, ready: SimTime, stages: &[SimDuration]) -> Vec<(SimTime, SimTime)> {
        let mut t = ready;
        let mut spans = Vec::with_capacity(stages.len());
        for (s, free) in stages.iter().zip(self.stage_free.iter_mut()) {
            let start = t.max(*free);
            t = start + *s;
            *free = t;
            spans.push((start, t));
        }
        spans
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuGroup {
    pub cu: CuSpec,
    pub count: u32,
}

/// A DPU: an ordered chain of CU groups. A request visits every group in
/// order and may start a group only after finishing the previous one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpuSpec {
    pub groups: Vec<CuGroup>,
    #[serde(default = "default_overhead_us")]
    pub transfer_overhead_us: u64,
}

fn default_overhead_us() -> u64 {
    DEFAULT_TRANSFER_OVERHEAD.as_micros()
}

impl DpuSpec {
    pub fn single(cu: CuSpec, count: u32) -> Self {
        Self {
            groups: vec![CuGroup { cu, count }],
            transfer_overhead_us: DEFAULT_TRANSFER_OVERHEAD.as_micros(),
        }
    }

    /// Split audio design: `a_count` front CUs feeding `b_count` normalize CUs.
    pub fn audio_split(cu_a: CuSpec, a_count: u32, cu_b: CuSpec, b_count: u32) -> Self {
        Self {
            groups: vec![
                CuGroup {
                    cu: cu_a,
                    count: a_count,
                },
                CuGroup {
                    cu: cu_b,
                    count: b_count,
                },
            ],
            transfer_overhead_us: DEFAULT_TRANSFER_OVERHEAD.as_micros(),
        }
    }

    pub fn with_overhead(mut self, overhead: SimDuration) -> Self {
        self.transfer_overhead_us = overhead.as_micros();
        self
    }

    pub fn transfer_overhead(&self) -> SimDuration {
        SimDuration(self.transfer_overhead_us)
    }

    pub fn validate(&self) -> Result<(), PreprocError> {
        if self.groups.is_empty() {
            return Err(PreprocError::InvalidSpec(
                "dpu.groups must not be empty".into(),
            ));
        }
        for g in &self.groups {
            if g.count == 0 {
                return Err(PreprocError::InvalidSpec(
                    "dpu group count must be >= 1".into(),
                ));
            }
            g.cu.validate()?;
        }
        Ok(())
    }
}

/// Runtime state of a DPU.
#[derive(Debug, Clone)]
pub struct Dpu {
    spec: DpuSpec,
    instances: Vec<Vec<CuInstance>>,
    meter: BusyMeter,
    stage_slots: u32,
}

impl Dpu {
    pub fn new(spec: DpuSpec, meter: BusyMeter) -> Result<Self, PreprocError> {
        spec.validate()?;
        let instances = spec
            .groups
            .iter()
            .map(|g| vec![CuInstance::new(g.cu.stage_count()); g.count as usize])
            .collect();
        let stage_slots = spec
            .groups
            .iter()
            .map(|g| g.count * g.cu.stage_count() as u32)
            .sum();
        Ok(Self {
            spec,
            instances,
            meter,
            stage_slots,
        })
    }

    pub fn spec(&self) -> &DpuSpec {
        &self.spec
    }

    pub fn group_count(&self) -> usize {
        self.instances.len()
    }

    /// Assigns a request ready at `now` to the instance of `group` that
    /// completes it earliest (lowest index on ties).
    pub fn submit(
        &mut self,
        group: usize,
        length: f64,
        now: SimTime,
    ) -> Result<Slot, PreprocError> {
        let cu = &self
            .spec
            .groups
            .get(group)
            .ok_or(PreprocError::NoSuchGroup(group))?
            .cu;
        let stages = cu.stage_latencies(length);
        let instances = &mut self.instances[group];
        let (best, _) = instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (i, inst.completion_if(now, &stages)))
            .min_by_key(|&(i, done)| (done, i))
            .expect("group has at least one instance");
        let spans = instances[best].commit(now, &stages);
        for &(s, e) in &spans {
            self.meter.record(s, e, 1);
        }
        Ok(Slot {
            server: best,
            start: spans[0].0,
            done: spans[spans.len() - 1].1,
        })
    }

    /// Single-group dispatch: completion time including the transfer overhead.
    ///
    /// For multi-group DPUs, drive [`Dpu::submit`] group by group in event
    /// order instead; this helper chains groups eagerly.
    pub fn dispatch(&mut self, length: f64, now: SimTime) -> SimTime {
        let mut t = now;
        for g in 0..self.group_count() {
            t = self.submit(g, length, t).expect("group exists").done;
        }
        t + self.spec.transfer_overhead()
    }

    pub fn busy_us(&self) -> u128 {
        self.meter.busy_us()
    }

    /// Number of independently busy stage slots across all CU instances.
    pub fn stage_slots(&self) -> u32 {
        self.stage_slots
    }
}

/// A preprocessing job for the closed-form makespan helpers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocJob {
    pub ready: SimTime,
    pub input_length: f64,
}

impl PreprocJob {
    pub fn at(ready: SimTime, input_length: f64) -> Self {
        Self {
            ready,
            input_length,
        }
    }
}

/// Completion times of `jobs` through a DPU with no transfer overhead,
/// feeding each group in order of readiness (input order on ties).
pub fn dpu_makespan(jobs: &[PreprocJob], spec: &DpuSpec) -> Result<Vec<SimTime>, PreprocError> {
    let mut dpu = Dpu::new(spec.clone(), BusyMeter::unbounded())?;
    let mut ready: Vec<SimTime> = jobs.iter().map(|j| j.ready).collect();
    for g in 0..dpu.group_count() {
        let mut order: Vec<usize> = (0..jobs.len()).collect();
        order.sort_by_key(|&i| (ready[i], i));
        let mut next = ready.clone();
        for i in order {
            next[i] = dpu.submit(g, jobs[i].input_length, ready[i])?.done;
        }
        ready = next;
    }
    Ok(ready)
}

/// Per-request completion times through one CU instance.
pub fn cu_pipeline_makespan(
    jobs: &[PreprocJob],
    cu: &CuSpec,
) -> Result<Vec<SimTime>, PreprocError> {
    dpu_makespan(jobs, &DpuSpec::single(cu.clone(), 1))
}

/// Completion times with one instance each of the split audio CU types;
/// `cu_b` starts a request only after `cu_a` has fully finished it.
pub fn audio_two_cu_makespan(
    jobs: &[PreprocJob],
    cu_a: &CuSpec,
    cu_b: &CuSpec,
) -> Result<Vec<SimTime>, PreprocError> {
    dpu_makespan(
        jobs,
        &DpuSpec::audio_split(cu_a.clone(), 1, cu_b.clone(), 1),
    )
}

/// Completion times when every audio unit sits inside one non-pipelined CU.
pub fn monolithic_audio_makespan(
    jobs: &[PreprocJob],
    cu_a: &CuSpec,
    cu_b: &CuSpec,
) -> Result<Vec<SimTime>, PreprocError> {
    cu_pipeline_makespan(jobs, &CuSpec::monolithic(&[cu_a, cu_b]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: u64) -> SimTime {
        SimTime::from_millis(v)
    }

    fn vision_ms(a: u64, b: u64, c: u64, d: u64) -> CuSpec {
        CuSpec::vision(
            (a * 1000) as f64,
            (b * 1000) as f64,
            (c * 1000) as f64,
            (d * 1000) as f64,
        )
    }

    #[test]
    fn cpu_serial_queueing() {
        let spec = CpuPoolSpec {
            workers: 1,
            service: LatencyModel::constant(10_000.0),
            efficiency_cap: 1.0,
        };
        let mut pool = CpuPool::new(spec, BusyMeter::unbounded()).unwrap();
        assert_eq!(pool.submit(1.0, SimTime::ZERO).done, ms(10));
        assert_eq!(pool.submit(1.0, SimTime::ZERO).done, ms(20));
    }

    #[test]
    fn cpu_makespan_ceil_k_over_m() {
        for workers in 1..=5u32 {
            for k in 1..=12u64 {
                let spec = CpuPoolSpec {
                    workers,
                    service: LatencyModel::constant(3_000.0),
                    efficiency_cap: 1.0,
                };
                let mut pool = CpuPool::new(spec, BusyMeter::unbounded()).unwrap();
                let last = (0..k)
                    .map(|_| pool.submit(1.0, SimTime::ZERO).done)
                    .max()
                    .unwrap();
                assert_eq!(last, ms(3 * k.div_ceil(u64::from(workers))));
            }
        }
    }

    #[test]
    fn cpu_efficiency_cap_stretches_occupancy() {
        let spec = CpuPoolSpec {
            workers: 1,
            service: LatencyModel::constant(9_000.0),
            efficiency_cap: 0.9,
        };
        assert_eq!(spec.occupancy(1.0), SimDuration::from_millis(10));
        let mut pool = CpuPool::new(spec, BusyMeter::unbounded()).unwrap();
        pool.submit(1.0, SimTime::ZERO);
        assert_eq!(pool.submit(1.0, SimTime::ZERO).done, ms(20));
        assert_eq!(pool.busy_us(), 18_000);
    }

    #[test]
    fn cpu_spec_validation() {
        let mut spec = CpuPoolSpec {
            workers: 0,
            service: LatencyModel::constant(1.0),
            efficiency_cap: 1.0,
        };
        assert!(spec.validate().is_err());
        spec.workers = 1;
        spec.efficiency_cap = 0.0;
        assert!(spec.validate().is_err());
        spec.efficiency_cap = 1.0;
        spec.service = LatencyModel::constant(0.0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn single_request_sums_stages() {
        let cu = vision_ms(2, 3, 1, 2);
        let out = cu_pipeline_makespan(&[PreprocJob::at(SimTime::ZERO, 1.0)], &cu).unwrap();
        assert_eq!(out, vec![ms(8)]);
    }

    #[test]
    fn two_requests_pipeline() {
        let cu = vision_ms(2, 3, 1, 2);
        let jobs = [PreprocJob::at(SimTime::ZERO, 1.0); 2];
        assert_eq!(
            cu_pipeline_makespan(&jobs, &cu).unwrap(),
            vec![ms(8), ms(11)]
        );
    }

    #[test]
    fn equal_stages_classic_formula() {
        let cu = vision_ms(2, 2, 2, 2);
        for k in 1..10u64 {
            let jobs = vec![PreprocJob::at(SimTime::ZERO, 1.0); k as usize];
            let out = cu_pipeline_makespan(&jobs, &cu).unwrap();
            assert_eq!(*out.last().unwrap(), ms((4 + k - 1) * 2));
        }
    }

    #[test]
    fn audio_split_vs_monolithic() {
        let a = CuSpec::audio_front(
            LatencyModel::constant(1_000.0),
            LatencyModel::constant(3_000.0),
        );
        let b = CuSpec::audio_normalize(LatencyModel::constant(2_000.0));
        let jobs = [PreprocJob::at(SimTime::ZERO, 1.0); 2];
        assert_eq!(
            audio_two_cu_makespan(&jobs, &a, &b).unwrap(),
            vec![ms(6), ms(10)]
        );
        assert_eq!(
            monolithic_audio_makespan(&jobs, &a, &b).unwrap(),
            vec![ms(6), ms(12)]
        );
    }

    #[test]
    fn audio_k_requests_equal_service() {
        let s = 3_000.0;
        let a = CuSpec::audio_front(
            LatencyModel::constant(s / 2.0),
            LatencyModel::constant(s / 2.0),
        );
        let b = CuSpec::audio_normalize(LatencyModel::constant(s));
        for k in 1..8u64 {
            let jobs = vec![PreprocJob::at(SimTime::ZERO, 1.0); k as usize];
            let split = audio_two_cu_makespan(&jobs, &a, &b).unwrap();
            let mono = monolithic_audio_makespan(&jobs, &a, &b).unwrap();
            assert_eq!(*split.last().unwrap(), ms((k + 1) * 3));
            assert_eq!(*mono.last().unwrap(), ms(2 * k * 3));
        }
    }

    #[test]
    fn dispatch_two_instances_no_contention() {
        let mut dpu = Dpu::new(
            DpuSpec::single(vision_ms(2, 3, 1, 2), 2),
            BusyMeter::unbounded(),
        )
        .unwrap();
        let overhead = DEFAULT_TRANSFER_OVERHEAD;
        assert_eq!(dpu.dispatch(1.0, SimTime::ZERO), ms(8) + overhead);
        assert_eq!(dpu.dispatch(1.0, SimTime::ZERO), ms(8) + overhead);
    }

    #[test]
    fn dispatch_zero_overhead_equals_makespan() {
        let spec = DpuSpec::single(vision_ms(2, 3, 1, 2), 1).with_overhead(SimDuration::ZERO);
        let mut dpu = Dpu::new(spec, BusyMeter::unbounded()).unwrap();
        assert_eq!(dpu.dispatch(1.0, SimTime::ZERO), ms(8));
        assert_eq!(dpu.dispatch(1.0, SimTime::ZERO), ms(11));
    }

    #[test]
    fn audio_latency_scales_with_length() {
        let m = LatencyModel::linear(100.0, 1_000.0);
        assert_eq!(m.at(2.0), SimDuration(2_100));
        let sq = LatencyModel { exponent: 2.0, ..m };
        assert_eq!(sq.at(3.0), SimDuration(9_100));
    }

    #[test]
    fn dpu_validation() {
        let mut spec = DpuSpec::single(vision_ms(1, 1, 1, 1), 0);
        assert!(spec.validate().is_err());
        spec.groups[0].count = 1;
        spec.groups[0].cu.units.clear();
        assert!(spec.validate().is_err());
        assert!(DpuSpec {
            groups: vec![],
            transfer_overhead_us: 0
        }
        .validate()
        .is_err());
    }
}
