//! vGPU execution stage: `V` homogeneous vGPUs consume dispatched batches FIFO.

use std::collections::VecDeque;

use crate::batching::Batch;
use crate::engine::{BusyMeter, EngineError, Resource};
use crate::time::{SimDuration, SimTime};
use crate::tuning::{ModelProfile, TuningError};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VGpu {
    pub id: usize,
    pub busy_until: Option<SimTime>,
    pub executed_batches: u64,
}

/// A batch placed on a vGPU.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub vgpu: usize,
    pub batch: Batch,
    pub exec_start: SimTime,
    pub exec_done: SimTime,
}

/// Execution-time source for a batch.
pub trait ExecModel {
    fn exec_time(&self, batch_size: u32, longest_length: f64) -> Result<SimDuration, TuningError>;
}

impl ExecModel for ModelProfile {
    fn exec_time(&self, batch_size: u32, longest_length: f64) -> Result<SimDuration, TuningError> {
        // Lookups outside the grid are counted by the simulator, not logged per batch.
        Ok(self.lookup(batch_size, longest_length)?.latency)
    }
}

#[derive(Debug)]
pub struct Server<M> {
    model: M,
    vgpus: Vec<VGpu>,
    running: Vec<Option<Batch>>,
    ready: VecDeque<Batch>,
    resource: Resource,
}

impl<M: ExecModel> Server<M> {
    pub fn new(model: M, vgpu_count: u32, meter: BusyMeter) -> Self {
        let n = vgpu_count.max(1) as usize;
        Self {
            model,
            vgpus: (0..n)
                .map(|id| VGpu {
                    id,
                    ..VGpu::default()
                })
                .collect(),
            running: vec![None; n],
            ready: VecDeque::new(),
            resource: Resource::new(0, n as u32, meter),
        }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn vgpus(&self) -> &[VGpu] {
        &self.vgpus
    }

    pub fn queued(&self) -> usize {
        self.ready.len()
    }

    pub fn idle_count(&self) -> u32 {
        self.resource.idle()
    }

    pub fn busy_us(&self, now: SimTime) -> u128 {
        self.resource.busy_us(now)
    }

    pub fn capacity(&self) -> u32 {
        self.resource.capacity()
    }

    /// Queues a dispatched batch and starts it at once if a vGPU is idle.
    pub fn submit(
        &mut self,
        batch: Batch,
        now: SimTime,
    ) -> Result<Option<Assignment>, ServerError> {
        self.ready.push_back(batch);
        self.start_next(now)
    }

    /// Places `batch` on the lowest-numbered idle vGPU.
    pub fn assign_batch(&mut self, batch: Batch, now: SimTime) -> Result<Assignment, ServerError> {
        let vgpu = self
            .running
            .iter()
            .position(Option::is_none)
            .ok_or(ServerError::NoIdleVgpu)?;
        let exec = self.model.exec_time(batch.size(), batch.longest_length)?;
        self.resource.acquire(now)?;
        let done = now + exec;
        self.vgpus[vgpu].busy_until = Some(done);
        self.running[vgpu] = Some(batch.clone());
        Ok(Assignment {
            vgpu,
            batch,
            exec_start: now,
            exec_done: done,
        })
    }

    fn start_next(&mut self, now: SimTime) -> Result<Option<Assignment>, ServerError> {
        if self.resource.idle() == 0 {
            return Ok(None);
        }
        match self.ready.pop_front() {
            Some(batch) => self.assign_batch(batch, now).map(Some),
            None => Ok(None),
        }
    }

    /// Frees `vgpu` and starts the next queued batch on it, if any.
    /// Returns the finished batch and the follow-on assignment.
    pub fn on_exec_done(
        &mut self,
        vgpu: usize,
        now: SimTime,
    ) -> Result<(Batch, Option<Assignment>), ServerError> {
        let batch = self
            .running
            .get_mut(vgpu)
            .and_then(Option::take)
            .ok_or(ServerError::NotRunning(vgpu))?;
        self.vgpus[vgpu].busy_until = None;
        self.vgpus[vgpu].executed_batches += 1;
        self.resource.release(now)?;
        let next = self.start_next(now)?;
        Ok((batch, next))
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ServerError {
    #[error("no idle vGPU")]
    NoIdleVgpu,
    #[error("vGPU {0} is not running a batch")]
    NotRunning(usize),
    #[error(transparent)]
    Profile(#[from] TuningError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::{Pending, Trigger};

    struct Fixed(u64);

    impl ExecModel for Fixed {
        fn exec_time(&self, _: u32, _: f64) -> Result<SimDuration, TuningError> {
            Ok(SimDuration(self.0))
        }
    }

    fn batch(id: u64, size: usize) -> Batch {
        Batch {
            id,
            members: (0..size)
                .map(|i| Pending {
                    id: id * 100 + i as u64,
                    ready: SimTime::ZERO,
                    length: 1.0,
                })
                .collect(),
            longest_length: 1.0,
            bucket: 0,
            origin: 0,
            dispatch_time: SimTime::ZERO,
            trigger: Trigger::Size,
        }
    }

    #[test]
    fn full_parallelism() {
        let mut s = Server::new(Fixed(10), 7, BusyMeter::unbounded());
        let starts: Vec<_> = (0..7)
            .map(|i| s.submit(batch(i, 1), SimTime(5)).unwrap().unwrap())
            .collect();
        assert!(starts.iter().all(|a| a.exec_start == SimTime(5)));
        let mut ids: Vec<_> = starts.iter().map(|a| a.vgpu).collect();
        ids.dedup();
        assert_eq!(ids.len(), 7);
        assert!(s.submit(batch(8, 1), SimTime(5)).unwrap().is_none());
    }

    #[test]
    fn serialization_on_one_vgpu() {
        let mut s = Server::new(Fixed(10), 1, BusyMeter::unbounded());
        let first = s.submit(batch(0, 1), SimTime(0)).unwrap().unwrap();
        assert!(s.submit(batch(1, 1), SimTime(0)).unwrap().is_none());
        let (done, next) = s.on_exec_done(first.vgpu, first.exec_done).unwrap();
        assert_eq!(done.id, 0);
        let next = next.unwrap();
        assert_eq!(next.exec_start, SimTime(10));
        assert_eq!(next.exec_done, SimTime(20));
        let (_, none) = s.on_exec_done(0, SimTime(20)).unwrap();
        assert!(none.is_none());
        assert_eq!(s.vgpus()[0].executed_batches, 2);
        assert_eq!(s.busy_us(SimTime(40)), 20);
    }

    #[test]
    fn exec_time_from_profile() {
        let profile = ModelProfile::from_fn(
            "m",
            "1g.5gb".parse().unwrap(),
            &[1, 2, 4],
            &[1.0],
            |b, _| 1_000.0 * f64::from(b),
        )
        .unwrap();
        let mut s = Server::new(profile, 1, BusyMeter::unbounded());
        let a = s.submit(batch(0, 4), SimTime(0)).unwrap().unwrap();
        assert_eq!(a.exec_done - a.exec_start, SimDuration(4_000));
    }

    #[test]
    fn errors() {
        let mut s = Server::new(Fixed(10), 1, BusyMeter::unbounded());
        assert_eq!(
            s.on_exec_done(0, SimTime(0)).unwrap_err(),
            ServerError::NotRunning(0)
        );
        s.assign_batch(batch(0, 1), SimTime(0)).unwrap();
        assert_eq!(
            s.assign_batch(batch(1, 1), SimTime(0)).unwrap_err(),
            ServerError::NoIdleVgpu
        );
    }
}
