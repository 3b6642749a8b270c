//! Discrete-event model of a MIG-partitioned inference server.
//!
//! Requests arrive as a Poisson stream, are preprocessed by a CPU worker pool
//! or a pipelined accelerator (DPU), are grouped by a length-bucketed dynamic
//! batcher and run on homogeneous vGPUs whose execution latency comes from an
//! offline profile. The [`tuning`] module derives batching hyperparameters
//! from that profile.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batching;
pub mod engine;
pub mod metrics;
pub mod preproc;
pub mod scenario;
pub mod server;
pub mod sim;
pub mod time;
pub mod tuning;
pub mod workload;

pub use batching::{bucket_index, Batch, Batcher, MergeOrder, Pending, Trigger};
pub use engine::{Engine, Event, EventKind, Resource};
pub use metrics::{percentile, PriceModel, SimReport, TraceRecord};
pub use preproc::{CpuPoolSpec, CuSpec, DpuSpec, LatencyModel};
pub use scenario::{Scenario, ScenarioConfig, SweepSpec};
pub use sim::{saturated_feed, simulate, PreprocSpec, SimConfig, SimOutput, Simulation};
pub use time::{SimDuration, SimTime};
pub use tuning::{BatchingPolicy, MigConfig, ModelProfile, VgpuShape};
pub use workload::{generate_arrivals, InputKind, LengthDistribution, Request, TrafficSpec};
