use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use migbatchsim::batching::{replay, MergeOrder, Pending};
use migbatchsim::engine::{Engine, EngineError, Event, EventHandler, EventKind};
use migbatchsim::preproc::{CuSpec, DpuSpec};
use migbatchsim::sim::{simulate, PreprocSpec, SimConfig};
use migbatchsim::time::{SimDuration, SimTime};
use migbatchsim::tuning::{build_batching_policy, BatchingPolicy, SaturatingModel};
use migbatchsim::workload::{InputKind, LengthDistribution, TrafficSpec};

struct Chain {
    left: u64,
}

impl EventHandler for Chain {
    type Error = EngineError;

    fn handle(&mut self, event: &Event, engine: &mut Engine) -> Result<(), EngineError> {
        if self.left > 0 {
            self.left -= 1;
            engine.schedule_in(
                SimDuration(1 + event.payload % 7),
                EventKind::Arrival,
                event.payload + 1,
            )?;
        }
        Ok(())
    }
}

fn engine_throughput(c: &mut Criterion) {
    c.bench_function("engine_100k_events", |b| {
        b.iter(|| {
            let mut engine = Engine::new();
            for i in 0..64 {
                engine.schedule(SimTime(i), EventKind::Arrival, i).unwrap();
            }
            let mut h = Chain { left: 100_000 };
            black_box(engine.run_until(SimTime::MAX, &mut h).unwrap())
        })
    });
}

fn batcher_replay(c: &mut Criterion) {
    let policy = BatchingPolicy {
        bucket_width_s: 2.5,
        batch_max: vec![16, 8, 8, 4, 4, 4, 4, 2, 2, 2, 2, 2, 2, 2],
        time_queue: SimDuration(5_000),
        tail_knee: SimDuration(35_000),
    };
    let arrivals: Vec<Pending> = (0..10_000u64)
        .map(|i| Pending {
            id: i,
            ready: SimTime(i * 300),
            length: 1.0 + (i * 7919 % 340) as f64 / 10.0,
        })
        .collect();
    c.bench_function("batcher_replay_10k", |b| {
        b.iter(|| {
            black_box(
                replay(&arrivals, &policy, MergeOrder::ShorterFirst)
                    .unwrap()
                    .len(),
            )
        })
    });
}

fn knee_detection(c: &mut Criterion) {
    let batches: Vec<u32> = (0..9).map(|i| 1 << i).collect();
    let lengths: Vec<f64> = (1..=14).map(|i| f64::from(i) * 2.5).collect();
    let profile = SaturatingModel::with_knee(35_000.0, 16, 2.5)
        .profile("speech", "1g.5gb".parse().unwrap(), &batches, &lengths)
        .unwrap();
    let mig = "1g.5gb(7x)".parse().unwrap();
    c.bench_function("build_policy_14_buckets", |b| {
        b.iter(|| black_box(build_batching_policy(&profile, &mig, 2.5, 0.05).unwrap()))
    });
}

fn end_to_end(c: &mut Criterion) {
    let batches: Vec<u32> = (0..9).map(|i| 1 << i).collect();
    let lengths: Vec<f64> = (1..=14).map(|i| f64::from(i) * 2.5).collect();
    let profile = SaturatingModel::with_knee(35_000.0, 16, 2.5)
        .profile("speech", "1g.5gb".parse().unwrap(), &batches, &lengths)
        .unwrap();
    let policy = build_batching_policy(&profile, &"1g.5gb(7x)".parse().unwrap(), 2.5, 0.05)
        .unwrap()
        .policy;
    let config = SimConfig {
        traffic: TrafficSpec {
            rate_lambda: 400.0,
            duration: SimTime::from_secs_f64(10.0),
            seed: 1,
            input_kind: InputKind::VariableAudio {
                distribution: LengthDistribution::uniform(1.0, 30.0).unwrap(),
            },
        },
        preproc: PreprocSpec::Dpu(DpuSpec::single(CuSpec::vision(200.0, 100.0, 50.0, 50.0), 4)),
        profile: Arc::new(profile),
        policy,
        merge_order: MergeOrder::ShorterFirst,
        active_vgpus: 7,
        warmup_fraction: 0.1,
        price: None,
        record_events: false,
    };
    c.bench_function("simulate_4k_requests", |b| {
        b.iter(|| black_box(simulate(config.clone()).unwrap().report.qps))
    });
}

criterion_group!(
    benches,
    engine_throughput,
    batcher_replay,
    knee_detection,
    end_to_end
);
criterion_main!(benches);
