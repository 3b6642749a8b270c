//! Scenario files: TOML configuration, validation, single runs, sweeps and tuning.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::MergeOrder;
use crate::engine::write_event_trace;
use crate::metrics::{write_trace_csv, PriceModel, SimReport};
use crate::preproc::{CpuPoolSpec, DpuSpec};
use crate::sim::{simulate, write_dispatch_csv, PreprocSpec, SimConfig, SimError, SimOutput};
use crate::time::{SimDuration, SimTime};
use crate::tuning::{
    build_batching_policy, BatchingPolicy, MigConfig, ModelProfile, Tuning, TuningError, VgpuShape,
    DEFAULT_BUCKET_WIDTH_S, DEFAULT_KNEE_DELTA,
};
use crate::workload::{load_length_histogram, InputKind, TrafficSpec, WorkloadError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn invalid(path: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    FixedImage,
    ConstantAudio { length_s: f64 },
    VariableAudio { histogram: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    pub rate_qps: f64,
    pub input: InputConfig,
}

fn default_vgpus() -> u32 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigSection {
    pub shape: VgpuShape,
    #[serde(default = "default_vgpus")]
    pub vgpu_count: u32,
    /// Servers actually activated; defaults to `vgpu_count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_vgpus: Option<u32>,
}

impl MigSection {
    pub fn mig(&self) -> MigConfig {
        MigConfig {
            shape: self.shape,
            vgpu_count: self.vgpu_count,
        }
    }

    pub fn active(&self) -> u32 {
        self.active_vgpus.unwrap_or(self.vgpu_count)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu: Option<CpuPoolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpu: Option<DpuSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Derive the policy from the profile.
    #[default]
    Auto,
    Explicit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchingMode {
    /// One queue per length bucket, each with its own cap.
    #[default]
    Dynamic,
    /// A single length-oblivious queue capped at the smallest bucket cap.
    Static,
}

fn default_delta() -> f64 {
    DEFAULT_KNEE_DELTA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub mode: PolicyMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket_width_s: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub batching: BatchingMode,
    #[serde(default)]
    pub merge_order: MergeOrder,
    /// Explicit mode: cap per bucket.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_max: Option<Vec<u32>>,
    /// Explicit mode: required. Auto mode: overrides the derived value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_queue_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_knee_us: Option<u64>,
    /// Replaces every bucket cap after tuning (batch-size sweeps).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform_batch_max: Option<u32>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Auto,
            bucket_width_s: None,
            delta: DEFAULT_KNEE_DELTA,
            batching: BatchingMode::Dynamic,
            merge_order: MergeOrder::ShorterFirst,
            batch_max: None,
            time_queue_us: None,
            tail_knee_us: None,
            uniform_batch_max: None,
        }
    }
}

fn default_warmup() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Per-request trace CSV.
    #[serde(default)]
    pub trace: bool,
    /// Per-dispatch trace CSV.
    #[serde(default)]
    pub dispatches: bool,
    /// Processed-event dump.
    #[serde(default)]
    pub events: bool,
}

impl OutputConfig {
    fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub traffic: TrafficConfig,
    pub mig: MigSection,
    pub preproc: PreprocConfig,
    pub profile: ProfileConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub sim: SimSection,
    #[serde(default, skip_serializing_if = "OutputConfig::is_default")]
    pub outputs: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<PriceModel>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Checks every field that does not need file access.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let t = &self.traffic;
        if !(t.rate_qps.is_finite() && t.rate_qps > 0.0) {
            return Err(invalid("traffic.rate_qps", "must be positive"));
        }
        if let InputConfig::ConstantAudio { length_s } = t.input {
            if !(length_s.is_finite() && length_s > 0.0) {
                return Err(invalid("traffic.input.length_s", "must be positive"));
            }
        }
        self.mig
            .mig()
            .validate()
            .map_err(|e| invalid("mig", e.to_string()))?;
        let active = self.mig.active();
        if active == 0 || active > self.mig.vgpu_count {
            return Err(invalid(
                "mig.active_vgpus",
                format!("must be in 1..={}", self.mig.vgpu_count),
            ));
        }
        match (&self.preproc.cpu, &self.preproc.dpu) {
            (Some(cpu), None) => cpu
                .validate()
                .map_err(|e| invalid("preproc.cpu", e.to_string()))?,
            (None, Some(dpu)) => dpu
                .validate()
                .map_err(|e| invalid("preproc.dpu", e.to_string()))?,
            _ => {
                return Err(invalid(
                    "preproc",
                    "exactly one of `preproc.cpu` or `preproc.dpu` must be set",
                ))
            }
        }
        let p = &self.policy;
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return Err(invalid("policy.delta", "must lie in (0, 1)"));
        }
        if let Some(w) = p.bucket_width_s {
            if !(w > 0.0) {
                return Err(invalid("policy.bucket_width_s", "must be positive"));
            }
        }
        if p.time_queue_us == Some(0) {
            return Err(invalid("policy.time_queue_us", "must be positive"));
        }
        if p.uniform_batch_max == Some(0) {
            return Err(invalid("policy.uniform_batch_max", "must be >= 1"));
        }
        if p.mode == PolicyMode::Explicit {
            if p.batch_max.is_none() {
                return Err(invalid("policy.batch_max", "required in explicit mode"));
            }
            if p.time_queue_us.is_none() {
                return Err(invalid("policy.time_queue_us", "required in explicit mode"));
            }
            self.explicit_policy()?
                .validate()
                .map_err(|m| invalid("policy", m))?;
        }
        let s = &self.sim;
        if !(s.duration_s.is_finite() && s.duration_s > 0.0) {
            return Err(invalid("sim.duration_s", "must be positive"));
        }
        if !(0.0..1.0).contains(&s.warmup_fraction) {
            return Err(invalid("sim.warmup_fraction", "must lie in [0, 1)"));
        }
        if let Some(c) = &self.cost {
            c.validate().map_err(|e| invalid("cost", e.to_string()))?;
        }
        Ok(())
    }

    fn explicit_policy(&self) -> Result<BatchingPolicy, ScenarioError> {
        let p = &self.policy;
        let batch_max = p
            .batch_max
            .clone()
            .ok_or_else(|| invalid("policy.batch_max", "required in explicit mode"))?;
        let tq = p
            .time_queue_us
            .ok_or_else(|| invalid("policy.time_queue_us", "required in explicit mode"))?;
        Ok(BatchingPolicy {
            bucket_width_s: p.bucket_width_s.unwrap_or(f64::INFINITY),
            batch_max,
            time_queue: SimDuration(tq),
            tail_knee: SimDuration(p.tail_knee_us.unwrap_or(tq)),
        })
    }
}

/// A scenario together with the directory its relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub base_dir: PathBuf,
}

/// A scenario with its files loaded and policy derived.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub sim: SimConfig,
    pub tuning: Option<Tuning>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config = ScenarioConfig::from_toml(&text)?;
        config.validate()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::new(config, base_dir))
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_profile(&self) -> Result<ModelProfile, ScenarioError> {
        let cfg = &self.config.profile;
        let path = self.path(&cfg.path);
        if !path.exists() {
            return Err(invalid(
                "profile.path",
                format!("{} does not exist", path.display()),
            ));
        }
        let name = cfg.model_name.clone().unwrap_or_else(|| {
            path.file_stem()
                .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
        });
        Ok(ModelProfile::load_csv(&path, name, self.config.mig.shape)?)
    }

    /// Loads referenced files, derives the policy and builds a [`SimConfig`].
    pub fn resolve(&self) -> Result<Resolved, ScenarioError> {
        self.resolve_with(Arc::new(self.load_profile()?))
    }

    pub fn resolve_with(&self, profile: Arc<ModelProfile>) -> Result<Resolved, ScenarioError> {
        let cfg = &self.config;
        cfg.validate()?;
        let input_kind = match &cfg.traffic.input {
            InputConfig::FixedImage => InputKind::FixedImage,
            InputConfig::ConstantAudio { length_s } => InputKind::ConstantAudio {
                length_s: *length_s,
            },
            InputConfig::VariableAudio { histogram } => {
                let path = self.path(histogram);
                if !path.exists() {
                    return Err(invalid(
                        "traffic.input.histogram",
                        format!("{} does not exist", path.display()),
                    ));
                }
                InputKind::VariableAudio {
                    distribution: load_length_histogram(&path)?,
                }
            }
        };
        let (mut policy, tuning) = match cfg.policy.mode {
            PolicyMode::Explicit => (cfg.explicit_policy()?, None),
            PolicyMode::Auto => {
                let width = cfg.policy.bucket_width_s.unwrap_or(DEFAULT_BUCKET_WIDTH_S);
                let tuning =
                    build_batching_policy(&profile, &cfg.mig.mig(), width, cfg.policy.delta)?;
                let mut policy = tuning.policy.clone();
                if let Some(tq) = cfg.policy.time_queue_us {
                    policy.time_queue = SimDuration(tq);
                }
                (policy, Some(tuning))
            }
        };
        if let Some(b) = cfg.policy.uniform_batch_max {
            policy.batch_max.iter_mut().for_each(|m| *m = b);
        }
        if cfg.policy.batching == BatchingMode::Static {
            policy = policy.collapsed();
        }
        policy.validate().map_err(|m| invalid("policy", m))?;
        let preproc = match (&cfg.preproc.cpu, &cfg.preproc.dpu) {
            (Some(c), _) => PreprocSpec::Cpu(c.clone()),
            (_, Some(d)) => PreprocSpec::Dpu(d.clone()),
            _ => unreachable!("validated"),
        };
        let sim = SimConfig {
            traffic: TrafficSpec {
                rate_lambda: cfg.traffic.rate_qps,
                duration: SimTime::from_secs_f64(cfg.sim.duration_s),
                seed: cfg.sim.seed,
                input_kind,
            },
            preproc,
            profile,
            policy,
            merge_order: cfg.policy.merge_order,
            active_vgpus: cfg.mig.active(),
            warmup_fraction: cfg.sim.warmup_fraction,
            price: cfg.cost,
            record_events: cfg.outputs.events,
        };
        Ok(Resolved { sim, tuning })
    }
}

/// Output of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output: SimOutput,
    pub tuning: Option<Tuning>,
    pub policy: BatchingPolicy,
}

pub fn run(scenario: &Scenario) -> Result<RunOutcome, ScenarioError> {
    let resolved = scenario.resolve()?;
    if let Some(t) = &resolved.tuning {
        log::info!("derived policy:\n{t}");
    }
    let policy = resolved.sim.policy.clone();
    let output = simulate(resolved.sim)?;
    Ok(RunOutcome {
        output,
        tuning: resolved.tuning,
        policy,
    })
}

/// Writes `report.json`, `policy.json` and any enabled traces into `dir`.
pub fn write_run_artifacts(
    outcome: &RunOutcome,
    outputs: &OutputConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>, ScenarioError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), ScenarioError> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        written.push(path);
        Ok(())
    };
    put("report.json", outcome.output.report.to_json().into_bytes())?;
    put("policy.json", outcome.policy.to_json().into_bytes())?;
    if outputs.trace {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &outcome.output.traces).expect("in-memory write");
        put("trace.csv", buf)?;
    }
    if outputs.dispatches {
        let mut buf = Vec::new();
        write_dispatch_csv(&mut buf, &outcome.output.dispatches).expect("in-memory write");
        put("dispatches.csv", buf)?;
    }
    if let Some(events) = &outcome.output.events {
        let mut buf = Vec::new();
        write_event_trace(&mut buf, events).expect("in-memory write");
        put("events.csv", buf)?;
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisName {
    RateQps,
    ActiveVgpus,
    BatchMax,
    CpuWorkers,
    Seed,
}

impl AxisName {
    pub fn as_str(self) -> &'static str {
        match self {
            AxisName::RateQps => "rate_qps",
            AxisName::ActiveVgpus => "active_vgpus",
            AxisName::BatchMax => "batch_max",
            AxisName::CpuWorkers => "cpu_workers",
            AxisName::Seed => "seed",
        }
    }

    fn apply(self, cfg: &mut ScenarioConfig, value: f64) -> Result<(), ScenarioError> {
        let whole = |v: f64| -> Result<u64, ScenarioError> {
            if v.fract() == 0.0 && v >= 0.0 {
                Ok(v as u64)
            } else {
                Err(invalid(
                    &format!("axes.{}", self.as_str()),
                    format!("{v} is not a whole number"),
                ))
            }
        };
        match self {
            AxisName::RateQps => cfg.traffic.rate_qps = value,
            AxisName::ActiveVgpus => cfg.mig.active_vgpus = Some(whole(value)? as u32),
            AxisName::BatchMax => cfg.policy.uniform_batch_max = Some(whole(value)? as u32),
            AxisName::CpuWorkers => match cfg.preproc.cpu.as_mut() {
                Some(cpu) => cpu.workers = whole(value)? as u32,
                None => {
                    return Err(invalid(
                        "axes.cpu_workers",
                        "base scenario has no CPU backend",
                    ))
                }
            },
            AxisName::Seed => cfg.sim.seed = whole(value)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub name: AxisName,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ScenarioConfig,
    pub axes: Vec<SweepAxis>,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.base.validate()?;
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err(invalid("axes", "one or two swept axes are required"));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.values.is_empty() {
                return Err(invalid(&format!("axes[{i}].values"), "must not be empty"));
            }
        }
        Ok(())
    }

    /// Grid points in axis order (first axis outermost).
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.values.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push(*v);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_values: Vec<f64>,
    pub report: SimReport,
}

#[derive(Debug)]
pub struct SweepResult {
    pub axes: Vec<AxisName>,
    pub rows: Vec<SweepRow>,
    /// First failing grid point and its error; rows stop before it.
    pub failure: Option<(Vec<f64>, ScenarioError)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for a in &self.axes {
            out.push_str(a.as_str());
            out.push(',');
        }
        out.push_str("qps,p50_us,p95_us,p99_us,vgpu_utilization,preproc_utilization\n");
        for row in &self.rows {
            for v in &row.axis_values {
                let _ = write!(out, "{v},");
            }
            let r = &row.report;
            let pre = r
                .utilization
                .iter()
                .find(|(k, _)| k.as_str() != "vgpu")
                .map_or(0.0, |(_, v)| *v);
            let lat = r.latency_us.map_or_else(
                || ",,".to_string(),
                |l| format!("{},{},{}", l.p50, l.p95, l.p99),
            );
            let _ = writeln!(
                out,
                "{:.6},{lat},{:.6},{:.6}",
                r.qps,
                r.utilization.get("vgpu").copied().unwrap_or(0.0),
                pre
            );
        }
        if let Some((point, err)) = &self.failure {
            let _ = writeln!(out, "# aborted at {point:?}: {err}");
        }
        out
    }
}

/// Runs one simulation per grid point on up to `parallel` threads.
pub fn sweep(
    spec: &SweepSpec,
    base_dir: &Path,
    parallel: usize,
) -> Result<SweepResult, ScenarioError> {
    spec.validate()?;
    let base = Scenario::new(spec.base.clone(), base_dir);
    let profile = Arc::new(base.load_profile()?);
    let points = spec.points();
    let run_point = |point: &Vec<f64>| -> Result<SimReport, ScenarioError> {
        let mut cfg = spec.base.clone();
        for (axis, v) in spec.axes.iter().zip(point) {
            axis.name.apply(&mut cfg, *v)?;
        }
        let scenario = Scenario::new(cfg, base_dir);
        let resolved = scenario.resolve_with(Arc::clone(&profile))?;
        Ok(simulate(resolved.sim)?.report)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| invalid("parallel", e.to_string()))?;
    let results: Vec<Result<SimReport, ScenarioError>> =
        pool.install(|| points.par_iter().map(run_point).collect());
    let mut rows = Vec::new();
    let mut failure = None;
    for (point, res) in points.into_iter().zip(results) {
        match res {
            Ok(report) => rows.push(SweepRow {
                axis_values: point,
                report,
            }),
            Err(e) => {
                failure = Some((point, e));
                break;
            }
        }
    }
    Ok(SweepResult {
        axes: spec.axes.iter().map(|a| a.name).collect(),
        rows,
        failure,
    })
}

/// Tunes a policy from a profile file.
pub fn tune(
    profile_path: &Path,
    mig: &MigConfig,
    bucket_width_s: f64,
    delta: f64,
) -> Result<Tuning, ScenarioError> {
    let name = profile_path
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let profile = ModelProfile::load_csv(profile_path, name, mig.shape)?;
    Ok(build_batching_policy(&profile, mig, bucket_width_s, delta)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[traffic]
rate_qps = 100.0
input = { kind = "fixed_image" }

[mig]
shape = "1g.5gb"

[preproc.cpu]
workers = 4
service = { base_us = 2000.0 }

[profile]
path = "p.csv"

[sim]
duration_s = 2.0
"#;

    #[test]
    fn defaults_applied() {
        let c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.mig.vgpu_count, 7);
        assert_eq!(c.policy.delta, 0.05);
        assert_eq!(c.sim.warmup_fraction, 0.1);
        assert_eq!(c.preproc.cpu.as_ref().unwrap().efficiency_cap, 1.0);
    }

    #[test]
    fn round_trip() {
        let c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        let again = ScenarioConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn two_backends_rejected() {
        let text = format!(
            "{MINIMAL}\n[preproc.dpu]\ngroups = [{{ count = 1, cu = {{ pipelined = true, units = [{{ name = \"decode\", latency = {{ base_us = 5.0 }} }}] }} }}]\n"
        );
        let c = ScenarioConfig::from_toml(&text).unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.starts_with("preproc:"), "{err}");
    }

    #[test]
    fn field_paths_in_errors() {
        let mut c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        c.traffic.rate_qps = -1.0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .starts_with("traffic.rate_qps"));
        let mut c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        c.policy.mode = PolicyMode::Explicit;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .starts_with("policy.batch_max"));
        let mut c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        c.mig.active_vgpus = Some(9);
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .starts_with("mig.active_vgpus"));
        assert!(ScenarioConfig::from_toml("[traffic]\nbogus = 1\n").is_err());
    }

    #[test]
    fn sweep_grid_order() {
        let spec = SweepSpec {
            base: ScenarioConfig::from_toml(MINIMAL).unwrap(),
            axes: vec![
                SweepAxis {
                    name: AxisName::ActiveVgpus,
                    values: vec![1.0, 2.0],
                },
                SweepAxis {
                    name: AxisName::RateQps,
                    values: vec![10.0, 20.0, 30.0],
                },
            ],
        };
        spec.validate().unwrap();
        let pts = spec.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec![1.0, 10.0]);
        assert_eq!(pts[3], vec![2.0, 10.0]);
    }
}
