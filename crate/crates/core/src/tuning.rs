//! Offline profiling and tuning: execution-latency surfaces, throughput
//! curves, knee detection and derivation of the batching policy.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::time::SimDuration;

/// Default relative marginal-gain threshold for knee detection.
pub const DEFAULT_KNEE_DELTA: f64 = 0.05;
/// Default audio bucket width in seconds.
pub const DEFAULT_BUCKET_WIDTH_S: f64 = 2.5;
/// GPCs available for MIG partitioning on an A100-class GPU.
pub const MAX_GPCS: u32 = 7;

#[derive(Debug, Error, PartialEq)]
pub enum TuningError {
    #[error("profile line {line}: {message}")]
    ProfileFormat { line: u64, message: String },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("profile I/O: {0}")]
    Io(String),
    #[error("batch size and input length must be positive (got B={batch}, L={length})")]
    NonPositiveQuery { batch: u32, length: f64 },
    #[error("batch sizes must be non-empty and strictly ascending")]
    BadBatchSizes,
    #[error("curve is empty")]
    EmptyCurve,
    #[error("curve has non-positive throughput at B={0}")]
    NonPositiveThroughput(u32),
    #[error("delta must lie in (0, 1), got {0}")]
    BadDelta(f64),
    #[error("batch size {0} is not on the curve")]
    KneeNotOnCurve(u32),
    #[error("tail latency at knee must be positive")]
    ZeroTailKnee,
    #[error("vGPU count must be at least 1")]
    ZeroVgpus,
    #[error("invalid MIG config: {0}")]
    InvalidMig(String),
    #[error("bucket width must be positive")]
    BadBucketWidth,
}

/// Per-vGPU slice shape, written `Mg.Ngb`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VgpuShape {
    pub gpcs: u32,
    pub dram_gb: u32,
}

impl fmt::Display for VgpuShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}g.{}gb", self.gpcs, self.dram_gb)
    }
}

impl FromStr for VgpuShape {
    type Err = TuningError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TuningError::InvalidMig(format!("expected `Mg.Ngb`, got `{s}`"));
        let (g, mem) = s.trim().split_once('.').ok_or_else(bad)?;
        let gpcs = g
            .strip_suffix('g')
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        let dram_gb = mem
            .strip_suffix("gb")
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        Ok(Self { gpcs, dram_gb })
    }
}

impl Serialize for VgpuShape {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VgpuShape {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Homogeneous MIG partitioning: `vgpu_count` slices of `shape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigConfig {
    pub shape: VgpuShape,
    pub vgpu_count: u32,
}

impl MigConfig {
    pub fn new(shape: VgpuShape, vgpu_count: u32) -> Result<Self, TuningError> {
        let cfg = Self { shape, vgpu_count };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TuningError> {
        if !(1..=7).contains(&self.vgpu_count) {
            return Err(TuningError::InvalidMig(format!(
                "vgpu_count must be in 1..=7, got {}",
                self.vgpu_count
            )));
        }
        if self.shape.gpcs == 0 || self.vgpu_count * self.shape.gpcs > MAX_GPCS {
            return Err(TuningError::InvalidMig(format!(
                "{} x {} exceeds {MAX_GPCS} GPCs",
                self.vgpu_count, self.shape
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MigConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}x)", self.shape, self.vgpu_count)
    }
}

impl FromStr for MigConfig {
    type Err = TuningError;

    /// Parses `Mg.Ngb(Vx)`, e.g. `1g.5gb(7x)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TuningError::InvalidMig(format!("expected `Mg.Ngb(Vx)`, got `{s}`"));
        let s = s.trim();
        let (shape, rest) = s.split_once('(').ok_or_else(bad)?;
        let count = rest
            .strip_suffix("x)")
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        MigConfig::new(shape.parse()?, count)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ProfileRow {
    length: f64,
    /// `(batch, latency_us)` sorted by batch.
    points: Vec<(u32, f64)>,
}

impl ProfileRow {
    fn latency_at(&self, batch: f64) -> (f64, bool) {
        let pts = &self.points;
        let first = pts[0];
        let last = pts[pts.len() - 1];
        if batch <= f64::from(first.0) {
            return (first.1, batch < f64::from(first.0));
        }
        if batch >= f64::from(last.0) {
            return (last.1, batch > f64::from(last.0));
        }
        let hi = pts.partition_point(|p| f64::from(p.0) < batch);
        let (b1, l1) = pts[hi];
        if f64::from(b1) == batch {
            return (l1, false);
        }
        let (b0, l0) = pts[hi - 1];
        let t = (batch - f64::from(b0)) / f64::from(b1 - b0);
        (l0 + t * (l1 - l0), false)
    }
}

/// Result of an execution-latency lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookup {
    pub latency: SimDuration,
    /// The query fell outside the profiled grid and was clamped to its edge.
    pub clamped: bool,
}

/// Execution-latency surface `(batch size, input length) -> latency` for one
/// model on one vGPU shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelProfile {
    pub model_name: String,
    pub vgpu_shape: VgpuShape,
    rows: Vec<ProfileRow>,
}

#[derive(Debug, Deserialize)]
struct ProfileCsvRow {
    batch: u32,
    length_s: f64,
    latency_us: f64,
}

impl ModelProfile {
    /// Builds a profile from `(batch, length_s, latency_us)` points; the
    /// grid may be sparse but every length row needs at least one point.
    pub fn from_points(
        model_name: impl Into<String>,
        vgpu_shape: VgpuShape,
        points: impl IntoIterator<Item = (u32, f64, f64)>,
    ) -> Result<Self, TuningError> {
        let mut rows: Vec<ProfileRow> = Vec::new();
        for (batch, length, latency) in points {
            if batch == 0 || !(length.is_finite() && length > 0.0) {
                return Err(TuningError::InvalidProfile(format!(
                    "non-positive grid coordinate (B={batch}, L={length})"
                )));
            }
            if !(latency.is_finite() && latency > 0.0) {
                return Err(TuningError::InvalidProfile(format!(
                    "latency at (B={batch}, L={length}) must be positive"
                )));
            }
            match rows.iter_mut().find(|r| r.length == length) {
                Some(row) => row.points.push((batch, latency)),
                None => rows.push(ProfileRow {
                    length,
                    points: vec![(batch, latency)],
                }),
            }
        }
        if rows.is_empty() {
            return Err(TuningError::InvalidProfile("profile has no points".into()));
        }
        rows.sort_by(|a, b| a.length.total_cmp(&b.length));
        for row in &mut rows {
            row.points.sort_by_key(|p| p.0);
            if row.points.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(TuningError::InvalidProfile(format!(
                    "duplicate batch size at L={}",
                    row.length
                )));
            }
            if row.points.windows(2).any(|w| w[1].1 < w[0].1) {
                return Err(TuningError::InvalidProfile(format!(
                    "latency decreases with batch size at L={}",
                    row.length
                )));
            }
        }
        for pair in rows.windows(2) {
            for &(b, lat) in &pair[0].points {
                if let Some(&(_, next)) = pair[1].points.iter().find(|p| p.0 == b) {
                    if next < lat {
                        return Err(TuningError::InvalidProfile(format!(
                            "latency decreases with length at B={b} between L={} and L={}",
                            pair[0].length, pair[1].length
                        )));
                    }
                }
            }
        }
        Ok(Self {
            model_name: model_name.into(),
            vgpu_shape,
            rows,
        })
    }

    /// Builds a profile by evaluating `latency_us(batch, length)` on a dense grid.
    pub fn from_fn(
        model_name: impl Into<String>,
        vgpu_shape: VgpuShape,
        batches: &[u32],
        lengths: &[f64],
        latency_us: impl Fn(u32, f64) -> f64,
    ) -> Result<Self, TuningError> {
        let points = lengths
            .iter()
            .flat_map(|&l| batches.iter().map(move |&b| (b, l)))
            .map(|(b, l)| (b, l, latency_us(b, l)))
            .collect::<Vec<_>>();
        Self::from_points(model_name, vgpu_shape, points)
    }

    /// Parses a `batch,length_s,latency_us` CSV.
    pub fn parse_csv(
        text: &str,
        model_name: impl Into<String>,
        vgpu_shape: VgpuShape,
    ) -> Result<Self, TuningError> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| TuningError::ProfileFormat {
            line: 1,
            message: e.to_string(),
        })?;
        if headers != vec!["batch", "length_s", "latency_us"] {
            return Err(TuningError::ProfileFormat {
                line: headers.position().map_or(1, |p| p.line()),
                message: format!("expected header `batch,length_s,latency_us`, got {headers:?}"),
            });
        }
        let mut points = Vec::new();
        for row in reader.deserialize::<ProfileCsvRow>() {
            let row = row.map_err(|e| TuningError::ProfileFormat {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            points.push((row.batch, row.length_s, row.latency_us));
        }
        Self::from_points(model_name, vgpu_shape, points)
    }

    pub fn load_csv(
        path: impl AsRef<Path>,
        model_name: impl Into<String>,
        vgpu_shape: VgpuShape,
    ) -> Result<Self, TuningError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| TuningError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_csv(&text, model_name, vgpu_shape)
    }

    /// Writes the grid back out as `batch,length_s,latency_us`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,length_s,latency_us\n");
        for row in &self.rows {
            for (b, lat) in &row.points {
                out.push_str(&format!("{b},{},{lat}\n", row.length));
            }
        }
        out
    }

    /// Profiled input lengths, ascending.
    pub fn lengths(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.length).collect()
    }

    /// Profiled batch sizes across all rows, ascending and deduplicated.
    pub fn batch_sizes(&self) -> Vec<u32> {
        let mut all: Vec<u32> = self
            .rows
            .iter()
            .flat_map(|r| r.points.iter().map(|p| p.0))
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// A profile with a single length column describes a fixed-size (vision) input.
    pub fn is_fixed_length(&self) -> bool {
        self.rows.len() == 1
    }

    /// Powers of two from 1 up to the largest profiled batch size.
    pub fn default_batch_sizes(&self) -> Vec<u32> {
        let max = self.batch_sizes().last().copied().unwrap_or(1);
        std::iter::successors(Some(1u32), |b| b.checked_mul(2))
            .take_while(|b| *b <= max)
            .collect()
    }

    /// Bilinear lookup with clamping outside the grid.
    pub fn lookup(&self, batch: u32, length: f64) -> Result<Lookup, TuningError> {
        if batch == 0 || !(length > 0.0) {
            return Err(TuningError::NonPositiveQuery { batch, length });
        }
        let b = f64::from(batch);
        let rows = &self.rows;
        let first = &rows[0];
        let last = &rows[rows.len() - 1];
        let (us, clamped) = if length <= first.length {
            let (v, c) = first.latency_at(b);
            (v, c || length < first.length)
        } else if length >= last.length {
            let (v, c) = last.latency_at(b);
            (v, c || length > last.length)
        } else {
            let hi = rows.partition_point(|r| r.length < length);
            let upper = &rows[hi];
            if upper.length == length {
                upper.latency_at(b)
            } else {
                let lower = &rows[hi - 1];
                let (v0, c0) = lower.latency_at(b);
                let (v1, c1) = upper.latency_at(b);
                let t = (length - lower.length) / (upper.length - lower.length);
                (v0 + t * (v1 - v0), c0 || c1)
            }
        };
        Ok(Lookup {
            latency: SimDuration((us.round().max(1.0)) as u64),
            clamped,
        })
    }

    /// Execution latency of a batch of `batch` inputs whose longest input is `length` seconds.
    pub fn exec_latency(&self, batch: u32, length: f64) -> Result<SimDuration, TuningError> {
        let lookup = self.lookup(batch, length)?;
        if lookup.clamped {
            log::warn!(
                "{}: (B={batch}, L={length}) outside profiled grid, clamped",
                self.model_name
            );
        }
        Ok(lookup.latency)
    }
}

/// Closed-form latency surface for synthetic profiles:
/// `max(floor_us, work_us · B · L) + per_item_us · B`.
///
/// Below `B·L = floor_us / work_us` the GPU is under-occupied and latency is
/// flat, beyond it throughput stops growing, so the knee sits at the first
/// profiled batch size reaching that product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturatingModel {
    pub floor_us: f64,
    pub work_us: f64,
    #[serde(default)]
    pub per_item_us: f64,
}

impl SaturatingModel {
    /// Model whose knee at length `length_s` is `knee` with latency `floor_us` there.
    pub fn with_knee(floor_us: f64, knee: u32, length_s: f64) -> Self {
        Self {
            floor_us,
            work_us: floor_us / (f64::from(knee) * length_s),
            per_item_us: 0.0,
        }
    }

    pub fn latency_us(&self, batch: u32, length_s: f64) -> f64 {
        let b = f64::from(batch);
        (self.work_us * b * length_s).max(self.floor_us) + self.per_item_us * b
    }

    pub fn profile(
        &self,
        model_name: impl Into<String>,
        vgpu_shape: VgpuShape,
        batches: &[u32],
        lengths: &[f64],
    ) -> Result<ModelProfile, TuningError> {
        ModelProfile::from_fn(model_name, vgpu_shape, batches, lengths, |b, l| {
            self.latency_us(b, l)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub batch: u32,
    /// Per-vGPU throughput in queries per second.
    pub throughput_qps: f64,
    pub p95: SimDuration,
}

/// Throughput and tail latency versus batch size at one input length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub length_s: f64,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    pub fn from_points(length_s: f64, points: Vec<CurvePoint>) -> Result<Self, TuningError> {
        if points.is_empty() {
            return Err(TuningError::EmptyCurve);
        }
        if points.windows(2).any(|w| w[1].batch <= w[0].batch) {
            return Err(TuningError::BadBatchSizes);
        }
        Ok(Self { length_s, points })
    }

    pub fn point(&self, batch: u32) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.batch == batch)
    }
}

/// Offline sweep under saturated feed: the p95 latency of a size-B batch is
/// its execution latency, and throughput is `B / latency` per vGPU.
pub fn sweep_curve(
    profile: &ModelProfile,
    length: f64,
    batch_sizes: &[u32],
) -> Result<Curve, TuningError> {
    if batch_sizes.is_empty() || batch_sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TuningError::BadBatchSizes);
    }
    let points = batch_sizes
        .iter()
        .map(|&b| {
            let lat = profile.exec_latency(b, length)?;
            Ok(CurvePoint {
                batch: b,
                throughput_qps: f64::from(b) / lat.as_secs_f64(),
                p95: lat,
            })
        })
        .collect::<Result<Vec<_>, TuningError>>()?;
    Curve::from_points(length, points)
}

/// Smallest profiled batch size past which the next step gains at most
/// `delta` relative throughput; the largest batch size if throughput never
/// saturates.
pub fn find_batch_knee(curve: &Curve, delta: f64) -> Result<u32, TuningError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(TuningError::BadDelta(delta));
    }
    let pts = &curve.points;
    if pts.is_empty() {
        return Err(TuningError::EmptyCurve);
    }
    if let Some(p) = pts.iter().find(|p| !(p.throughput_qps > 0.0)) {
        return Err(TuningError::NonPositiveThroughput(p.batch));
    }
    Ok(pts
        .windows(2)
        .find(|w| w[1].throughput_qps <= (1.0 + delta) * w[0].throughput_qps)
        .map_or(pts[pts.len() - 1].batch, |w| w[0].batch))
}

pub fn tail_at_knee(curve: &Curve, knee: u32) -> Result<SimDuration, TuningError> {
    curve
        .point(knee)
        .map(|p| p.p95)
        .ok_or(TuningError::KneeNotOnCurve(knee))
}

/// `Time_queue = Tail_knee / V`, rounded to the nearest microsecond.
pub fn derive_time_queue(tail_knee: SimDuration, vgpus: u32) -> Result<SimDuration, TuningError> {
    if tail_knee.is_zero() {
        return Err(TuningError::ZeroTailKnee);
    }
    if vgpus == 0 {
        return Err(TuningError::ZeroVgpus);
    }
    let v = u64::from(vgpus);
    Ok(SimDuration((tail_knee.as_micros() + v / 2) / v))
}

mod width_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(w: &f64, s: S) -> Result<S::Ok, S::Error> {
        if w.is_finite() {
            s.serialize_f64(*w)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Batching hyperparameters: one `Batch_max` per length bucket plus a global `Time_queue`.
///
/// An infinite bucket width (serialized as `null`) means a single bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchingPolicy {
    #[serde(with = "width_serde")]
    pub bucket_width_s: f64,
    pub batch_max: Vec<u32>,
    #[serde(rename = "time_queue_us")]
    pub time_queue: SimDuration,
    #[serde(rename = "tail_knee_us")]
    pub tail_knee: SimDuration,
}

impl BatchingPolicy {
    pub fn single_bucket(batch_max: u32, time_queue: SimDuration, tail_knee: SimDuration) -> Self {
        Self {
            bucket_width_s: f64::INFINITY,
            batch_max: vec![batch_max],
            time_queue,
            tail_knee,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_max.is_empty() {
            return Err("batch_max must list at least one bucket".into());
        }
        if self.batch_max.contains(&0) {
            return Err("batch_max entries must be >= 1".into());
        }
        if self.batch_max.windows(2).any(|w| w[1] > w[0]) {
            return Err("batch_max must be non-increasing with bucket index".into());
        }
        if !(self.bucket_width_s > 0.0) {
            return Err("bucket_width_s must be positive".into());
        }
        if self.time_queue.is_zero() {
            return Err("time_queue_us must be positive".into());
        }
        Ok(())
    }

    /// Length-oblivious variant: one queue capped by the smallest bucket cap,
    /// which is safe for any input length.
    pub fn collapsed(&self) -> Self {
        Self {
            bucket_width_s: f64::INFINITY,
            batch_max: vec![self.batch_max.iter().copied().min().unwrap_or(1)],
            time_queue: self.time_queue,
            tail_knee: self.tail_knee,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketTuning {
    pub bucket: usize,
    pub anchor_length_s: f64,
    pub knee: u32,
    pub batch_max: u32,
    pub tail_at_knee: SimDuration,
}

/// A derived policy plus the per-bucket intermediate values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuning {
    pub policy: BatchingPolicy,
    pub buckets: Vec<BucketTuning>,
}

impl fmt::Display for Tuning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.buckets {
            writeln!(
                f,
                "bucket {:>2} (L={:>5.2}s): knee={:>4} batch_max={:>4} tail@knee={}",
                b.bucket, b.anchor_length_s, b.knee, b.batch_max, b.tail_at_knee
            )?;
        }
        write!(
            f,
            "tail_knee={} time_queue={}",
            self.policy.tail_knee, self.policy.time_queue
        )
    }
}

/// Derives a policy: knee per bucket (anchored at the bucket's upper edge),
/// `Tail_knee` as the median tail across buckets, `Time_queue = Tail_knee / V`.
pub fn build_batching_policy(
    profile: &ModelProfile,
    mig: &MigConfig,
    bucket_width_s: f64,
    delta: f64,
) -> Result<Tuning, TuningError> {
    if !(bucket_width_s > 0.0) {
        return Err(TuningError::BadBucketWidth);
    }
    mig.validate()?;
    let batch_sizes = profile.default_batch_sizes();
    let lengths = profile.lengths();
    let max_len = lengths[lengths.len() - 1];
    let (width, anchors): (f64, Vec<f64>) = if profile.is_fixed_length() {
        (f64::INFINITY, vec![max_len])
    } else {
        let n = ((max_len / bucket_width_s) - 1e-9).ceil().max(1.0) as usize;
        let anchors = (0..n)
            .map(|i| ((i + 1) as f64 * bucket_width_s).min(max_len))
            .collect();
        (bucket_width_s, anchors)
    };
    if anchors[0] < lengths[0] {
        log::warn!(
            "{}: bucket anchor {:.2}s below shortest profiled length {:.2}s",
            profile.model_name,
            anchors[0],
            lengths[0]
        );
    }

    let mut buckets = Vec::with_capacity(anchors.len());
    let mut cap = u32::MAX;
    for (i, &anchor) in anchors.iter().enumerate() {
        let curve = sweep_curve(profile, anchor, &batch_sizes)?;
        let knee = find_batch_knee(&curve, delta)?;
        let batch_max = knee.min(cap);
        if batch_max < knee {
            log::debug!(
                "bucket {i}: knee {knee} capped to {batch_max} to keep caps non-increasing"
            );
        }
        cap = batch_max;
        let tail = match curve.point(batch_max) {
            Some(p) => p.p95,
            None => profile.exec_latency(batch_max, anchor)?,
        };
        buckets.push(BucketTuning {
            bucket: i,
            anchor_length_s: anchor,
            knee,
            batch_max,
            tail_at_knee: tail,
        });
    }

    let mut tails: Vec<u64> = buckets.iter().map(|b| b.tail_at_knee.as_micros()).collect();
    tails.sort_unstable();
    let mid = tails.len() / 2;
    let median = if tails.len() % 2 == 1 {
        tails[mid]
    } else {
        (tails[mid - 1] + tails[mid]).div_ceil(2)
    };
    let tail_knee = SimDuration(median);
    let time_queue = derive_time_queue(tail_knee, mig.vgpu_count)?;
    Ok(Tuning {
        policy: BatchingPolicy {
            bucket_width_s: width,
            batch_max: buckets.iter().map(|b| b.batch_max).collect(),
            time_queue,
            tail_knee,
        },
        buckets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> VgpuShape {
        "1g.5gb".parse().unwrap()
    }

    fn pt(batch: u32, thr: f64) -> CurvePoint {
        CurvePoint {
            batch,
            throughput_qps: thr,
            p95: SimDuration(1),
        }
    }

    #[test]
    fn mig_notation() {
        let m: MigConfig = "1g.5gb(7x)".parse().unwrap();
        assert_eq!(m.vgpu_count, 7);
        assert_eq!(
            m.shape,
            VgpuShape {
                gpcs: 1,
                dram_gb: 5
            }
        );
        assert_eq!(m.to_string(), "1g.5gb(7x)");
        assert!("7g.40gb(1x)".parse::<MigConfig>().is_ok());
        assert!("2g.10gb(7x)".parse::<MigConfig>().is_err());
        assert!("1g.5gb(8x)".parse::<MigConfig>().is_err());
        assert!("1g5gb(7x)".parse::<MigConfig>().is_err());
    }

    #[test]
    fn exact_and_interpolated_lookup() {
        let p = ModelProfile::from_points(
            "m",
            shape(),
            [
                (8, 2.5, 10_000.0),
                (16, 2.5, 35_000.0),
                (8, 5.0, 20_000.0),
                (16, 5.0, 40_000.0),
            ],
        )
        .unwrap();
        assert_eq!(
            p.exec_latency(16, 2.5).unwrap(),
            SimDuration::from_millis(35)
        );
        assert_eq!(
            p.exec_latency(8, 3.75).unwrap(),
            SimDuration::from_millis(15)
        );
        assert_eq!(p.exec_latency(12, 2.5).unwrap(), SimDuration(22_500));
        let l = p.lookup(32, 2.5).unwrap();
        assert!(l.clamped);
        assert_eq!(l.latency, SimDuration::from_millis(35));
        assert!(p.exec_latency(0, 2.5).is_err());
        assert!(p.exec_latency(1, 0.0).is_err());
    }

    #[test]
    fn profile_rejects_non_monotone() {
        assert!(ModelProfile::from_points("m", shape(), [(1, 1.0, 5.0), (2, 1.0, 4.0)]).is_err());
        assert!(ModelProfile::from_points("m", shape(), [(1, 1.0, 5.0), (1, 2.0, 4.0)]).is_err());
        assert!(ModelProfile::from_points("m", shape(), [(1, 1.0, 0.0)]).is_err());
        assert!(ModelProfile::from_points("m", shape(), [(1, 1.0, 1.0), (1, 1.0, 2.0)]).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let text = "batch,length_s,latency_us\n1,2.5,1000\n2,2.5,1500\n";
        let p = ModelProfile::parse_csv(text, "m", shape()).unwrap();
        assert_eq!(
            ModelProfile::parse_csv(&p.to_csv(), "m", shape()).unwrap(),
            p
        );
        let err = ModelProfile::parse_csv("batch,length_s,latency_us\n1,2.5,x\n", "m", shape());
        assert!(matches!(
            err,
            Err(TuningError::ProfileFormat { line: 2, .. })
        ));
        assert!(ModelProfile::parse_csv("b,l,t\n1,1,1\n", "m", shape()).is_err());
    }

    #[test]
    fn knee_rules() {
        let mobilenet = Curve::from_points(
            1.0,
            vec![
                pt(1, 1.0),
                pt(2, 2.0),
                pt(4, 4.0),
                pt(8, 8.0),
                pt(16, 16.0),
                pt(32, 16.16),
                pt(64, 16.32),
            ],
        )
        .unwrap();
        assert_eq!(find_batch_knee(&mobilenet, 0.05).unwrap(), 16);
        let linear = Curve::from_points(1.0, vec![pt(1, 1.0), pt(2, 2.0), pt(4, 4.0)]).unwrap();
        assert_eq!(find_batch_knee(&linear, 0.05).unwrap(), 4);
        let flat = Curve::from_points(1.0, vec![pt(1, 3.0), pt(2, 3.0), pt(4, 3.0)]).unwrap();
        assert_eq!(find_batch_knee(&flat, 0.05).unwrap(), 1);
        let single = Curve::from_points(1.0, vec![pt(4, 3.0)]).unwrap();
        assert_eq!(find_batch_knee(&single, 0.05).unwrap(), 4);
        assert!(find_batch_knee(&linear, 0.0).is_err());
        assert!(find_batch_knee(&linear, 1.0).is_err());
        let zero = Curve::from_points(1.0, vec![pt(1, 0.0), pt(2, 1.0)]).unwrap();
        assert_eq!(
            find_batch_knee(&zero, 0.05),
            Err(TuningError::NonPositiveThroughput(1))
        );
    }

    #[test]
    fn tail_lookup() {
        let c = Curve::from_points(
            1.0,
            vec![CurvePoint {
                batch: 16,
                throughput_qps: 1.0,
                p95: SimDuration::from_millis(35),
            }],
        )
        .unwrap();
        assert_eq!(tail_at_knee(&c, 16).unwrap(), SimDuration::from_millis(35));
        assert_eq!(tail_at_knee(&c, 8), Err(TuningError::KneeNotOnCurve(8)));
    }

    #[test]
    fn time_queue_formula() {
        let t = SimDuration::from_millis(35);
        assert_eq!(
            derive_time_queue(t, 7).unwrap(),
            SimDuration::from_millis(5)
        );
        assert_eq!(derive_time_queue(t, 1).unwrap(), t);
        assert_eq!(
            derive_time_queue(SimDuration::ZERO, 7),
            Err(TuningError::ZeroTailKnee)
        );
        assert_eq!(derive_time_queue(t, 0), Err(TuningError::ZeroVgpus));
    }

    #[test]
    fn sweep_curve_shape() {
        // Constant 10 ms up to B=16, then proportional to B.
        let batches = [1, 2, 4, 8, 16, 32, 64];
        let p = ModelProfile::from_fn("m", shape(), &batches, &[1.0], |b, _| {
            10_000.0 * f64::from(b.max(16)) / 16.0
        })
        .unwrap();
        let c = sweep_curve(&p, 1.0, &batches).unwrap();
        let thr: Vec<f64> = c.points.iter().map(|p| p.throughput_qps).collect();
        assert!(thr.windows(2).take(4).all(|w| w[1] > w[0]));
        assert!(thr.windows(2).skip(4).all(|w| (w[1] - w[0]).abs() < 1e-9));
        assert_eq!(find_batch_knee(&c, 0.05).unwrap(), 16);
        assert_eq!(sweep_curve(&p, 1.0, &[4]).unwrap().points.len(), 1);
        assert!(sweep_curve(&p, 1.0, &[]).is_err());
        assert!(sweep_curve(&p, 1.0, &[4, 2]).is_err());
    }

    #[test]
    fn policy_json_schema() {
        let pol = BatchingPolicy::single_bucket(16, SimDuration(5_000), SimDuration(35_000));
        let json: serde_json::Value = serde_json::from_str(&pol.to_json()).unwrap();
        assert_eq!(json["bucket_width_s"], serde_json::Value::Null);
        assert_eq!(json["batch_max"], serde_json::json!([16]));
        assert_eq!(json["time_queue_us"], 5_000);
        assert_eq!(json["tail_knee_us"], 35_000);
        let back: BatchingPolicy = serde_json::from_value(json).unwrap();
        assert_eq!(back, pol);
    }
}
