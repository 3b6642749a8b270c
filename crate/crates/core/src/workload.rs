//! Query stream generation: Poisson arrivals of single-input requests.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

/// Input length assigned to every vision request. Vision preprocessing and
/// execution costs do not depend on it.
pub const IMAGE_INPUT_LENGTH_S: f64 = 1.0;

/// Salt for the length-sampling RNG stream so arrival gaps do not depend on the input kind.
const LENGTH_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub type RequestId = u64;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid traffic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid length distribution: {0}")]
    InvalidDistribution(String),
    #[error("histogram line {line}: {message}")]
    Histogram { line: u64, message: String },
    #[error("histogram has no bins")]
    NoBins,
    #[error("histogram I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-stage timestamps, filled in as the request moves through the pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub preproc_start: Option<SimTime>,
    pub preproc_done: Option<SimTime>,
    pub batch_dispatched: Option<SimTime>,
    pub exec_start: Option<SimTime>,
    pub exec_done: Option<SimTime>,
}

impl Timestamps {
    /// True when every recorded mark is non-decreasing in pipeline order.
    pub fn is_ordered(&self, arrival: SimTime) -> bool {
        let marks = [
            self.preproc_start,
            self.preproc_done,
            self.batch_dispatched,
            self.exec_start,
            self.exec_done,
        ];
        let mut last = arrival;
        for t in marks.into_iter().flatten() {
            if t < last {
                return false;
            }
            last = t;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival: SimTime,
    /// Seconds of audio, or [`IMAGE_INPUT_LENGTH_S`] for images.
    pub input_length: f64,
    pub timestamps: Timestamps,
}

impl Request {
    pub fn new(id: RequestId, arrival: SimTime, input_length: f64) -> Self {
        Self {
            id,
            arrival,
            input_length,
            timestamps: Timestamps::default(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.timestamps.exec_done.is_some()
    }
}

/// Piecewise-uniform distribution over input lengths in seconds.
///
/// A bin is chosen by its probability, then a length is drawn uniformly
/// from the open interval of that bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct LengthDistribution {
    edges: Vec<f64>,
    probabilities: Vec<f64>,
    cumulative: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    bin_edges: Vec<f64>,
    bin_probabilities: Vec<f64>,
}

impl TryFrom<RawDistribution> for LengthDistribution {
    type Error = WorkloadError;
    fn try_from(raw: RawDistribution) -> Result<Self, Self::Error> {
        LengthDistribution::new(raw.bin_edges, raw.bin_probabilities)
    }
}

impl From<LengthDistribution> for RawDistribution {
    fn from(d: LengthDistribution) -> Self {
        RawDistribution {
            bin_edges: d.edges,
            bin_probabilities: d.probabilities,
        }
    }
}

impl LengthDistribution {
    /// Builds a distribution from `n + 1` ascending edges and `n` non-negative
    /// weights. Weights are rescaled to sum to one.
    pub fn new(edges: Vec<f64>, weights: Vec<f64>) -> Result<Self, WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidDistribution(m.to_string()));
        if weights.is_empty() {
            return Err(WorkloadError::NoBins);
        }
        if edges.len() != weights.len() + 1 {
            return bad("expected one more edge than bins");
        }
        if edges.iter().any(|e| !e.is_finite()) || edges[0] < 0.0 {
            return bad("edges must be finite and non-negative");
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return bad("edges must be strictly ascending");
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("bin weights must be finite and non-negative");
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return bad("all-zero mass");
        }
        let probabilities: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = probabilities
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Ok(Self {
            edges,
            probabilities,
            cumulative,
        })
    }

    /// A single bin `[low, high)`.
    pub fn uniform(low: f64, high: f64) -> Result<Self, WorkloadError> {
        Self::new(vec![low, high], vec![1.0])
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn support(&self) -> (f64, f64) {
        (self.edges[0], self.edges[self.edges.len() - 1])
    }

    /// Largest bin upper edge that carries non-zero probability.
    pub fn max_length(&self) -> f64 {
        self.probabilities
            .iter()
            .rposition(|p| *p > 0.0)
            .map_or(self.edges[self.edges.len() - 1], |i| self.edges[i + 1])
    }
}

impl Distribution<f64> for LengthDistribution {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let bin = self
            .cumulative
            .partition_point(|c| *c <= u)
            .min(self.cumulative.len() - 1);
        let (lo, hi) = (self.edges[bin], self.edges[bin + 1]);
        let v: f64 = Open01.sample(rng);
        // Open01 keeps the draw strictly inside (lo, hi) up to rounding.
        (lo + (hi - lo) * v).clamp(lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    FixedImage,
    /// Every audio request has the same length, as in fixed-length characterization runs.
    ConstantAudio {
        length_s: f64,
    },
    VariableAudio {
        distribution: LengthDistribution,
    },
}

impl InputKind {
    pub fn is_audio(&self) -> bool {
        !matches!(self, InputKind::FixedImage)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSpec {
    /// Mean arrivals per second.
    pub rate_lambda: f64,
    pub duration: SimTime,
    pub seed: u64,
    pub input_kind: InputKind,
}

impl TrafficSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.rate_lambda.is_finite() && self.rate_lambda > 0.0) {
            return Err(WorkloadError::InvalidSpec(
                "rate_lambda must be positive".into(),
            ));
        }
        if self.duration == SimTime::ZERO {
            return Err(WorkloadError::InvalidSpec(
                "duration must be positive".into(),
            ));
        }
        if let InputKind::ConstantAudio { length_s } = self.input_kind {
            if !(length_s.is_finite() && length_s > 0.0) {
                return Err(WorkloadError::InvalidSpec(
                    "constant audio length must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Lazily generated arrival stream; yields requests in arrival order.
pub struct ArrivalStream {
    gaps: Exp<f64>,
    gap_rng: ChaCha8Rng,
    length_rng: ChaCha8Rng,
    input_kind: InputKind,
    clock_s: f64,
    end_s: f64,
    next_id: RequestId,
}

impl ArrivalStream {
    pub fn new(spec: &TrafficSpec) -> Result<Self, WorkloadError> {
        spec.validate()?;
        let gaps =
            Exp::new(spec.rate_lambda).map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
        Ok(Self {
            gaps,
            gap_rng: ChaCha8Rng::seed_from_u64(spec.seed),
            length_rng: ChaCha8Rng::seed_from_u64(spec.seed ^ LENGTH_STREAM_SALT),
            input_kind: spec.input_kind.clone(),
            clock_s: 0.0,
            end_s: spec.duration.as_secs_f64(),
            next_id: 0,
        })
    }
}

impl Iterator for ArrivalStream {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        self.clock_s += self.gaps.sample(&mut self.gap_rng);
        if self.clock_s >= self.end_s {
            return None;
        }
        let length = match &self.input_kind {
            InputKind::FixedImage => IMAGE_INPUT_LENGTH_S,
            InputKind::ConstantAudio { length_s } => *length_s,
            InputKind::VariableAudio { distribution } => {
                let mut l = distribution.sample(&mut self.length_rng);
                // A draw can only hit zero when the first edge is zero.
                while l <= 0.0 {
                    l = distribution.sample(&mut self.length_rng);
                }
                l
            }
        };
        let id = self.next_id;
        self.next_id += 1;
        Some(Request::new(
            id,
            SimTime::from_secs_f64(self.clock_s),
            length,
        ))
    }
}

/// Generates the full arrival stream for `spec`.
pub fn generate_arrivals(spec: &TrafficSpec) -> Result<Vec<Request>, WorkloadError> {
    Ok(ArrivalStream::new(spec)?.collect())
}

#[derive(Debug, Deserialize)]
struct HistogramRow {
    low_s: f64,
    high_s: f64,
    count: f64,
}

/// Reads a `low_s,high_s,count` histogram. Rows must be contiguous and
/// ascending; lines starting with `#` are comments.
pub fn load_length_histogram(path: impl AsRef<Path>) -> Result<LengthDistribution, WorkloadError> {
    let mut text = String::new();
    File::open(path.as_ref())?.read_to_string(&mut text)?;
    parse_length_histogram(&text)
}

pub fn parse_length_histogram(text: &str) -> Result<LengthDistribution, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| WorkloadError::Histogram {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.is_empty() {
        return Err(WorkloadError::NoBins);
    }
    if headers != vec!["low_s", "high_s", "count"] {
        return Err(WorkloadError::Histogram {
            line: headers.position().map_or(1, |p| p.line()),
            message: format!("expected header `low_s,high_s,count`, got {headers:?}"),
        });
    }
    let mut edges: Vec<f64> = Vec::new();
    let mut weights = Vec::new();
    for row in reader.deserialize::<HistogramRow>() {
        let row = row.map_err(|e| WorkloadError::Histogram {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = weights.len() as u64 + 2;
        let fail = |message: &str| WorkloadError::Histogram {
            line,
            message: message.to_string(),
        };
        if !(row.low_s.is_finite() && row.high_s.is_finite()) || row.low_s < 0.0 {
            return Err(fail("bin edges must be finite and non-negative"));
        }
        if row.high_s <= row.low_s {
            return Err(fail("high_s must exceed low_s"));
        }
        if !row.count.is_finite() || row.count < 0.0 {
            return Err(fail("count must be non-negative"));
        }
        match edges.last() {
            None => edges.push(row.low_s),
            Some(&prev_high) if (row.low_s - prev_high).abs() > 1e-9 => {
                return Err(fail("bins must be contiguous and ascending"));
            }
            Some(_) => {}
        }
        edges.push(row.high_s);
        weights.push(row.count);
    }
    if weights.is_empty() {
        return Err(WorkloadError::NoBins);
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(WorkloadError::Histogram {
            line: weights.len() as u64 + 1,
            message: "all-zero mass".into(),
        });
    }
    LengthDistribution::new(edges, weights)
}
