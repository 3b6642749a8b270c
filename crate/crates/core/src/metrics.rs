//! Per-request traces and the end-of-run report.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

/// Electricity price in USD per kWh used when none is configured.
pub const DEFAULT_ELECTRICITY_USD_PER_KWH: f64 = 0.139;
/// Hardware active lifetime used when none is configured: three years.
pub const DEFAULT_LIFETIME_S: f64 = 3.0 * 365.0 * 24.0 * 3600.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no samples")]
    EmptySamples,
    #[error("percentile must lie in (0, 100), got {0}")]
    BadPercentile(f64),
    #[error("no requests completed in the steady-state window")]
    EmptyWindow,
    #[error("invalid price model: {0}")]
    BadPriceModel(String),
}

/// Completed request, one row of the per-request trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub arrival: SimTime,
    pub preproc_start: SimTime,
    pub preproc_done: SimTime,
    pub dispatched: SimTime,
    pub exec_start: SimTime,
    pub exec_done: SimTime,
    pub input_length: f64,
    pub bucket: usize,
    pub batch_id: u64,
    pub batch_size: u32,
}

impl TraceRecord {
    pub fn end_to_end_us(&self) -> u64 {
        (self.exec_done - self.arrival).as_micros()
    }

    /// `[preprocessing, batching, execution queueing, execution]` in microseconds.
    pub fn stages_us(&self) -> [u64; 4] {
        [
            (self.preproc_done - self.arrival).as_micros(),
            (self.dispatched - self.preproc_done).as_micros(),
            (self.exec_start - self.dispatched).as_micros(),
            (self.exec_done - self.exec_start).as_micros(),
        ]
    }

    pub fn is_ordered(&self) -> bool {
        self.arrival <= self.preproc_start
            && self.preproc_start <= self.preproc_done
            && self.preproc_done <= self.dispatched
            && self.dispatched <= self.exec_start
            && self.exec_start <= self.exec_done
    }
}

/// Writes `id,arrival_us,preproc_done_us,dispatched_us,exec_start_us,exec_done_us,bucket,batch_size`.
pub fn write_trace_csv<W: Write>(mut out: W, records: &[TraceRecord]) -> io::Result<()> {
    writeln!(
        out,
        "id,arrival_us,preproc_done_us,dispatched_us,exec_start_us,exec_done_us,bucket,batch_size"
    )?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.id,
            r.arrival.as_micros(),
            r.preproc_done.as_micros(),
            r.dispatched.as_micros(),
            r.exec_start.as_micros(),
            r.exec_done.as_micros(),
            r.bucket,
            r.batch_size
        )?;
    }
    Ok(())
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest sample.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if !(p > 0.0 && p < 100.0) {
        return Err(MetricsError::BadPercentile(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(sorted.len(), p)])
}

fn nearest_rank(n: usize, p: f64) -> usize {
    let rank = (p / 100.0 * n as f64).ceil() as usize;
    rank.clamp(1, n) - 1
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyPercentiles {
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
}

impl LatencyPercentiles {
    /// Percentiles of already sorted samples.
    pub fn from_sorted(sorted: &[u64]) -> Option<Self> {
        if sorted.is_empty() {
            return None;
        }
        let at = |p| sorted[nearest_rank(sorted.len(), p)];
        Some(Self {
            p50: at(50.0),
            p95: at(95.0),
            p99: at(99.0),
        })
    }
}

/// Mean time per pipeline stage, labelled like the latency-breakdown figures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub preprocessing: f64,
    pub batching: f64,
    pub execution_queueing: f64,
    pub execution: f64,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.preprocessing + self.batching + self.execution_queueing + self.execution
    }
}

/// Costs for the throughput-per-dollar metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceModel {
    /// One-time hardware cost in USD.
    pub capex_usd: f64,
    /// Static system power draw in watts.
    pub power_w: f64,
    #[serde(default = "default_lifetime")]
    pub lifetime_s: f64,
    #[serde(default = "default_electricity")]
    pub electricity_usd_per_kwh: f64,
}

fn default_lifetime() -> f64 {
    DEFAULT_LIFETIME_S
}

fn default_electricity() -> f64 {
    DEFAULT_ELECTRICITY_USD_PER_KWH
}

impl PriceModel {
    pub fn new(capex_usd: f64, power_w: f64) -> Self {
        Self {
            capex_usd,
            power_w,
            lifetime_s: DEFAULT_LIFETIME_S,
            electricity_usd_per_kwh: DEFAULT_ELECTRICITY_USD_PER_KWH,
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let fields = [
            ("capex_usd", self.capex_usd),
            ("power_w", self.power_w),
            ("lifetime_s", self.lifetime_s),
            ("electricity_usd_per_kwh", self.electricity_usd_per_kwh),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MetricsError::BadPriceModel(format!(
                    "{name} must be non-negative"
                )));
            }
        }
        if self.capex_usd + self.opex_usd() <= 0.0 {
            return Err(MetricsError::BadPriceModel(
                "total cost must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Power cost over the lifetime: kW x hours x price per kWh.
    pub fn opex_usd(&self) -> f64 {
        self.power_w / 1_000.0 * (self.lifetime_s / 3_600.0) * self.electricity_usd_per_kwh
    }
}

/// Queries served per dollar: `throughput * time / (CAPEX + OPEX)`.
pub fn cost_efficiency(qps: f64, price: &PriceModel) -> f64 {
    qps * price.lifetime_s / (price.capex_usd + price.opex_usd())
}

/// Busy-time integral over `capacity * window`.
pub fn utilization(busy_us: u128, capacity: u32, window_us: u64) -> f64 {
    if capacity == 0 || window_us == 0 {
        return 0.0;
    }
    (busy_us as f64 / (f64::from(capacity) * window_us as f64)).clamp(0.0, 1.0)
}

/// Steady-state measurement interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementWindow {
    pub start: SimTime,
    pub end: SimTime,
}

impl MeasurementWindow {
    /// Excludes the first `warmup_fraction` of `[0, end]`.
    pub fn after_warmup(end: SimTime, warmup_fraction: f64) -> Self {
        let f = warmup_fraction.clamp(0.0, 0.99);
        Self {
            start: SimTime((end.as_micros() as f64 * f).round() as u64),
            end,
        }
    }

    pub fn len_us(&self) -> u64 {
        (self.end - self.start).as_micros()
    }

    pub fn secs(&self) -> f64 {
        self.len_us() as f64 / 1e6
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub generated: u64,
    pub completed: u64,
    pub in_flight: u64,
    pub window_s: f64,
    /// Completions inside the window per second.
    pub qps: f64,
    /// End-to-end latency (`exec_done - arrival`) of requests that arrived in
    /// the window and finished before its end; null when none did.
    pub latency_us: Option<LatencyPercentiles>,
    pub mean_latency_us: Option<f64>,
    pub breakdown_us: Option<Breakdown>,
    pub batches: u64,
    pub mean_batch_size: f64,
    /// Busy fraction per resource class.
    pub utilization: BTreeMap<String, f64>,
    pub cost_efficiency: Option<f64>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Summarizes completed-request traces over `window`.
pub fn build_report(
    records: &[TraceRecord],
    generated: u64,
    window: MeasurementWindow,
    utilization: BTreeMap<String, f64>,
    price: Option<&PriceModel>,
) -> Result<SimReport, MetricsError> {
    if window.len_us() == 0 {
        return Err(MetricsError::EmptyWindow);
    }
    let in_window = |t: SimTime| t >= window.start && t <= window.end;
    let finished: Vec<&TraceRecord> = records.iter().filter(|r| in_window(r.exec_done)).collect();
    let measured: Vec<&TraceRecord> = records
        .iter()
        .filter(|r| r.arrival >= window.start && r.exec_done <= window.end)
        .collect();
    if finished.is_empty() {
        return Err(MetricsError::EmptyWindow);
    }
    if measured.is_empty() {
        log::warn!("no request both arrived and finished in the window; latency left empty");
    }
    let qps = finished.len() as f64 / window.secs();

    let mut e2e: Vec<u64> = measured.iter().map(|r| r.end_to_end_us()).collect();
    e2e.sort_unstable();
    let n = measured.len() as f64;
    let mean_latency_us =
        (!measured.is_empty()).then(|| e2e.iter().map(|&v| v as f64).sum::<f64>() / n);
    let mut sums = [0u128; 4];
    for r in &measured {
        for (s, v) in sums.iter_mut().zip(r.stages_us()) {
            *s += u128::from(v);
        }
    }
    let mean = |i: usize| sums[i] as f64 / n;
    let breakdown = (!measured.is_empty()).then(|| Breakdown {
        preprocessing: mean(0),
        batching: mean(1),
        execution_queueing: mean(2),
        execution: mean(3),
    });

    let mut seen = BTreeSet::new();
    let mut batch_members = 0u64;
    for r in &finished {
        if seen.insert(r.batch_id) {
            batch_members += u64::from(r.batch_size);
        }
    }
    let batches = seen.len() as u64;

    if let Some(p) = price {
        p.validate()?;
    }
    Ok(SimReport {
        generated,
        completed: records.len() as u64,
        in_flight: generated.saturating_sub(records.len() as u64),
        window_s: window.secs(),
        qps,
        latency_us: LatencyPercentiles::from_sorted(&e2e),
        mean_latency_us,
        breakdown_us: breakdown,
        batches,
        mean_batch_size: batch_members as f64 / batches as f64,
        utilization,
        cost_efficiency: price.map(|p| cost_efficiency(qps, p)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, arrival: u64, done: u64, batch_id: u64) -> TraceRecord {
        TraceRecord {
            id,
            arrival: SimTime(arrival),
            preproc_start: SimTime(arrival),
            preproc_done: SimTime(arrival + 1),
            dispatched: SimTime(arrival + 3),
            exec_start: SimTime(arrival + 6),
            exec_done: SimTime(done),
            input_length: 1.0,
            bucket: 0,
            batch_id,
            batch_size: 1,
        }
    }

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0).unwrap(), 95.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&v, 99.5).unwrap(), 100.0);
        assert_eq!(percentile(&[4.2], 1.0).unwrap(), 4.2);
        assert_eq!(percentile(&[4.2], 99.0).unwrap(), 4.2);
        assert_eq!(percentile(&[], 50.0), Err(MetricsError::EmptySamples));
        assert!(percentile(&v, 0.0).is_err());
        assert!(percentile(&v, 100.0).is_err());
    }

    #[test]
    fn qps_over_window() {
        let records: Vec<_> = (0..1000)
            .map(|i| rec(i, i * 10_000, i * 10_000 + 100, i))
            .collect();
        let window = MeasurementWindow {
            start: SimTime(0),
            end: SimTime(10_000_000),
        };
        let r = build_report(&records, 1000, window, BTreeMap::new(), None).unwrap();
        assert!((r.qps - 100.0).abs() < 1e-9);
        assert_eq!(r.in_flight, 0);
        assert_eq!(r.batches, 1000);
        assert!((r.breakdown_us.unwrap().total() - r.mean_latency_us.unwrap()).abs() < 1.0);
    }

    #[test]
    fn backlog_leaves_latency_empty() {
        // Only requests that arrived before the window finish inside it.
        let records: Vec<_> = (0..10).map(|i| rec(i, i, 5_000 + i, i)).collect();
        let window = MeasurementWindow {
            start: SimTime(1_000),
            end: SimTime(10_000),
        };
        let r = build_report(&records, 500, window, BTreeMap::new(), None).unwrap();
        assert!(r.qps > 0.0);
        assert_eq!(r.latency_us, None);
        assert!(r.to_json().contains("\"latency_us\": null"));
    }

    #[test]
    fn empty_window_errors() {
        let window = MeasurementWindow {
            start: SimTime(5),
            end: SimTime(10),
        };
        assert_eq!(
            build_report(&[], 0, window, BTreeMap::new(), None),
            Err(MetricsError::EmptyWindow)
        );
    }

    #[test]
    fn warmup_window() {
        let w = MeasurementWindow::after_warmup(SimTime::from_secs_f64(10.0), 0.1);
        assert_eq!(w.start, SimTime::from_secs_f64(1.0));
        assert!((w.secs() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn cost_efficiency_substitution() {
        let p = PriceModel {
            capex_usd: 20_000.0,
            power_w: 500.0,
            lifetime_s: 3_600_000.0,
            electricity_usd_per_kwh: 0.139,
        };
        // 0.5 kW * 1000 h * 0.139 $/kWh = 69.5 $
        assert!((p.opex_usd() - 69.5).abs() < 1e-9);
        let ce = cost_efficiency(100.0, &p);
        assert!((ce - 100.0 * 3_600_000.0 / 20_069.5).abs() < 1e-6);
        assert!((cost_efficiency(200.0, &p) - 2.0 * ce).abs() < 1e-6);
    }

    #[test]
    fn utilization_fraction() {
        assert_eq!(utilization(5_000_000, 1, 10_000_000), 0.5);
        assert_eq!(utilization(0, 7, 10), 0.0);
        assert_eq!(utilization(10, 0, 10), 0.0);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[rec(3, 10, 50, 0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "id,arrival_us,preproc_done_us,dispatched_us,exec_start_us,exec_done_us,bucket,batch_size"
        );
        assert_eq!(lines.next().unwrap(), "3,10,11,13,16,50,0,1");
    }
}
