//! Time-to-first-audio, streaming viability, and the run report built on them.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::request::{Phase, RequestId};
use crate::time::Micros;
use crate::trace::{ChunkEvent, Trace};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{0} delivered no audio chunk")]
    NoChunkDelivered(RequestId),
    #[error("{0} does not appear in the trace")]
    UnknownRequest(RequestId),
    #[error("percentile of an empty sample set")]
    EmptySamples,
    #[error("percentile rank {0} outside (0, 100]")]
    InvalidPercentile(f64),
    #[error("a chunk must cover at least one token")]
    InvalidTokenCount,
    #[error("token rate must be positive, got {0}")]
    InvalidRate(f64),
}

/// Delay between submission and the first playable chunk of `request`.
pub fn ttfa(trace: &Trace, request: RequestId) -> Result<Micros, MetricsError> {
    let record = trace
        .request(request)
        .ok_or(MetricsError::UnknownRequest(request))?;
    let first = trace
        .chunks
        .iter()
        .filter(|c| c.request == request)
        .min_by_key(|c| c.index)
        .ok_or(MetricsError::NoChunkDelivered(request))?;
    Ok(first.available_time.saturating_sub(record.arrival_time))
}

/// On-time accounting over every delivered chunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViabilityStats {
    pub on_time: u64,
    pub total: u64,
    /// Pooled fraction `on_time / total`; 1.0 when `total == 0`.
    pub fraction: f64,
    /// Mean of per-request on-time fractions.
    pub per_request_mean: f64,
    /// No chunks at all; `fraction` is vacuously 1.0.
    pub vacuous: bool,
}

/// Checks every chunk against its playback deadline.
///
/// The first chunk of a request starts playback and is on time by definition.
/// Chunk `i + 1` is on time when it arrives no later than `t1 + C_1 + .. + C_i`.
pub fn viability(trace: &Trace) -> ViabilityStats {
    let mut per_request: BTreeMap<RequestId, Vec<&ChunkEvent>> = BTreeMap::new();
    for c in &trace.chunks {
        per_request.entry(c.request).or_default().push(c);
    }

    let mut on_time = 0u64;
    let mut total = 0u64;
    let mut fractions = Vec::with_capacity(per_request.len());
    for chunks in per_request.values_mut() {
        chunks.sort_by_key(|c| c.index);
        let t1 = chunks[0].available_time;
        let mut played = Micros::ZERO;
        let mut ok = 0u64;
        for (i, c) in chunks.iter().enumerate() {
            if i == 0 || c.available_time.saturating_sub(t1) <= played {
                ok += 1;
            }
            played += c.playback_duration;
        }
        on_time += ok;
        total += chunks.len() as u64;
        fractions.push(ok as f64 / chunks.len() as f64);
    }

    if total == 0 {
        return ViabilityStats {
            on_time: 0,
            total: 0,
            fraction: 1.0,
            per_request_mean: 1.0,
            vacuous: true,
        };
    }
    ViabilityStats {
        on_time,
        total,
        fraction: on_time as f64 / total as f64,
        per_request_mean: fractions.iter().sum::<f64>() / fractions.len() as f64,
        vacuous: false,
    }
}

pub fn viability_fraction(trace: &Trace) -> f64 {
    viability(trace).fraction
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest sample.
pub fn percentile<T: Copy + PartialOrd>(samples: &[T], p: f64) -> Result<T, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::InvalidPercentile(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("samples must be comparable"));
    let n = sorted.len();
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Seconds of audio covered by `new_tokens` at `token_rate` tokens/s.
pub fn chunk_playback_duration(new_tokens: u32, token_rate: f64) -> Result<f64, MetricsError> {
    if new_tokens == 0 {
        return Err(MetricsError::InvalidTokenCount);
    }
    if token_rate.is_nan() || token_rate <= 0.0 {
        return Err(MetricsError::InvalidRate(token_rate));
    }
    Ok(new_tokens as f64 / token_rate)
}

/// Aggregate figures for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ttfa_p50: Option<f64>,
    pub ttfa_p90: Option<f64>,
    pub ttfa_p99: Option<f64>,
    pub viability_fraction: f64,
    pub viability_per_request: f64,
    pub viability_vacuous: bool,
    pub requests_admitted: u32,
    pub requests_completed: u32,
    pub requests_errored: u32,
    pub audio_seconds_generated: f64,
    pub makespan_seconds: f64,
    pub inverse_rtf: f64,
    pub device_utilization: Vec<f64>,
}

pub const CSV_HEADER: [&str; 16] = [
    "rate",
    "scheduler",
    "ttfa_p50",
    "ttfa_p90",
    "ttfa_p99",
    "viability_fraction",
    "requests_completed",
    "audio_seconds",
    "inverse_rtf",
    "utilization_mean",
    "utilization_max",
    "viability_per_request",
    "viability_vacuous",
    "requests_admitted",
    "requests_errored",
    "makespan_seconds",
];

impl MetricsReport {
    pub fn from_trace(trace: &Trace) -> MetricsReport {
        let ttfas: Vec<f64> = trace
            .requests
            .iter()
            .filter_map(|r| ttfa(trace, r.id).ok())
            .map(Micros::as_secs_f64)
            .collect();
        let pct = |p| percentile(&ttfas, p).ok();
        let v = viability(trace);

        let audio: Micros = trace.chunks.iter().map(|c| c.playback_duration).sum();
        let makespan = match (trace.first_arrival(), trace.end_time()) {
            (Some(start), Some(end)) => end.saturating_sub(start),
            _ => Micros::ZERO,
        };
        let inverse_rtf = if makespan > Micros::ZERO {
            audio.as_secs_f64() / makespan.as_secs_f64()
        } else {
            0.0
        };

        let mut busy: BTreeMap<u32, u64> = BTreeMap::new();
        for s in &trace.device_spans {
            *busy.entry(s.device).or_default() += (s.end - s.start).0;
        }
        let device_utilization = busy
            .values()
            .map(|&b| {
                if makespan.0 == 0 {
                    0.0
                } else {
                    (b as f64 / makespan.0 as f64).min(1.0)
                }
            })
            .collect();

        MetricsReport {
            ttfa_p50: pct(50.0),
            ttfa_p90: pct(90.0),
            ttfa_p99: pct(99.0),
            viability_fraction: v.fraction,
            viability_per_request: v.per_request_mean,
            viability_vacuous: v.vacuous,
            requests_admitted: trace.requests.len() as u32,
            requests_completed: trace
                .requests
                .iter()
                .filter(|r| r.phase == Phase::Finished)
                .count() as u32,
            requests_errored: trace.rejected,
            audio_seconds_generated: audio.as_secs_f64(),
            makespan_seconds: makespan.as_secs_f64(),
            inverse_rtf,
            device_utilization,
        }
    }

    pub fn utilization_mean(&self) -> f64 {
        if self.device_utilization.is_empty() {
            0.0
        } else {
            self.device_utilization.iter().sum::<f64>() / self.device_utilization.len() as f64
        }
    }

    pub fn utilization_max(&self) -> f64 {
        self.device_utilization.iter().copied().fold(0.0, f64::max)
    }

    /// The CSV cells for this report, in [`CSV_HEADER`] order.
    pub fn csv_record(&self, rate: f64, scheduler: &str) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        vec![
            fmt_f64(rate),
            scheduler.to_string(),
            opt(self.ttfa_p50),
            opt(self.ttfa_p90),
            opt(self.ttfa_p99),
            fmt_f64(self.viability_fraction),
            self.requests_completed.to_string(),
            fmt_f64(self.audio_seconds_generated),
            fmt_f64(self.inverse_rtf),
            fmt_f64(self.utilization_mean()),
            fmt_f64(self.utilization_max()),
            fmt_f64(self.viability_per_request),
            self.viability_vacuous.to_string(),
            self.requests_admitted.to_string(),
            self.requests_errored.to_string(),
            fmt_f64(self.makespan_seconds),
        ]
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes report rows under the shared CSV header.
pub struct CsvReportWriter<W: io::Write> {
    inner: csv::Writer<W>,
}

impl<W: io::Write> CsvReportWriter<W> {
    pub fn new(w: W) -> io::Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(CSV_HEADER).map_err(io::Error::other)?;
        Ok(Self { inner })
    }

    pub fn write_row(&mut self, rate: f64, scheduler: &str, report: &MetricsReport) -> io::Result<()> {
        self.inner
            .write_record(report.csv_record(rate, scheduler))
            .map_err(io::Error::other)
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| io::Error::other(e.to_string()))
    }
}
