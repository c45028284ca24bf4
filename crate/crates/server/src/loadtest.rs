//! Open-loop load generator for the HTTP service.
//!
//! Requests follow the workload's arrival times. Every frame is timestamped
//! on arrival at the client, and the resulting client-side trace is scored
//! with the same metrics code as simulated runs.

use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use serde::Serialize;
use speechserve_core::request::{Phase, RequestRecord};
use speechserve_core::trace::{ChunkEvent, Trace};
use speechserve_core::workload::RequestSpec;
use speechserve_core::{MetricsReport, Micros, RequestId};
use tokio::time::Instant;

use crate::frame::{ChunkFrame, FrameDecoder, WireFormat};
use crate::service::{GenerateRequest, ARRIVAL_HEADER, REQUEST_ID_HEADER};

#[derive(Debug, Clone)]
pub struct LoadtestOptions {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub url: String,
    /// Per-request limit on the whole stream.
    pub timeout: Duration,
}

/// One received frame, stamped on the client clock.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Received {
    pub at: Micros,
    pub chunk_index: u32,
    pub available_at_ms: u64,
    pub playback_ms: u32,
    pub is_final: bool,
    pub error: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientRecord {
    /// Position in the workload.
    pub index: usize,
    pub spec: RequestSpec,
    /// Client clock when the request was sent.
    pub sent_at: Micros,
    pub server_id: Option<u64>,
    /// Server clock arrival, from the response header.
    pub server_arrival: Option<Micros>,
    pub frames: Vec<Received>,
    pub error: Option<String>,
}

impl ClientRecord {
    fn audio(&self) -> impl Iterator<Item = &Received> {
        self.frames.iter().filter(|f| !f.error)
    }

    pub fn completed(&self) -> bool {
        self.error.is_none() && self.frames.last().is_some_and(|f| f.is_final && !f.error)
    }

    /// Client-observed time to first audio.
    pub fn client_ttfa(&self) -> Option<Micros> {
        self.audio().next().map(|f| f.at.saturating_sub(self.sent_at))
    }

    /// Time to first audio by the server's own clock (millisecond
    /// resolution).
    pub fn server_ttfa(&self) -> Option<Micros> {
        let first = self.audio().next()?;
        Some(Micros(first.available_at_ms * 1000).saturating_sub(self.server_arrival?))
    }
}

#[derive(Debug, Clone)]
pub struct LoadtestResult {
    pub records: Vec<ClientRecord>,
    /// Client-side trace: one request per successful response, chunk times
    /// as received.
    pub trace: Trace,
    pub report: MetricsReport,
}

impl LoadtestResult {
    pub fn errored(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Issues `requests` against the service and waits for every stream.
pub async fn run(options: &LoadtestOptions, requests: &[RequestSpec]) -> LoadtestResult {
    let client = reqwest::Client::builder()
        .timeout(options.timeout)
        .build()
        .expect("client builds");
    let url = Arc::new(format!("{}/v1/generate", options.url.trim_end_matches('/')));
    let epoch = Instant::now();
    let tasks: Vec<_> = requests
        .iter()
        .enumerate()
        .map(|(index, &spec)| {
            let client = client.clone();
            let url = url.clone();
            tokio::spawn(async move {
                tokio::time::sleep_until(epoch + Duration::from_micros(spec.arrival.0)).await;
                one_request(&client, &url, epoch, index, spec).await
            })
        })
        .collect();
    let mut records = Vec::with_capacity(tasks.len());
    for (index, t) in tasks.into_iter().enumerate() {
        records.push(t.await.unwrap_or_else(|e| ClientRecord {
            index,
            spec: requests[index],
            sent_at: Micros::ZERO,
            server_id: None,
            server_arrival: None,
            frames: Vec::new(),
            error: Some(format!("task failed: {e}")),
        }));
    }
    let trace = client_trace(&records);
    let report = MetricsReport::from_trace(&trace);
    LoadtestResult { records, trace, report }
}

fn since(epoch: Instant) -> Micros {
    Micros(epoch.elapsed().as_micros() as u64)
}

async fn one_request(
    client: &reqwest::Client,
    url: &str,
    epoch: Instant,
    index: usize,
    spec: RequestSpec,
) -> ClientRecord {
    let body = GenerateRequest {
        prompt_tokens: Some(spec.prompt_tokens),
        output_tokens: Some(spec.output_tokens),
        ..GenerateRequest::default()
    };
    let mut record = ClientRecord {
        index,
        spec,
        sent_at: since(epoch),
        server_id: None,
        server_arrival: None,
        frames: Vec::new(),
        error: None,
    };
    let resp = client
        .post(url)
        .header(reqwest::header::CONTENT_TYPE, "application/json")
        .body(serde_json::to_vec(&body).expect("serializable"))
        .send()
        .await;
    let resp = match resp {
        Ok(r) => r,
        Err(e) => {
            record.error = Some(format!("connection failed: {e}"));
            return record;
        }
    };
    if !resp.status().is_success() {
        let status = resp.status();
        let text = resp.text().await.unwrap_or_default();
        record.error = Some(format!("HTTP {status}: {text}"));
        return record;
    }
    let header_u64 = |name: &str| {
        resp.headers()
            .get(name)
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.parse::<u64>().ok())
    };
    record.server_id = header_u64(REQUEST_ID_HEADER);
    record.server_arrival = header_u64(ARRIVAL_HEADER).map(Micros);
    let format = resp
        .headers()
        .get(reqwest::header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(WireFormat::from_content_type)
        .unwrap_or(WireFormat::Binary);

    let mut decoder = FrameDecoder::new(format);
    let mut body = resp.bytes_stream();
    while let Some(piece) = body.next().await {
        let at = since(epoch);
        match piece {
            Ok(bytes) => decoder.push(&bytes),
            Err(e) => {
                record.error = Some(format!("stream failed: {e}"));
                return record;
            }
        }
        loop {
            match decoder.next_frame() {
                Ok(Some(f)) => record.frames.push(received(at, &f)),
                Ok(None) => break,
                Err(e) => {
                    record.error = Some(format!("bad frame: {e}"));
                    return record;
                }
            }
        }
    }
    if let Err(e) = decoder.finish() {
        record.error = Some(e.to_string());
    } else if !record.completed() {
        record.error = Some(match record.frames.last() {
            Some(f) if f.error => "stream cut off by the server".into(),
            _ => "stream ended without a final frame".into(),
        });
    }
    record
}

fn received(at: Micros, f: &ChunkFrame) -> Received {
    Received {
        at,
        chunk_index: f.chunk_index,
        available_at_ms: f.available_at_ms,
        playback_ms: f.playback_ms,
        is_final: f.is_final(),
        error: f.is_error(),
    }
}

/// Builds the client-side trace. Requests that failed before any audio
/// arrived count as rejected; token counts are not visible to the client
/// and are left at zero.
pub fn client_trace(records: &[ClientRecord]) -> Trace {
    let mut trace = Trace::default();
    for r in records {
        if r.error.is_some() && r.frames.is_empty() {
            trace.rejected += 1;
            continue;
        }
        let id = RequestId(r.index as u64);
        let audio: Vec<&Received> = r.audio().collect();
        trace.requests.push(RequestRecord {
            id,
            arrival_time: r.sent_at,
            prompt_tokens: r.spec.prompt_tokens,
            target_output_tokens: r.spec.output_tokens,
            phase: if r.completed() {
                Phase::Finished
            } else if audio.is_empty() {
                Phase::Startup
            } else {
                Phase::SteadyState
            },
            tokens_generated: 0,
            chunks_emitted: audio.len() as u32,
            first_chunk_time: audio.first().map(|f| f.at),
            token_digest: 0,
        });
        for f in audio {
            trace.chunks.push(ChunkEvent {
                request: id,
                index: f.chunk_index,
                available_time: f.at,
                playback_duration: Micros::from_millis(u64::from(f.playback_ms)),
                new_tokens: 0,
                window_sampled_at: f.at,
                is_final: f.is_final,
            });
        }
    }
    trace.normalize();
    trace
}
