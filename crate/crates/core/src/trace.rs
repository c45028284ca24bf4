//! The ordered event log of a run and its JSON-lines encoding.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::request::{RequestId, RequestRecord};
use crate::scheduler::DecisionRecord;
use crate::time::Micros;

/// One delivered audio chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkEvent {
    pub request: RequestId,
    /// 1-based chunk ordinal.
    pub index: u32,
    pub available_time: Micros,
    pub playback_duration: Micros,
    pub new_tokens: u32,
    /// Completion time of the LM step that produced the last token of the
    /// detokenized window.
    pub window_sampled_at: Micros,
    pub is_final: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Prefill,
    Decode,
    DepthDecode,
    Detokenize,
}

/// A busy interval on one device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpan {
    pub device: u32,
    pub kind: TaskKind,
    pub start: Micros,
    pub end: Micros,
    pub batch_size: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub requests: Vec<RequestRecord>,
    pub chunks: Vec<ChunkEvent>,
    pub device_spans: Vec<DeviceSpan>,
    pub decisions: Vec<DecisionRecord>,
    /// Requests refused before admission (e.g. prompt over the context limit).
    pub rejected: u32,
}

impl Trace {
    pub fn request(&self, id: RequestId) -> Option<&RequestRecord> {
        self.requests.iter().find(|r| r.id == id)
    }

    /// Chunks of one request in index order.
    pub fn chunks_of(&self, id: RequestId) -> Vec<&ChunkEvent> {
        let mut out: Vec<_> = self.chunks.iter().filter(|c| c.request == id).collect();
        out.sort_by_key(|c| c.index);
        out
    }

    /// Restores the canonical ordering: requests by id, chunks by
    /// (available_time, request, index), spans by (device, start).
    pub fn normalize(&mut self) {
        self.requests.sort_by_key(|r| r.id);
        self.chunks
            .sort_by_key(|c| (c.available_time, c.request, c.index));
        self.device_spans.sort_by_key(|s| (s.device, s.start, s.kind));
    }

    pub fn devices(&self) -> BTreeSet<u32> {
        self.device_spans.iter().map(|s| s.device).collect()
    }

    pub fn first_arrival(&self) -> Option<Micros> {
        self.requests.iter().map(|r| r.arrival_time).min()
    }

    /// Time of the last observable activity: chunk delivery or device work.
    pub fn end_time(&self) -> Option<Micros> {
        let chunk_end = self.chunks.iter().map(|c| c.available_time).max();
        let span_end = self.device_spans.iter().map(|s| s.end).max();
        chunk_end.max(span_end)
    }

    /// Merges per-instance traces (data-parallel runs) into one.
    pub fn merge(parts: impl IntoIterator<Item = Trace>) -> Trace {
        let mut out = Trace::default();
        for p in parts {
            out.requests.extend(p.requests);
            out.chunks.extend(p.chunks);
            out.device_spans.extend(p.device_spans);
            out.decisions.extend(p.decisions);
            out.rejected += p.rejected;
        }
        out.normalize();
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for event in self.events() {
            serde_json::to_writer(&mut w, &event)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Trace> {
        let mut trace = Trace::default();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: TraceEvent = serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            match event {
                TraceEvent::Arrival { .. } => {}
                TraceEvent::Rejected { count } => trace.rejected = count,
                TraceEvent::Decision(d) => trace.decisions.push(d),
                TraceEvent::Span(s) => trace.device_spans.push(s),
                TraceEvent::Chunk(c) => trace.chunks.push(c),
                TraceEvent::Request(r) => trace.requests.push(r),
            }
        }
        trace.normalize();
        Ok(trace)
    }

    /// All events in a deterministic, time-ordered sequence.
    fn events(&self) -> Vec<TraceEvent> {
        let mut keyed: Vec<(Micros, u8, u64, TraceEvent)> = Vec::new();
        for r in &self.requests {
            keyed.push((
                r.arrival_time,
                0,
                r.id.0,
                TraceEvent::Arrival {
                    request: r.id,
                    time: r.arrival_time,
                },
            ));
        }
        for d in &self.decisions {
            keyed.push((d.host_start, 1, d.iteration, TraceEvent::Decision(d.clone())));
        }
        for s in &self.device_spans {
            keyed.push((s.start, 2, s.device as u64, TraceEvent::Span(s.clone())));
        }
        for c in &self.chunks {
            keyed.push((c.available_time, 3, c.request.0, TraceEvent::Chunk(c.clone())));
        }
        for r in &self.requests {
            let t = self
                .chunks
                .iter()
                .filter(|c| c.request == r.id)
                .map(|c| c.available_time)
                .max()
                .unwrap_or(r.arrival_time);
            keyed.push((t, 4, r.id.0, TraceEvent::Request(r.clone())));
        }
        keyed.sort_by_key(|k| (k.0, k.1, k.2));
        let mut events: Vec<TraceEvent> = keyed.into_iter().map(|k| k.3).collect();
        if self.rejected > 0 {
            events.push(TraceEvent::Rejected {
                count: self.rejected,
            });
        }
        events
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum TraceEvent {
    Arrival { request: RequestId, time: Micros },
    Decision(DecisionRecord),
    Span(DeviceSpan),
    Chunk(ChunkEvent),
    Request(RequestRecord),
    Rejected { count: u32 },
}
