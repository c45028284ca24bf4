//! The serving loop: admission, scheduling, device timelines and chunk
//! delivery.
//!
//! [`Engine`] is a clock-agnostic state machine. Each [`Engine::poll`] runs at
//! most one iteration: a host phase (admission, scheduling, sampling
//! bookkeeping) of `host_overhead` followed by device tasks placed on
//! per-device serial timelines. Tokens and chunks are computed when an
//! iteration is planned; their timestamps are the planned device times.
//! The virtual driver feeds `poll` simulated time and the wall driver feeds
//! it real time, so both share this code.

mod sim;

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{sample, DetokenizerCache, Executor, ModelError, StageBatch, StageKind, TokenFrame};
use crate::profiles::{chunk_ready, covered_tokens, ModelProfile, WindowSpec};
use crate::request::{Phase, Request, RequestId, RequestRecord};
use crate::scheduler::{
    DecisionRecord, DetokEntry, LmEntry, LmTask, Policy, PolicyConfig, PolicyError, QueueEntry,
    SchedulerDecision, SchedulingPolicy,
};
use crate::time::Micros;
use crate::trace::{ChunkEvent, DeviceSpan, TaskKind, Trace};

pub use sim::{run_replay, run_scenario, ScenarioSpec};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("dependency violation: {0}")]
    DependencyViolation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data-parallel topology needs at least one instance")]
    NoInstances,
    #[error("replay diverged: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// The device idles while the host prepares each iteration.
    Synchronous,
    /// Host work for the next iteration overlaps device execution.
    #[default]
    Asynchronous,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    Virtual,
    Wall,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    /// LM and detokenizer share one device.
    #[default]
    Single,
    /// LM and detokenizer on separate devices joined by a fixed-latency link
    /// (seconds).
    Disaggregated { link_latency: f64 },
    /// Independent single-device engines behind a uniform random router.
    DataParallel { instances: u32 },
}

impl Topology {
    pub fn validate(&self) -> Result<(), EngineError> {
        match *self {
            Topology::Single => Ok(()),
            Topology::Disaggregated { link_latency } if link_latency.is_finite() && link_latency >= 0.0 => Ok(()),
            Topology::Disaggregated { link_latency } => Err(EngineError::Config(format!(
                "link_latency must be >= 0, got {link_latency}"
            ))),
            Topology::DataParallel { instances: 0 } => Err(EngineError::NoInstances),
            Topology::DataParallel { .. } => Ok(()),
        }
    }

    pub fn instances(&self) -> u32 {
        match *self {
            Topology::DataParallel { instances } => instances,
            _ => 1,
        }
    }

    /// Device layout of instance `index`.
    pub fn placement(&self, index: u32) -> Placement {
        match *self {
            Topology::Single => Placement::single(0),
            Topology::Disaggregated { link_latency } => Placement {
                lm_device: 0,
                detok_device: 1,
                link_latency: Micros::from_secs_f64(link_latency),
            },
            Topology::DataParallel { .. } => Placement::single(index),
        }
    }
}

/// Which devices one engine instance runs its stages on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub lm_device: u32,
    pub detok_device: u32,
    /// Applied to each hop between the two devices: tokens to the
    /// detokenizer and finished chunks back to the host.
    pub link_latency: Micros,
}

impl Placement {
    pub fn single(device: u32) -> Self {
        Placement {
            lm_device: device,
            detok_device: device,
            link_latency: Micros::ZERO,
        }
    }

    fn disaggregated(&self) -> bool {
        self.lm_device != self.detok_device
    }
}

/// Uniform random instance choice.
pub fn route_dp<R: Rng + ?Sized>(n_instances: u32, rng: &mut R) -> Result<u32, EngineError> {
    if n_instances == 0 {
        return Err(EngineError::NoInstances);
    }
    Ok(rng.random_range(0..n_instances))
}

/// Arrival time of a window at the detokenizer device.
pub fn transfer_disaggregated(ready: Micros, link_latency: Micros) -> Micros {
    ready + link_latency
}

/// A serial execution resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceResource {
    pub id: u32,
    pub busy_until: Micros,
    pub tasks: u64,
}

impl DeviceResource {
    fn new(id: u32) -> Self {
        DeviceResource {
            id,
            busy_until: Micros::ZERO,
            tasks: 0,
        }
    }

    /// Books `duration` starting no earlier than `earliest`.
    fn book(&mut self, earliest: Micros, duration: Micros) -> (Micros, Micros) {
        let start = earliest.max(self.busy_until);
        let end = start + duration;
        self.busy_until = end;
        self.tasks += 1;
        (start, end)
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub policy: PolicyConfig,
    pub pipeline: PipelineMode,
    pub placement: Placement,
    /// Added to every chunk's availability time.
    pub delivery_overhead: Micros,
    /// Requests beyond this many live ones wait in the admission queue.
    pub max_live_requests: Option<u32>,
    /// End a stream early when codebook 0 samples this id.
    pub stop_token: Option<u32>,
    /// Keep every scheduler decision in the trace (needed for replay).
    pub log_decisions: bool,
}

impl EngineConfig {
    pub fn new(policy: PolicyConfig) -> Self {
        EngineConfig {
            policy,
            pipeline: PipelineMode::default(),
            placement: Placement::single(0),
            delivery_overhead: Micros::ZERO,
            max_live_requests: None,
            stop_token: None,
            log_decisions: true,
        }
    }
}

/// What one iteration produced.
#[derive(Debug, Clone, Default)]
pub struct IterationReport {
    pub iteration: u64,
    pub host_start: Micros,
    pub admitted: Vec<RequestId>,
    pub spans: Vec<DeviceSpan>,
    pub chunks: Vec<ChunkEvent>,
    pub finished: Vec<RequestRecord>,
}

#[derive(Debug, Clone)]
pub enum Poll {
    Ran(IterationReport),
    /// Nothing to do before `wake` (absent: only a new submission helps).
    Idle { wake: Option<Micros> },
    /// No pending or live requests.
    Drained,
}

struct LiveRequest {
    req: Request,
    /// Sampled ids, `codebooks` per position.
    tokens: Vec<u32>,
    /// Completion time of the LM step that produced each position.
    token_ready: Vec<Micros>,
    prefilled: bool,
    /// End of this request's latest LM task.
    lm_ready: Micros,
    /// End of this request's latest detokenizer task.
    detok_ready: Micros,
    next_input: Option<TokenFrame>,
}

impl LiveRequest {
    fn lm_task(&self) -> Option<LmTask> {
        if !self.prefilled {
            Some(LmTask::Prefill)
        } else if !self.req.stream_ended {
            Some(LmTask::Decode)
        } else {
            None
        }
    }

    fn ready_window(&self, profile: &ModelProfile) -> Option<WindowSpec> {
        chunk_ready(
            self.req.tokens_generated,
            self.req.chunks_emitted,
            profile,
            self.req.stream_ended,
        )
    }

    fn done(&self, profile: &ModelProfile) -> bool {
        self.req.stream_ended
            && covered_tokens(self.req.tokens_generated, self.req.chunks_emitted, profile)
                == self.req.tokens_generated
    }
}

pub struct Engine<E: Executor> {
    exec: E,
    config: EngineConfig,
    policy: Policy,
    devices: Vec<DeviceResource>,
    pending: VecDeque<Request>,
    live: Vec<LiveRequest>,
    next_id: u64,
    iteration: u64,
    host_ready: Micros,
    /// End of the device work issued by the previous iteration.
    prev_device_end: Micros,
    trace: Trace,
}

impl<E: Executor> Engine<E> {
    pub fn new(exec: E, config: EngineConfig) -> Result<Self, EngineError> {
        exec.profile()
            .validate()
            .map_err(|e| EngineError::Config(e.to_string()))?;
        let policy = Policy::new(config.policy.clone())?;
        if config.max_live_requests == Some(0) {
            return Err(EngineError::Config("max_live_requests must be >= 1".into()));
        }
        let p = config.placement;
        let mut devices = vec![DeviceResource::new(p.lm_device)];
        if p.disaggregated() {
            devices.push(DeviceResource::new(p.detok_device));
        }
        Ok(Engine {
            exec,
            config,
            policy,
            devices,
            pending: VecDeque::new(),
            live: Vec::new(),
            next_id: 0,
            iteration: 0,
            host_ready: Micros::ZERO,
            prev_device_end: Micros::ZERO,
            trace: Trace::default(),
        })
    }

    pub fn executor(&self) -> &E {
        &self.exec
    }

    pub fn profile(&self) -> &ModelProfile {
        self.exec.profile()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn devices(&self) -> &[DeviceResource] {
        &self.devices
    }

    /// Earliest time the next iteration's host phase may begin.
    pub fn host_ready(&self) -> Micros {
        self.host_ready
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn is_drained(&self) -> bool {
        self.live.is_empty() && self.pending.is_empty()
    }

    /// Earliest arrival still waiting for admission.
    pub fn next_arrival(&self) -> Option<Micros> {
        self.pending.front().map(|r| r.arrival_time)
    }

    /// Queues a request with the next sequential id. Arrivals must be
    /// submitted in nondecreasing time order.
    pub fn submit(
        &mut self,
        arrival: Micros,
        prompt_tokens: u32,
        output_tokens: u32,
    ) -> Result<RequestId, EngineError> {
        let id = RequestId(self.next_id);
        self.submit_with_id(id, arrival, prompt_tokens, output_tokens)
    }

    /// Queues a request under a caller-chosen id (data-parallel routers keep
    /// ids unique across instances).
    pub fn submit_with_id(
        &mut self,
        id: RequestId,
        arrival: Micros,
        prompt_tokens: u32,
        output_tokens: u32,
    ) -> Result<RequestId, EngineError> {
        self.next_id = self.next_id.max(id.0 + 1);
        if let Some(last) = self.pending.back() {
            if arrival < last.arrival_time {
                return Err(EngineError::Config(format!(
                    "{id} arrives at {arrival} before a queued request at {}",
                    last.arrival_time
                )));
            }
        }
        match self.exec.preprocess(id, arrival, prompt_tokens, output_tokens) {
            Ok(req) => {
                self.pending.push_back(req);
                Ok(id)
            }
            Err(e) => {
                self.trace.rejected += 1;
                Err(e.into())
            }
        }
    }

    /// Runs the next iteration if there is work at `now` (or when the host
    /// next becomes free).
    pub fn poll(&mut self, now: Micros) -> Result<Poll, EngineError> {
        if self.is_drained() {
            return Ok(Poll::Drained);
        }
        let host_start = now.max(self.host_ready);
        let admitted = self.admit(host_start, None)?;

        let profile = self.exec.profile().clone();
        let queue: Vec<QueueEntry> = self
            .live
            .iter()
            .map(|l| QueueEntry {
                request: &l.req,
                lm_task: l.lm_task(),
                ready_window: l.ready_window(&profile),
            })
            .collect();
        let decision = self.policy.decide(&queue, host_start);
        if decision.is_empty() {
            let deferred = self.policy.next_wakeup(&queue, host_start);
            let cap_full = self
                .config
                .max_live_requests
                .is_some_and(|cap| self.live.len() >= cap as usize);
            let arrival = if cap_full { None } else { self.next_arrival() };
            let wake = [deferred, arrival]
                .into_iter()
                .flatten()
                .min()
                .map(|t| t.max(host_start + Micros(1)));
            // Admitted-but-idle requests stay live; report them next time.
            debug_assert!(admitted.is_empty() || wake.is_some() || !self.live.is_empty());
            return Ok(Poll::Idle { wake });
        }
        self.execute(host_start, admitted, decision).map(Poll::Ran)
    }

    /// Runs one logged iteration verbatim: admits exactly the logged
    /// requests and issues the logged batches.
    pub fn replay(&mut self, record: &DecisionRecord) -> Result<IterationReport, EngineError> {
        let latest_arrival = record
            .admitted
            .iter()
            .map(|id| {
                self.pending
                    .iter()
                    .find(|r| r.id == *id)
                    .map(|r| r.arrival_time)
                    .ok_or_else(|| EngineError::Replay(format!("{id} is not pending")))
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .max()
            .unwrap_or(Micros::ZERO);
        let host_start = self.host_ready.max(latest_arrival);
        let admitted = self.admit(host_start, Some(&record.admitted))?;
        self.execute(host_start, admitted, record.decision.clone())
    }

    /// The trace so far, including snapshots of still-live requests.
    pub fn trace_snapshot(&self) -> Trace {
        let mut t = self.trace.clone();
        t.requests.extend(self.live.iter().map(|l| l.req.snapshot()));
        t.normalize();
        t
    }

    /// Consumes the engine; unfinished requests are recorded in their
    /// current phase.
    pub fn into_trace(mut self) -> Trace {
        let live = std::mem::take(&mut self.live);
        self.trace.requests.extend(live.iter().map(|l| l.req.snapshot()));
        self.trace.normalize();
        self.trace
    }

    fn admit(&mut self, host_start: Micros, only: Option<&[RequestId]>) -> Result<Vec<RequestId>, EngineError> {
        let mut admitted = Vec::new();
        match only {
            Some(ids) => {
                for id in ids {
                    let pos = self
                        .pending
                        .iter()
                        .position(|r| r.id == *id)
                        .ok_or_else(|| EngineError::Replay(format!("{id} is not pending")))?;
                    let req = self.pending.remove(pos).expect("position is valid");
                    admitted.push(req.id);
                    self.live.push(Self::make_live(req));
                }
            }
            None => {
                while let Some(front) = self.pending.front() {
                    if front.arrival_time > host_start {
                        break;
                    }
                    if let Some(cap) = self.config.max_live_requests {
                        if self.live.len() >= cap as usize {
                            break;
                        }
                    }
                    let req = self.pending.pop_front().expect("front exists");
                    admitted.push(req.id);
                    self.live.push(Self::make_live(req));
                }
            }
        }
        Ok(admitted)
    }

    fn make_live(req: Request) -> LiveRequest {
        let arrival = req.arrival_time;
        LiveRequest {
            req,
            tokens: Vec::new(),
            token_ready: Vec::new(),
            prefilled: false,
            lm_ready: arrival,
            detok_ready: arrival,
            next_input: None,
        }
    }

    fn index_of(&self, id: RequestId) -> Result<usize, EngineError> {
        self.live
            .iter()
            .position(|l| l.req.id == id)
            .ok_or_else(|| EngineError::DependencyViolation(format!("{id} is not live")))
    }

    fn device(&mut self, id: u32) -> &mut DeviceResource {
        self.devices
            .iter_mut()
            .find(|d| d.id == id)
            .expect("placement devices exist")
    }

    fn execute(
        &mut self,
        host_start: Micros,
        admitted: Vec<RequestId>,
        decision: SchedulerDecision,
    ) -> Result<IterationReport, EngineError> {
        let host_end = host_start + self.profile().cost.host_overhead();
        let mut report = IterationReport {
            iteration: self.iteration,
            host_start,
            admitted: admitted.clone(),
            ..Default::default()
        };

        // Windows consume tokens from earlier iterations only, so the
        // detokenizer goes first and the first chunk of a request is not
        // queued behind this iteration's LM step.
        self.run_detok(host_end, &decision.detok_batch, &mut report)?;
        self.run_lm(host_end, &decision.lm_batch, &mut report)?;

        let profile = self.exec.profile().clone();
        let mut i = 0;
        while i < self.live.len() {
            if self.live[i].done(&profile) {
                let mut l = self.live.remove(i);
                l.req.phase = Phase::Finished;
                let record = l.req.snapshot();
                self.trace.requests.push(record.clone());
                report.finished.push(record);
            } else {
                i += 1;
            }
        }

        let device_end = report.spans.iter().map(|s| s.end).max().unwrap_or(host_end);
        self.host_ready = match self.config.pipeline {
            PipelineMode::Synchronous => device_end.max(host_end),
            PipelineMode::Asynchronous => host_end.max(self.prev_device_end),
        };
        self.prev_device_end = device_end.max(self.prev_device_end);

        self.trace.chunks.extend(report.chunks.iter().cloned());
        self.trace.device_spans.extend(report.spans.iter().cloned());
        if self.config.log_decisions {
            self.trace.decisions.push(DecisionRecord {
                iteration: self.iteration,
                host_start,
                admitted,
                decision,
            });
        }
        self.iteration += 1;
        Ok(report)
    }

    fn push_span(&mut self, report: &mut IterationReport, device: u32, kind: TaskKind, span: (Micros, Micros), n: usize) {
        report.spans.push(DeviceSpan {
            device,
            kind,
            start: span.0,
            end: span.1,
            batch_size: n as u32,
        });
    }

    fn run_lm(&mut self, host_end: Micros, batch: &[LmEntry], report: &mut IterationReport) -> Result<(), EngineError> {
        let mut prefill = Vec::new();
        let mut decode = Vec::new();
        for e in batch {
            let idx = self.index_of(e.request)?;
            let l = &self.live[idx];
            match (e.task, l.lm_task()) {
                (LmTask::Prefill, Some(LmTask::Prefill)) => prefill.push(idx),
                (LmTask::Decode, Some(LmTask::Decode)) => decode.push(idx),
                (task, actual) => {
                    return Err(EngineError::DependencyViolation(format!(
                        "{} scheduled for {task:?} but needs {actual:?}",
                        e.request
                    )))
                }
            }
        }
        if !prefill.is_empty() {
            self.run_prefill(host_end, &prefill, report)?;
        }
        if !decode.is_empty() {
            self.run_decode(host_end, &decode, report)?;
        }
        Ok(())
    }

    fn run_prefill(&mut self, host_end: Micros, idx: &[usize], report: &mut IterationReport) -> Result<(), EngineError> {
        let cbs = self.profile().codebooks as usize;
        let batch = StageBatch {
            kind: StageKind::Prefill,
            request_ids: idx.iter().map(|&i| self.live[i].req.id).collect(),
            frames: idx
                .iter()
                .map(|&i| TokenFrame::new(Array2::zeros((self.live[i].req.prompt_tokens as usize, cbs))))
                .collect(),
            steps: vec![0; idx.len()],
        };
        let out = self.exec.lm_forward(&batch)?;
        let earliest = idx.iter().map(|&i| self.live[i].lm_ready).fold(host_end, Micros::max);
        let lm_device = self.config.placement.lm_device;
        let span = self.device(lm_device).book(earliest, out.latency);
        self.push_span(report, lm_device, TaskKind::Prefill, span, idx.len());
        for &i in idx {
            let l = &mut self.live[i];
            l.prefilled = true;
            l.lm_ready = span.1;
            l.next_input = Some(self.exec.next_input(&vec![0; cbs])?);
        }
        Ok(())
    }

    fn run_decode(&mut self, host_end: Micros, idx: &[usize], report: &mut IterationReport) -> Result<(), EngineError> {
        let profile = self.exec.profile().clone();
        let cbs = profile.codebooks as usize;
        let lm_cbs = profile.lm_codebooks() as usize;
        let batch = StageBatch {
            kind: StageKind::Decode,
            request_ids: idx.iter().map(|&i| self.live[i].req.id).collect(),
            frames: idx
                .iter()
                .map(|&i| self.live[i].next_input.clone().expect("prefilled requests have an input"))
                .collect(),
            steps: idx.iter().map(|&i| self.live[i].req.tokens_generated).collect(),
        };
        let out = self.exec.lm_forward(&batch)?;
        let earliest = idx.iter().map(|&i| self.live[i].lm_ready).fold(host_end, Micros::max);
        let lm_device = self.config.placement.lm_device;
        let mut span = self.device(lm_device).book(earliest, out.latency);
        self.push_span(report, lm_device, TaskKind::Decode, span, idx.len());

        let mut sampled: Vec<Vec<u32>> = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            let state = &mut self.live[i].req.sampling_state;
            let mut ids = Vec::with_capacity(cbs);
            for cb in 0..lm_cbs {
                ids.push(sample(&out.logits[row][cb], &profile.sampling, state, cb)?);
            }
            sampled.push(ids);
        }

        if profile.has_depth_stage {
            let depth_batch = StageBatch {
                kind: StageKind::DepthDecode,
                request_ids: batch.request_ids.clone(),
                frames: sampled
                    .iter()
                    .map(|ids| {
                        let mut full = ids.clone();
                        full.resize(cbs, 0);
                        self.exec.next_input(&full)
                    })
                    .collect::<Result<_, _>>()?,
                steps: batch.steps.clone(),
            };
            let mut states: Vec<&mut crate::model::SamplingState> = Vec::with_capacity(idx.len());
            // Distinct indices, so the mutable borrows are disjoint.
            let mut picked: Vec<Option<&mut LiveRequest>> = self.live.iter_mut().map(Some).collect();
            for &i in idx {
                states.push(&mut picked[i].take().expect("indices are distinct").req.sampling_state);
            }
            let depth = self.exec.depth_forward(&depth_batch, &mut states)?;
            for (ids, rest) in sampled.iter_mut().zip(depth.tokens) {
                ids.extend(rest);
            }
            span = self.device(lm_device).book(span.1, depth.latency);
            self.push_span(report, lm_device, TaskKind::DepthDecode, span, idx.len());
        }

        for (ids, &i) in sampled.into_iter().zip(idx) {
            let frame = self.exec.next_input(&ids)?;
            let stop = self.config.stop_token;
            let l = &mut self.live[i];
            l.tokens.extend_from_slice(&ids);
            l.token_ready.push(span.1);
            l.lm_ready = span.1;
            l.req.tokens_generated += 1;
            if l.req.tokens_generated >= l.req.target_output_tokens || stop == Some(ids[0]) {
                l.req.stream_ended = true;
            }
            l.next_input = Some(frame);
        }
        Ok(())
    }

    fn run_detok(&mut self, host_end: Micros, batch: &[DetokEntry], report: &mut IterationReport) -> Result<(), EngineError> {
        if batch.is_empty() {
            return Ok(());
        }
        let profile = self.exec.profile().clone();
        let cbs = profile.codebooks as usize;
        let p = self.config.placement;
        let hop = if p.disaggregated() { p.link_latency } else { Micros::ZERO };

        let mut idx = Vec::with_capacity(batch.len());
        let mut frames = Vec::with_capacity(batch.len());
        let mut windows = Vec::with_capacity(batch.len());
        let mut caches: Vec<Option<DetokenizerCache>> = Vec::with_capacity(batch.len());
        let mut sampled_at = Vec::with_capacity(batch.len());
        let mut earliest = host_end;
        for e in batch {
            let i = self.index_of(e.request)?;
            if idx.contains(&i) {
                return Err(EngineError::DependencyViolation(format!(
                    "{} appears twice in one detokenizer batch",
                    e.request
                )));
            }
            let l = &mut self.live[i];
            let w = e.window;
            if w.chunk_index != l.req.chunks_emitted + 1 {
                return Err(EngineError::DependencyViolation(format!(
                    "{}: window for chunk {} but {} chunks already emitted",
                    e.request, w.chunk_index, l.req.chunks_emitted
                )));
            }
            if w.end() > l.req.tokens_generated || w.length == 0 {
                return Err(EngineError::DependencyViolation(format!(
                    "{}: window ends at token {} but only {} sampled",
                    e.request,
                    w.end(),
                    l.req.tokens_generated
                )));
            }
            let ready = l.token_ready[w.end() as usize - 1];
            let slice = &l.tokens[w.start as usize * cbs..w.end() as usize * cbs];
            frames.push(TokenFrame::new(
                Array2::from_shape_vec((w.length as usize, cbs), slice.to_vec())
                    .expect("window slice matches its shape"),
            ));
            windows.push(w);
            caches.push(l.req.detok_cache.take());
            sampled_at.push(ready);
            earliest = earliest
                .max(transfer_disaggregated(ready, hop))
                .max(l.detok_ready);
            idx.push(i);
        }
        let stage = StageBatch {
            kind: StageKind::Detokenize,
            request_ids: batch.iter().map(|e| e.request).collect(),
            frames,
            steps: idx.iter().map(|&i| self.live[i].req.tokens_generated).collect(),
        };
        let out = match self.exec.detokenize(&stage, &windows, caches.clone()) {
            Ok(out) => out,
            Err(e) => {
                for (&i, c) in idx.iter().zip(caches) {
                    self.live[i].req.detok_cache = c;
                }
                return Err(e.into());
            }
        };
        let span = self.device(p.detok_device).book(earliest, out.latency);
        self.push_span(report, p.detok_device, TaskKind::Detokenize, span, idx.len());
        let available = span.1 + hop + self.config.delivery_overhead;

        for ((&i, result), (w, at)) in idx.iter().zip(out.results).zip(windows.iter().zip(sampled_at)) {
            let l = &mut self.live[i];
            l.detok_ready = span.1;
            l.req.detok_cache = Some(result.cache);
            l.req.record_chunk(available, result.audio.duration);
            let is_final = l.done(&profile);
            report.chunks.push(ChunkEvent {
                request: l.req.id,
                index: w.chunk_index,
                available_time: available,
                playback_duration: result.audio.duration,
                new_tokens: result.new_tokens,
                window_sampled_at: at,
                is_final,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SyntheticExecutor;
    use crate::profiles::{builtin_profile, BuiltinProfile};
    use crate::scheduler::PolicyKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn engine(p: BuiltinProfile) -> Engine<SyntheticExecutor> {
        let profile = builtin_profile(p);
        let cfg = EngineConfig::new(PolicyConfig::for_profile(PolicyKind::StreamingAware, &profile));
        Engine::new(SyntheticExecutor::new(profile, 1), cfg).unwrap()
    }

    fn drain(e: &mut Engine<SyntheticExecutor>) {
        let mut now = Micros::ZERO;
        loop {
            match e.poll(now).unwrap() {
                Poll::Ran(_) => {}
                Poll::Idle { wake } => now = wake.unwrap(),
                Poll::Drained => break,
            }
        }
    }

    #[test]
    fn single_request_runs_to_completion() {
        let mut e = engine(BuiltinProfile::CosyLike);
        e.submit(Micros(0), 20, 37).unwrap();
        drain(&mut e);
        let t = e.into_trace();
        assert_eq!(t.requests.len(), 1);
        assert_eq!(t.requests[0].phase, Phase::Finished);
        let news: Vec<u32> = t.chunks.iter().map(|c| c.new_tokens).collect();
        assert_eq!(news, vec![15, 15, 7]);
        assert!(t.chunks.last().unwrap().is_final);
        assert!(t.chunks.iter().rev().skip(1).all(|c| !c.is_final));
    }

    #[test]
    fn rejected_prompts_are_counted() {
        let mut e = engine(BuiltinProfile::CosyLike);
        assert!(e.submit(Micros(0), 5000, 10).is_err());
        assert!(e.submit(Micros(0), 10, 0).is_err());
        assert_eq!(e.into_trace().rejected, 2);
    }

    #[test]
    fn wrong_window_is_a_dependency_violation() {
        let mut e = engine(BuiltinProfile::CosyLike);
        e.submit(Micros(0), 20, 100).unwrap();
        // Prefill, then a few decode steps.
        for _ in 0..4 {
            e.poll(Micros::ZERO).unwrap();
        }
        let record = DecisionRecord {
            iteration: 99,
            host_start: Micros::ZERO,
            admitted: vec![],
            decision: SchedulerDecision {
                lm_batch: vec![],
                detok_batch: vec![DetokEntry {
                    request: RequestId(0),
                    window: WindowSpec {
                        chunk_index: 1,
                        start: 0,
                        length: 15,
                        new_tokens: 15,
                        is_flush: false,
                    },
                }],
                ..Default::default()
            },
        };
        assert!(matches!(e.replay(&record), Err(EngineError::DependencyViolation(_))));
    }

    #[test]
    fn prefill_twice_is_rejected() {
        let mut e = engine(BuiltinProfile::CosyLike);
        e.submit(Micros(0), 20, 100).unwrap();
        e.poll(Micros::ZERO).unwrap();
        let record = DecisionRecord {
            iteration: 1,
            host_start: Micros::ZERO,
            admitted: vec![],
            decision: SchedulerDecision {
                lm_batch: vec![LmEntry {
                    request: RequestId(0),
                    task: LmTask::Prefill,
                }],
                detok_batch: vec![],
                ..Default::default()
            },
        };
        assert!(matches!(e.replay(&record), Err(EngineError::DependencyViolation(_))));
    }

    #[test]
    fn admission_cap_holds_back_arrivals() {
        let profile = builtin_profile(BuiltinProfile::CosyLike);
        let mut cfg = EngineConfig::new(PolicyConfig::for_profile(PolicyKind::Fcfs, &profile));
        cfg.max_live_requests = Some(2);
        let mut e = Engine::new(SyntheticExecutor::new(profile, 1), cfg).unwrap();
        for _ in 0..5 {
            e.submit(Micros(0), 10, 30).unwrap();
        }
        let Poll::Ran(r) = e.poll(Micros::ZERO).unwrap() else { panic!() };
        assert_eq!(r.admitted.len(), 2);
        assert_eq!((e.live_count(), e.pending_count()), (2, 3));
        drain(&mut e);
        let t = e.into_trace();
        assert!(t.requests.iter().all(|r| r.phase == Phase::Finished));
        assert!(t.decisions.iter().all(|d| d.decision.lm_batch.len() <= 2));
    }

    #[test]
    fn depth_profile_fills_all_codebooks() {
        let mut e = engine(BuiltinProfile::DepthLike);
        e.submit(Micros(0), 10, 25).unwrap();
        drain(&mut e);
        let t = e.into_trace();
        assert!(t.device_spans.iter().any(|s| s.kind == TaskKind::DepthDecode));
        assert_eq!(t.chunks.iter().map(|c| c.new_tokens).sum::<u32>(), 25);
    }

    #[test]
    fn routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(route_dp(0, &mut rng), Err(EngineError::NoInstances)));
        assert!((0..100).all(|_| route_dp(1, &mut rng).unwrap() == 0));
        assert!((0..100).all(|_| route_dp(4, &mut rng).unwrap() < 4));
    }

    #[test]
    fn topology_checks() {
        assert!(Topology::Disaggregated { link_latency: -0.001 }.validate().is_err());
        assert!(Topology::DataParallel { instances: 0 }.validate().is_err());
        assert!(Topology::Disaggregated { link_latency: 0.0 }.validate().is_ok());
        assert_eq!(transfer_disaggregated(Micros(10), Micros(5_000)), Micros(5_010));
    }
}
