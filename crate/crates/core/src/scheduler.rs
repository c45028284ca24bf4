//! Per-iteration batch selection.
//!
//! Requests are classified as Startup (no audio yet), AtRisk (next chunk due
//! within `risk_threshold`) or Slack. The streaming-aware policy fills both
//! batches in that class order and defers detokenization of Slack requests
//! that can afford to wait. FCFS and throughput-max fill in arrival order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{ModelProfile, WindowSpec};
use crate::request::{Phase, Request, RequestId};
use crate::time::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[serde(alias = "streaming")]
    StreamingAware,
    Fcfs,
    #[serde(alias = "throughput")]
    ThroughputMax,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [
        PolicyKind::StreamingAware,
        PolicyKind::Fcfs,
        PolicyKind::ThroughputMax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::StreamingAware => "streaming_aware",
            PolicyKind::Fcfs => "fcfs",
            PolicyKind::ThroughputMax => "throughput_max",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, PolicyError> {
        match s {
            "streaming_aware" | "streaming" => Ok(PolicyKind::StreamingAware),
            "fcfs" => Ok(PolicyKind::Fcfs),
            "throughput_max" | "throughput" => Ok(PolicyKind::ThroughputMax),
            other => Err(PolicyError::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("unknown policy {0:?} (expected streaming_aware, fcfs or throughput_max)")]
    UnknownPolicy(String),
    #[error("invalid policy config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    /// Seconds of slack at or below which a request counts as at risk.
    pub risk_threshold: f64,
    /// Most Startup requests admitted to one LM batch.
    pub startup_concurrency_limit: u32,
    pub max_lm_batch: u32,
    pub max_detok_batch: u32,
    /// Seconds a Slack detokenization may be postponed: it is deferred only
    /// if the request would still be Slack this far in the future.
    pub deferral_horizon: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: PolicyKind::StreamingAware,
            risk_threshold: 1.0,
            startup_concurrency_limit: 8,
            max_lm_batch: 128,
            max_detok_batch: 128,
            deferral_horizon: 0.1,
        }
    }
}

impl PolicyConfig {
    /// Defaults with batch caps taken from `profile`.
    pub fn for_profile(policy: PolicyKind, profile: &ModelProfile) -> Self {
        PolicyConfig {
            policy,
            max_lm_batch: profile.max_lm_batch,
            max_detok_batch: profile.max_detok_batch,
            ..PolicyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.risk_threshold.is_finite() && self.risk_threshold > 0.0) {
            return Err(PolicyError::Invalid("risk_threshold must be > 0".into()));
        }
        if !(self.deferral_horizon.is_finite() && self.deferral_horizon >= 0.0) {
            return Err(PolicyError::Invalid("deferral_horizon must be >= 0".into()));
        }
        if self.startup_concurrency_limit == 0 {
            return Err(PolicyError::Invalid("startup_concurrency_limit must be >= 1".into()));
        }
        if self.max_lm_batch == 0 || self.max_detok_batch == 0 {
            return Err(PolicyError::Invalid("batch caps must be >= 1".into()));
        }
        Ok(())
    }

    fn risk(&self) -> i64 {
        Micros::from_secs_f64(self.risk_threshold).0 as i64
    }

    fn horizon(&self) -> i64 {
        Micros::from_secs_f64(self.deferral_horizon).0 as i64
    }
}

/// Ordered from most to least urgent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityClass {
    Startup,
    AtRisk,
    Slack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmTask {
    Prefill,
    Decode,
}

/// What the engine offers the scheduler for one live request.
#[derive(Debug, Clone, Copy)]
pub struct QueueEntry<'a> {
    pub request: &'a Request,
    /// LM work the request can take this iteration, if any.
    pub lm_task: Option<LmTask>,
    /// The next detokenizer window, if fully generated.
    pub ready_window: Option<WindowSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmEntry {
    pub request: RequestId,
    pub task: LmTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetokEntry {
    pub request: RequestId,
    pub window: WindowSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub request: RequestId,
    pub class: PriorityClass,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerDecision {
    pub lm_batch: Vec<LmEntry>,
    pub detok_batch: Vec<DetokEntry>,
    /// Class of every queued request at decision time.
    pub classes: Vec<ClassEntry>,
    /// Requests that had LM work available.
    #[serde(default)]
    pub lm_eligible: u32,
    /// Requests that had a ready window.
    #[serde(default)]
    pub detok_eligible: u32,
}

impl SchedulerDecision {
    pub fn is_empty(&self) -> bool {
        self.lm_batch.is_empty() && self.detok_batch.is_empty()
    }
}

/// One engine iteration in replayable form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub iteration: u64,
    pub host_start: Micros,
    /// Requests admitted at the start of this iteration.
    pub admitted: Vec<RequestId>,
    #[serde(flatten)]
    pub decision: SchedulerDecision,
}

/// Playback-end bound for the next chunk: `t1 + sum of emitted durations`.
pub fn soft_deadline(request: &Request) -> Option<Micros> {
    request.first_chunk_time.map(|t1| t1 + request.audio_emitted)
}

/// Signed microseconds until the soft deadline.
fn slack(request: &Request, now: Micros) -> Option<i64> {
    soft_deadline(request).map(|d| d.signed_diff(now))
}

pub fn classify(request: &Request, now: Micros, config: &PolicyConfig) -> PriorityClass {
    match slack(request, now) {
        None => PriorityClass::Startup,
        Some(s) if s <= config.risk() => PriorityClass::AtRisk,
        Some(_) => PriorityClass::Slack,
    }
}

/// Whether a Slack request's detokenization can wait without it becoming at
/// risk inside the deferral horizon.
fn deferrable(request: &Request, now: Micros, config: &PolicyConfig) -> bool {
    match slack(request, now) {
        Some(s) => s - config.horizon() > config.risk(),
        None => false,
    }
}

/// Earliest time a deferred Slack window stops being deferrable.
pub fn deferral_release_time(request: &Request, config: &PolicyConfig) -> Option<Micros> {
    let deadline = soft_deadline(request)?.0 as i64;
    Some(Micros((deadline - config.risk() - config.horizon()).max(0) as u64 + 1))
}

fn arrival_order(queue: &[QueueEntry<'_>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..queue.len()).collect();
    idx.sort_by_key(|&i| (queue[i].request.arrival_time, queue[i].request.id));
    idx
}

fn eligible(queue: &[QueueEntry<'_>]) -> (u32, u32) {
    let lm = queue.iter().filter(|e| e.lm_task.is_some()).count() as u32;
    let detok = queue.iter().filter(|e| e.ready_window.is_some()).count() as u32;
    (lm, detok)
}

fn classes_of(queue: &[QueueEntry<'_>], order: &[usize], now: Micros, config: &PolicyConfig) -> Vec<ClassEntry> {
    order
        .iter()
        .map(|&i| ClassEntry {
            request: queue[i].request.id,
            class: classify(queue[i].request, now, config),
        })
        .collect()
}

/// Arrival-order fill of both batches up to their caps.
fn fill_in_arrival_order(queue: &[QueueEntry<'_>], now: Micros, config: &PolicyConfig) -> SchedulerDecision {
    let order = arrival_order(queue);
    let lm_batch = order
        .iter()
        .filter_map(|&i| {
            queue[i].lm_task.map(|task| LmEntry {
                request: queue[i].request.id,
                task,
            })
        })
        .take(config.max_lm_batch as usize)
        .collect();
    let detok_batch = order
        .iter()
        .filter_map(|&i| {
            queue[i].ready_window.map(|window| DetokEntry {
                request: queue[i].request.id,
                window,
            })
        })
        .take(config.max_detok_batch as usize)
        .collect();
    let (lm_eligible, detok_eligible) = eligible(queue);
    SchedulerDecision {
        lm_batch,
        detok_batch,
        classes: classes_of(queue, &order, now, config),
        lm_eligible,
        detok_eligible,
    }
}

pub fn schedule_fcfs(queue: &[QueueEntry<'_>], now: Micros, config: &PolicyConfig) -> SchedulerDecision {
    fill_in_arrival_order(queue, now, config)
}

pub fn schedule_throughput(queue: &[QueueEntry<'_>], now: Micros, config: &PolicyConfig) -> SchedulerDecision {
    fill_in_arrival_order(queue, now, config)
}

pub fn schedule_streaming(queue: &[QueueEntry<'_>], now: Micros, config: &PolicyConfig) -> SchedulerDecision {
    let order = arrival_order(queue);
    let classes = classes_of(queue, &order, now, config);
    let mut ranked: Vec<(PriorityClass, usize)> =
        order.iter().zip(&classes).map(|(&i, c)| (c.class, i)).collect();
    // Stable sort keeps arrival order within a class.
    ranked.sort_by_key(|&(c, _)| c);

    // Deferrable Slack windows only ride along when the detokenizer runs
    // anyway, so its fixed per-call cost is shared.
    let mut due = Vec::new();
    let mut optional = Vec::new();
    for &(class, i) in &ranked {
        let e = &queue[i];
        let Some(window) = e.ready_window else { continue };
        let entry = DetokEntry {
            request: e.request.id,
            window,
        };
        if class == PriorityClass::Slack && deferrable(e.request, now, config) {
            optional.push(entry);
        } else {
            due.push(entry);
        }
    }
    let mut detok_batch = Vec::new();
    if !due.is_empty() {
        detok_batch.extend(due.into_iter().chain(optional).take(config.max_detok_batch as usize));
    }

    let mut lm_batch = Vec::new();
    let mut startups = 0;
    for &(class, i) in &ranked {
        if lm_batch.len() == config.max_lm_batch as usize {
            break;
        }
        let e = &queue[i];
        let Some(task) = e.lm_task else { continue };
        if class == PriorityClass::Startup {
            if startups == config.startup_concurrency_limit {
                continue;
            }
            startups += 1;
        }
        lm_batch.push(LmEntry {
            request: e.request.id,
            task,
        });
    }

    let (lm_eligible, detok_eligible) = eligible(queue);
    SchedulerDecision {
        lm_batch,
        detok_batch,
        classes,
        lm_eligible,
        detok_eligible,
    }
}

pub fn schedule(queue: &[QueueEntry<'_>], now: Micros, config: &PolicyConfig) -> SchedulerDecision {
    match config.policy {
        PolicyKind::StreamingAware => schedule_streaming(queue, now, config),
        PolicyKind::Fcfs => schedule_fcfs(queue, now, config),
        PolicyKind::ThroughputMax => schedule_throughput(queue, now, config),
    }
}

/// The policy interface the engine drives once per iteration.
pub trait SchedulingPolicy: Send {
    fn config(&self) -> &PolicyConfig;

    fn decide(&mut self, queue: &[QueueEntry<'_>], now: Micros) -> SchedulerDecision;

    /// Earliest future time a decision could change with no new arrivals and
    /// no device progress (a deferred window becoming due).
    fn next_wakeup(&self, queue: &[QueueEntry<'_>], now: Micros) -> Option<Micros> {
        if self.config().policy != PolicyKind::StreamingAware {
            return None;
        }
        queue
            .iter()
            .filter(|e| e.ready_window.is_some() && e.request.phase == Phase::SteadyState)
            .filter_map(|e| deferral_release_time(e.request, self.config()))
            .map(|t| t.max(now))
            .min()
    }
}

/// Stateless policy driven purely by its config.
#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        Ok(Policy { config })
    }
}

impl SchedulingPolicy for Policy {
    fn config(&self) -> &PolicyConfig {
        &self.config
    }

    fn decide(&mut self, queue: &[QueueEntry<'_>], now: Micros) -> SchedulerDecision {
        schedule(queue, now, &self.config)
    }
}
