//! Request lifecycle state.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{DetokenizerCache, SamplingState};
use crate::time::Micros;

/// Identifier of one generation job. Assigned in arrival order by the engine.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "req-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// No audio chunk delivered yet; time-to-first-audio critical.
    Startup,
    /// At least one chunk delivered; viability critical.
    SteadyState,
    Finished,
}

/// Full lifecycle state of one generation job.
///
/// `phase == Startup` exactly when `first_chunk_time` is unset.
#[derive(Debug, Clone)]
pub struct Request {
    pub id: RequestId,
    pub arrival_time: Micros,
    pub prompt_tokens: u32,
    pub target_output_tokens: u32,
    pub phase: Phase,
    pub tokens_generated: u32,
    pub chunks_emitted: u32,
    pub first_chunk_time: Option<Micros>,
    /// Sum of playback durations of all emitted chunks.
    pub audio_emitted: Micros,
    /// Set once the stream has produced its last LM token (target reached or
    /// a stop token sampled).
    pub stream_ended: bool,
    pub sampling_state: SamplingState,
    /// Taken by the engine while a detokenizer call is in flight.
    pub detok_cache: Option<DetokenizerCache>,
}

impl Request {
    pub fn is_live(&self) -> bool {
        self.phase != Phase::Finished
    }

    /// Records a delivered chunk and moves the phase forward.
    pub fn record_chunk(&mut self, available_time: Micros, playback: Micros) {
        if self.first_chunk_time.is_none() {
            self.first_chunk_time = Some(available_time);
            self.phase = Phase::SteadyState;
        }
        self.chunks_emitted += 1;
        self.audio_emitted += playback;
    }

    pub fn snapshot(&self) -> RequestRecord {
        RequestRecord {
            id: self.id,
            arrival_time: self.arrival_time,
            prompt_tokens: self.prompt_tokens,
            target_output_tokens: self.target_output_tokens,
            phase: self.phase,
            tokens_generated: self.tokens_generated,
            chunks_emitted: self.chunks_emitted,
            first_chunk_time: self.first_chunk_time,
            token_digest: self.sampling_state.digest(),
        }
    }
}

/// Serializable snapshot of a request, taken when it leaves the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub arrival_time: Micros,
    pub prompt_tokens: u32,
    pub target_output_tokens: u32,
    pub phase: Phase,
    pub tokens_generated: u32,
    pub chunks_emitted: u32,
    pub first_chunk_time: Option<Micros>,
    /// Rolling hash of every sampled token id, for cross-mode comparisons.
    pub token_digest: u64,
}
