//! The model-execution interface.
//!
//! Engine and scheduler code only talk to a model through [`Executor`]:
//! preprocess, LM forward, sampling, an optional depth-wise stage, and chunked
//! detokenization. Everything model specific (codebook layout, window rules,
//! detokenizer cache contents) stays behind this boundary.

mod detok;
mod sampling;
mod synthetic;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use detok::{AudioChunk, DetokenizerCache, PCM_SAMPLE_RATE};
pub use sampling::{sample, sampling_distribution, SamplingParams, SamplingState};
pub use synthetic::SyntheticExecutor;

use crate::profiles::{ModelProfile, WindowSpec};
use crate::request::{Request, RequestId};
use crate::time::Micros;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("prompt of {got} tokens exceeds the context limit of {limit}")]
    PromptTooLong { got: u32, limit: u32 },
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("output length must be at least one token")]
    EmptyOutput,
    #[error("{kind:?} batch of {got} exceeds the limit of {limit}")]
    BatchTooLarge { kind: StageKind, got: usize, limit: usize },
    #[error("empty {0:?} batch")]
    EmptyBatch(StageKind),
    #[error("stage {got:?} is not valid here (expected {expected})")]
    WrongStage { got: StageKind, expected: &'static str },
    #[error("expected {expected} codebooks, got {got}")]
    CodebookMismatch { expected: usize, got: usize },
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
    #[error("window violates the chunk rule: {0}")]
    WindowRuleViolation(String),
    #[error("detokenizer cache missing for {0}")]
    CacheMissing(RequestId),
    #[error("detokenizer cache of {owner} passed for {request}")]
    CacheOwnerMismatch { owner: RequestId, request: RequestId },
    #[error("profile has no depth-wise stage")]
    NotSupported,
    #[error("every candidate token has zero probability")]
    DegenerateDistribution,
    #[error("logits contain NaN or +inf")]
    NonFiniteLogits,
    #[error("invalid sampling parameters: {0}")]
    InvalidSamplingParams(String),
}

/// Token IDs, masks and continuous features for a span of positions.
///
/// `ids` is `[positions x codebooks]`; `masks`, when present, has the same
/// shape. What masks and features mean is up to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFrame {
    pub ids: Array2<u32>,
    pub masks: Option<Array2<bool>>,
    pub features: Option<Array2<f32>>,
}

impl TokenFrame {
    pub fn new(ids: Array2<u32>) -> Self {
        TokenFrame {
            ids,
            masks: None,
            features: None,
        }
    }

    pub fn positions(&self) -> usize {
        self.ids.nrows()
    }

    pub fn codebooks(&self) -> usize {
        self.ids.ncols()
    }

    /// Shape checks against `codebooks`.
    pub fn validate(&self, codebooks: usize) -> Result<(), ModelError> {
        if self.codebooks() != codebooks {
            return Err(ModelError::CodebookMismatch {
                expected: codebooks,
                got: self.codebooks(),
            });
        }
        if let Some(m) = &self.masks {
            if m.dim() != self.ids.dim() {
                return Err(ModelError::MalformedBatch(format!(
                    "mask shape {:?} differs from ids {:?}",
                    m.dim(),
                    self.ids.dim()
                )));
            }
        }
        if let Some(f) = &self.features {
            if f.nrows() != self.positions() {
                return Err(ModelError::MalformedBatch(format!(
                    "features cover {} positions, ids {}",
                    f.nrows(),
                    self.positions()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Prefill,
    Decode,
    Detokenize,
    DepthDecode,
}

/// A batch of requests that run one stage together.
#[derive(Debug, Clone)]
pub struct StageBatch {
    pub kind: StageKind,
    pub request_ids: Vec<RequestId>,
    pub frames: Vec<TokenFrame>,
    /// Output position of each request (tokens generated so far).
    pub steps: Vec<u32>,
}

impl StageBatch {
    pub fn len(&self) -> usize {
        self.request_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.request_ids.is_empty()
    }

    pub fn validate(&self, profile: &ModelProfile) -> Result<(), ModelError> {
        if self.is_empty() {
            return Err(ModelError::EmptyBatch(self.kind));
        }
        if self.frames.len() != self.len() || self.steps.len() != self.len() {
            return Err(ModelError::MalformedBatch(format!(
                "{} ids, {} frames, {} steps",
                self.len(),
                self.frames.len(),
                self.steps.len()
            )));
        }
        let limit = match self.kind {
            StageKind::Prefill | StageKind::Decode | StageKind::DepthDecode => {
                profile.max_lm_batch
            }
            StageKind::Detokenize => profile.max_detok_batch,
        } as usize;
        if self.len() > limit {
            return Err(ModelError::BatchTooLarge {
                kind: self.kind,
                got: self.len(),
                limit,
            });
        }
        for f in &self.frames {
            f.validate(profile.codebooks as usize)?;
        }
        Ok(())
    }
}

/// Logits for one LM forward pass, `[request][codebook][vocab]`.
#[derive(Debug, Clone)]
pub struct LmOutput {
    pub logits: Vec<Vec<Vec<f32>>>,
    pub latency: Micros,
}

#[derive(Debug, Clone)]
pub struct DepthOutput {
    /// Codebooks `1..n` for each request, in batch order.
    pub tokens: Vec<Vec<u32>>,
    pub latency: Micros,
}

#[derive(Debug, Clone)]
pub struct DetokResult {
    pub audio: AudioChunk,
    pub new_tokens: u32,
    pub cache: DetokenizerCache,
}

#[derive(Debug, Clone)]
pub struct DetokOutput {
    pub results: Vec<DetokResult>,
    pub latency: Micros,
}

/// Implementations must be callable from several engine loops at once for
/// different requests; per-request state is always passed in by the caller.
pub trait Executor: Send + Sync {
    fn profile(&self) -> &ModelProfile;

    /// Builds a Startup-phase request with a fresh sampling state and
    /// detokenizer cache.
    fn preprocess(
        &self,
        id: RequestId,
        arrival_time: Micros,
        prompt_tokens: u32,
        target_output_tokens: u32,
    ) -> Result<Request, ModelError>;

    /// Runs a Prefill or Decode batch.
    fn lm_forward(&self, batch: &StageBatch) -> Result<LmOutput, ModelError>;

    /// Fills codebooks `1..n` after the backbone sampled codebook 0.
    fn depth_forward(
        &self,
        batch: &StageBatch,
        states: &mut [&mut SamplingState],
    ) -> Result<DepthOutput, ModelError>;

    /// The LM input frame for the next step given one sampled id per codebook.
    fn next_input(&self, ids: &[u32]) -> Result<TokenFrame, ModelError>;

    /// Converts token windows to audio. `batch.frames` hold the window tokens
    /// and `windows` the chunk rule each one follows. `caches` is consumed and
    /// the updated caches come back in the results, in batch order.
    fn detokenize(
        &self,
        batch: &StageBatch,
        windows: &[WindowSpec],
        caches: Vec<Option<DetokenizerCache>>,
    ) -> Result<DetokOutput, ModelError>;
}
