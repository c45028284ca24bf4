//! Seeded synthetic executor: real sampling over hash-derived logits, with
//! latencies taken from the profile's cost model.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    sample, AudioChunk, DepthOutput, DetokOutput, DetokResult, DetokenizerCache, Executor,
    LmOutput, ModelError, SamplingState, StageBatch, StageKind, TokenFrame,
};
use crate::profiles::{check_window, stage_latency, ModelProfile, WindowSpec};
use crate::request::{Phase, Request, RequestId};
use crate::time::Micros;

/// Bytes of activation state a stateful detokenizer keeps per window token.
const STATE_BYTES_PER_TOKEN: usize = 256;

#[derive(Debug, Clone)]
pub struct SyntheticExecutor {
    profile: ModelProfile,
    seed: u64,
}

impl SyntheticExecutor {
    pub fn new(profile: ModelProfile, seed: u64) -> Self {
        SyntheticExecutor { profile, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Deterministic logits for `(request, step, codebook, context)`.
    fn logits(&self, id: RequestId, step: u32, codebook: u32, context: u32) -> Vec<f32> {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&id.0.to_le_bytes());
        key[16..20].copy_from_slice(&step.to_le_bytes());
        key[20..24].copy_from_slice(&codebook.to_le_bytes());
        key[24..28].copy_from_slice(&context.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        (0..self.profile.vocab_size)
            .map(|_| rng.random_range(-4.0f32..4.0))
            .collect()
    }

    fn check_kind(batch: &StageBatch, allowed: &[StageKind], expected: &'static str) -> Result<(), ModelError> {
        if allowed.contains(&batch.kind) {
            Ok(())
        } else {
            Err(ModelError::WrongStage {
                got: batch.kind,
                expected,
            })
        }
    }
}

fn latency(profile: &ModelProfile, kind: StageKind, n: usize, extra: u32) -> Result<Micros, ModelError> {
    stage_latency(&profile.cost, kind, n as u32, extra).map_err(|_| ModelError::EmptyBatch(kind))
}

fn fingerprint(window: &TokenFrame, cache: Option<&DetokenizerCache>, new_tokens: u32) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3);
    for &t in window.ids.iter() {
        mix(u64::from(t));
    }
    mix(u64::from(new_tokens));
    if let Some(c) = cache {
        mix(u64::from(c.calls()));
        for &t in c.carried() {
            mix(u64::from(t));
        }
    }
    h
}

impl Executor for SyntheticExecutor {
    fn profile(&self) -> &ModelProfile {
        &self.profile
    }

    fn preprocess(
        &self,
        id: RequestId,
        arrival_time: Micros,
        prompt_tokens: u32,
        target_output_tokens: u32,
    ) -> Result<Request, ModelError> {
        if prompt_tokens == 0 {
            return Err(ModelError::EmptyPrompt);
        }
        if target_output_tokens == 0 {
            return Err(ModelError::EmptyOutput);
        }
        if prompt_tokens > self.profile.max_context {
            return Err(ModelError::PromptTooLong {
                got: prompt_tokens,
                limit: self.profile.max_context,
            });
        }
        Ok(Request {
            id,
            arrival_time,
            prompt_tokens,
            target_output_tokens,
            phase: Phase::Startup,
            tokens_generated: 0,
            chunks_emitted: 0,
            first_chunk_time: None,
            audio_emitted: Micros::ZERO,
            stream_ended: false,
            sampling_state: SamplingState::new(
                self.profile.codebooks as usize,
                self.profile.sampling.penalty_window,
                self.seed,
                id,
            ),
            detok_cache: Some(DetokenizerCache::new(id)),
        })
    }

    fn lm_forward(&self, batch: &StageBatch) -> Result<LmOutput, ModelError> {
        Self::check_kind(batch, &[StageKind::Prefill, StageKind::Decode], "prefill or decode")?;
        batch.validate(&self.profile)?;
        let mut prompt_total = 0u32;
        for f in &batch.frames {
            if batch.kind == StageKind::Decode && f.positions() != 1 {
                return Err(ModelError::MalformedBatch(format!(
                    "decode frame has {} positions",
                    f.positions()
                )));
            }
            prompt_total += f.positions() as u32;
        }
        let cbs = self.profile.lm_codebooks();
        let logits = batch
            .request_ids
            .iter()
            .zip(&batch.steps)
            .map(|(&id, &step)| (0..cbs).map(|cb| self.logits(id, step, cb, 0)).collect())
            .collect();
        let extra = if batch.kind == StageKind::Prefill { prompt_total } else { 0 };
        Ok(LmOutput {
            logits,
            latency: latency(&self.profile, batch.kind, batch.len(), extra)?,
        })
    }

    fn depth_forward(
        &self,
        batch: &StageBatch,
        states: &mut [&mut SamplingState],
    ) -> Result<DepthOutput, ModelError> {
        if !self.profile.has_depth_stage {
            return Err(ModelError::NotSupported);
        }
        Self::check_kind(batch, &[StageKind::DepthDecode], "depth decode")?;
        batch.validate(&self.profile)?;
        if states.len() != batch.len() {
            return Err(ModelError::MalformedBatch(format!(
                "{} requests, {} sampling states",
                batch.len(),
                states.len()
            )));
        }
        let mut tokens = Vec::with_capacity(batch.len());
        for (i, state) in states.iter_mut().enumerate() {
            let id = batch.request_ids[i];
            let step = batch.steps[i];
            let mut prev = batch.frames[i].ids[[0, 0]];
            let mut out = Vec::with_capacity(self.profile.codebooks as usize - 1);
            for cb in 1..self.profile.codebooks {
                let logits = self.logits(id, step, cb, prev + 1);
                prev = sample(&logits, &self.profile.sampling, state, cb as usize)?;
                out.push(prev);
            }
            tokens.push(out);
        }
        Ok(DepthOutput {
            tokens,
            latency: latency(&self.profile, StageKind::DepthDecode, batch.len(), 0)?,
        })
    }

    fn next_input(&self, ids: &[u32]) -> Result<TokenFrame, ModelError> {
        let cbs = self.profile.codebooks as usize;
        if ids.len() != cbs {
            return Err(ModelError::CodebookMismatch {
                expected: cbs,
                got: ids.len(),
            });
        }
        let frame = Array2::from_shape_vec((1, cbs), ids.to_vec())
            .map_err(|e| ModelError::MalformedBatch(e.to_string()))?;
        Ok(TokenFrame {
            ids: frame,
            masks: Some(Array2::from_elem((1, cbs), true)),
            features: self
                .profile
                .feature_dim
                .map(|d| Array2::zeros((1, d as usize))),
        })
    }

    fn detokenize(
        &self,
        batch: &StageBatch,
        windows: &[WindowSpec],
        caches: Vec<Option<DetokenizerCache>>,
    ) -> Result<DetokOutput, ModelError> {
        Self::check_kind(batch, &[StageKind::Detokenize], "detokenize")?;
        batch.validate(&self.profile)?;
        if windows.len() != batch.len() || caches.len() != batch.len() {
            return Err(ModelError::MalformedBatch(format!(
                "{} requests, {} windows, {} caches",
                batch.len(),
                windows.len(),
                caches.len()
            )));
        }
        let context = (self.profile.overlap + self.profile.lookahead) as usize;
        let mut results = Vec::with_capacity(batch.len());
        let mut padded = 0u32;
        for (i, (spec, cache)) in windows.iter().zip(caches).enumerate() {
            let id = batch.request_ids[i];
            let frame = &batch.frames[i];
            check_window(spec, &self.profile).map_err(ModelError::WindowRuleViolation)?;
            if frame.positions() != spec.length as usize {
                return Err(ModelError::WindowRuleViolation(format!(
                    "{id}: window spec says {} tokens, frame holds {}",
                    spec.length,
                    frame.positions()
                )));
            }
            let cache = match cache {
                Some(c) if c.owner() != id => {
                    return Err(ModelError::CacheOwnerMismatch {
                        owner: c.owner(),
                        request: id,
                    })
                }
                Some(c) => c,
                None if self.profile.stateful_detok => return Err(ModelError::CacheMissing(id)),
                None => DetokenizerCache::new(id),
            };
            padded = padded.max(spec.length);
            let fp = fingerprint(frame, self.profile.stateful_detok.then_some(&cache), spec.new_tokens);
            let tail = spec.length as usize - context.min(spec.length as usize);
            let carried: Vec<u32> = frame.ids.column(0).iter().skip(tail).copied().collect();
            let extra_state = if self.profile.stateful_detok {
                spec.new_tokens as usize * STATE_BYTES_PER_TOKEN
            } else {
                0
            };
            results.push(DetokResult {
                audio: AudioChunk::silence(self.profile.playback_duration(spec.new_tokens), fp),
                new_tokens: spec.new_tokens,
                cache: cache.advance(carried, extra_state),
            });
        }
        Ok(DetokOutput {
            results,
            latency: latency(&self.profile, StageKind::Detokenize, batch.len(), padded)?,
        })
    }
}
