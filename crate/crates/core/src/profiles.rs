//! Model profiles, the synthetic latency cost model, and chunking rules.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{SamplingParams, StageKind};
use crate::time::Micros;

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("unknown profile {0:?} (expected cosy_like, orpheus_like, step_audio_like or depth_like)")]
    UnknownProfile(String),
    #[error("stage latency needs a batch of at least one request")]
    EmptyBatch,
    #[error("invalid profile {name}: {reason}")]
    Invalid { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinProfile {
    CosyLike,
    OrpheusLike,
    StepAudioLike,
    DepthLike,
}

impl BuiltinProfile {
    pub const ALL: [BuiltinProfile; 4] = [
        BuiltinProfile::CosyLike,
        BuiltinProfile::OrpheusLike,
        BuiltinProfile::StepAudioLike,
        BuiltinProfile::DepthLike,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BuiltinProfile::CosyLike => "cosy_like",
            BuiltinProfile::OrpheusLike => "orpheus_like",
            BuiltinProfile::StepAudioLike => "step_audio_like",
            BuiltinProfile::DepthLike => "depth_like",
        }
    }
}

impl fmt::Display for BuiltinProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BuiltinProfile {
    type Err = ProfileError;
    fn from_str(s: &str) -> Result<Self, ProfileError> {
        BuiltinProfile::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| ProfileError::UnknownProfile(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefillCost {
    pub base_ms: f64,
    pub per_prompt_token_ms: f64,
    pub per_request_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepCost {
    pub base_ms: f64,
    pub per_request_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetokCost {
    pub base_ms: f64,
    pub per_request_ms: f64,
    pub per_window_token_ms: f64,
    /// Constant tokens re-read on every call (reference-audio conditioning).
    #[serde(default)]
    pub ref_window_tokens: u32,
}

/// Affine latency model standing in for device execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub prefill: PrefillCost,
    pub decode: StepCost,
    pub detokenize: DetokCost,
    #[serde(default)]
    pub depth: StepCost,
    /// Host-side work per engine iteration.
    pub host_overhead_ms: f64,
    /// Fixed extra latency on every prefill batch (audio-encoder stand-in).
    #[serde(default)]
    pub preprocess_ms: f64,
}

fn ms(v: f64) -> Micros {
    Micros::from_secs_f64(v / 1e3)
}

impl CostModel {
    pub fn prefill_latency(&self, prompt_tokens: u32, batch_size: u32) -> Micros {
        let p = &self.prefill;
        ms(self.preprocess_ms
            + p.base_ms
            + p.per_prompt_token_ms * f64::from(prompt_tokens)
            + p.per_request_ms * f64::from(batch_size))
    }

    pub fn decode_step_latency(&self, batch_size: u32) -> Micros {
        ms(self.decode.base_ms + self.decode.per_request_ms * f64::from(batch_size))
    }

    pub fn detok_latency(&self, batch_size: u32, window_tokens: u32) -> Micros {
        let d = &self.detokenize;
        ms(d.base_ms
            + d.per_request_ms * f64::from(batch_size)
            + d.per_window_token_ms * f64::from(window_tokens + d.ref_window_tokens))
    }

    pub fn depth_step_latency(&self, batch_size: u32) -> Micros {
        ms(self.depth.base_ms + self.depth.per_request_ms * f64::from(batch_size))
    }

    pub fn host_overhead(&self) -> Micros {
        ms(self.host_overhead_ms)
    }

    fn coefficients(&self) -> [(&'static str, f64); 12] {
        [
            ("prefill.base_ms", self.prefill.base_ms),
            ("prefill.per_prompt_token_ms", self.prefill.per_prompt_token_ms),
            ("prefill.per_request_ms", self.prefill.per_request_ms),
            ("decode.base_ms", self.decode.base_ms),
            ("decode.per_request_ms", self.decode.per_request_ms),
            ("detokenize.base_ms", self.detokenize.base_ms),
            ("detokenize.per_request_ms", self.detokenize.per_request_ms),
            ("detokenize.per_window_token_ms", self.detokenize.per_window_token_ms),
            ("depth.base_ms", self.depth.base_ms),
            ("depth.per_request_ms", self.depth.per_request_ms),
            ("host_overhead_ms", self.host_overhead_ms),
            ("preprocess_ms", self.preprocess_ms),
        ]
    }
}

/// Evaluates the cost model for one stage. `extra` is the total prompt length
/// for prefill and the (padded) window length for detokenization; other
/// stages ignore it. Never returns less than one tick.
pub fn stage_latency(
    cost: &CostModel,
    kind: StageKind,
    batch_size: u32,
    extra: u32,
) -> Result<Micros, ProfileError> {
    if batch_size == 0 {
        return Err(ProfileError::EmptyBatch);
    }
    let t = match kind {
        StageKind::Prefill => cost.prefill_latency(extra, batch_size),
        StageKind::Decode => cost.decode_step_latency(batch_size),
        StageKind::Detokenize => cost.detok_latency(batch_size, extra),
        StageKind::DepthDecode => cost.depth_step_latency(batch_size),
    };
    Ok(t.max(Micros(1)))
}

/// A synthetic stand-in for one speech LM: token geometry, chunking rule,
/// batch limits, sampling defaults and cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub name: String,
    /// Audio tokens per second of speech.
    pub token_rate: f64,
    pub codebooks: u32,
    pub chunk_size: u32,
    #[serde(default)]
    pub overlap: u32,
    #[serde(default)]
    pub lookahead: u32,
    pub stateful_detok: bool,
    #[serde(default)]
    pub has_depth_stage: bool,
    pub max_lm_batch: u32,
    pub max_detok_batch: u32,
    pub max_context: u32,
    pub vocab_size: u32,
    /// Width of continuous input features, when the model takes any.
    #[serde(default)]
    pub feature_dim: Option<u32>,
    pub sampling: SamplingParams,
    pub cost: CostModel,
}

impl ModelProfile {
    /// New audio tokens per steady-state chunk.
    pub fn stride(&self) -> u32 {
        self.chunk_size - self.overlap
    }

    /// Codebooks whose logits come straight out of the backbone.
    pub fn lm_codebooks(&self) -> u32 {
        if self.has_depth_stage {
            1
        } else {
            self.codebooks
        }
    }

    pub fn playback_duration(&self, new_tokens: u32) -> Micros {
        Micros::from_secs_f64(f64::from(new_tokens) / self.token_rate)
    }

    pub fn by_name(name: &str) -> Result<ModelProfile, ProfileError> {
        Ok(builtin_profile(name.parse()?))
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let invalid = |reason: String| {
            Err(ProfileError::Invalid {
                name: self.name.clone(),
                reason,
            })
        };
        if !(self.token_rate.is_finite() && self.token_rate > 0.0) {
            return invalid(format!("token_rate must be positive, got {}", self.token_rate));
        }
        if self.codebooks == 0 {
            return invalid("codebooks must be >= 1".into());
        }
        if self.has_depth_stage && self.codebooks < 2 {
            return invalid("a depth-wise stage needs at least 2 codebooks".into());
        }
        if self.chunk_size <= self.overlap {
            return invalid(format!(
                "chunk_size {} must exceed overlap {}",
                self.chunk_size, self.overlap
            ));
        }
        if self.max_lm_batch == 0 || self.max_detok_batch == 0 {
            return invalid("batch limits must be >= 1".into());
        }
        if self.vocab_size < 2 {
            return invalid("vocab_size must be >= 2".into());
        }
        if self.max_context == 0 {
            return invalid("max_context must be >= 1".into());
        }
        for (key, v) in self.cost.coefficients() {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("cost.{key} must be finite and >= 0, got {v}"));
            }
        }
        if self.cost.decode.base_ms + self.cost.decode.per_request_ms <= 0.0 {
            return invalid("decode latency must be positive".into());
        }
        if self.has_depth_stage && self.cost.depth.base_ms + self.cost.depth.per_request_ms <= 0.0
        {
            return invalid("depth latency must be positive".into());
        }
        self.sampling
            .validate()
            .or_else(|e| invalid(e.to_string()))
    }
}

fn builtin_table() -> &'static BTreeMap<String, ModelProfile> {
    static TABLE: OnceLock<BTreeMap<String, ModelProfile>> = OnceLock::new();
    TABLE.get_or_init(|| {
        toml::from_str(include_str!("profiles.toml")).expect("bundled profiles.toml is valid")
    })
}

pub fn builtin_profile(which: BuiltinProfile) -> ModelProfile {
    builtin_table()
        .get(which.as_str())
        .cloned()
        .expect("every builtin profile is in profiles.toml")
}

/// Which tokens a detokenizer call reads and how many of them are new audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    /// 1-based chunk ordinal this window produces.
    pub chunk_index: u32,
    /// First token position read.
    pub start: u32,
    /// Tokens read, including overlap context and lookahead.
    pub length: u32,
    /// Tokens of audio this chunk advances playback by.
    pub new_tokens: u32,
    /// The last, short chunk of an ended stream.
    pub is_flush: bool,
}

impl WindowSpec {
    /// One past the last token position read.
    pub fn end(&self) -> u32 {
        self.start + self.length
    }
}

/// Tokens already turned into audio after `chunks_emitted` chunks.
pub fn covered_tokens(tokens_generated: u32, chunks_emitted: u32, profile: &ModelProfile) -> u32 {
    if chunks_emitted == 0 {
        0
    } else {
        (profile.chunk_size + (chunks_emitted - 1) * profile.stride()).min(tokens_generated)
    }
}

/// The next detokenizer window, if enough tokens exist.
///
/// Chunk `j` needs `chunk_size + (j-1)*stride + lookahead` tokens; the
/// lookahead is waived once the stream has ended. Chunk 1 carries
/// `chunk_size` new tokens and later chunks `stride`. After the stream ends,
/// whatever is left over goes out as one shorter flush chunk.
pub fn chunk_ready(
    tokens_generated: u32,
    chunks_emitted: u32,
    profile: &ModelProfile,
    stream_ended: bool,
) -> Option<WindowSpec> {
    let j = chunks_emitted + 1;
    let stride = profile.stride();
    let window_end = profile.chunk_size + (j - 1) * stride;
    let start = window_end - profile.chunk_size;
    let new_tokens = if j == 1 { profile.chunk_size } else { stride };

    if tokens_generated >= window_end + profile.lookahead {
        return Some(WindowSpec {
            chunk_index: j,
            start,
            length: profile.chunk_size + profile.lookahead,
            new_tokens,
            is_flush: false,
        });
    }
    if !stream_ended {
        return None;
    }
    if tokens_generated >= window_end {
        // Lookahead waived at end of stream.
        return Some(WindowSpec {
            chunk_index: j,
            start,
            length: tokens_generated - start,
            new_tokens,
            is_flush: false,
        });
    }
    let covered = covered_tokens(tokens_generated, chunks_emitted, profile);
    if tokens_generated <= covered {
        return None;
    }
    let start = covered.saturating_sub(profile.overlap);
    Some(WindowSpec {
        chunk_index: j,
        start,
        length: tokens_generated - start,
        new_tokens: tokens_generated - covered,
        is_flush: true,
    })
}

/// Checks that a window is one `chunk_ready` could have produced.
pub fn check_window(spec: &WindowSpec, profile: &ModelProfile) -> Result<(), String> {
    let full = profile.chunk_size + profile.lookahead;
    if spec.chunk_index == 0 {
        return Err("chunk index starts at 1".into());
    }
    if spec.new_tokens == 0 || spec.new_tokens > spec.length {
        return Err(format!(
            "new_tokens {} must lie in 1..={}",
            spec.new_tokens, spec.length
        ));
    }
    if spec.is_flush {
        if spec.length > full {
            return Err(format!("flush window of {} exceeds {}", spec.length, full));
        }
        return Ok(());
    }
    let expected_start = (spec.chunk_index - 1) * profile.stride();
    let expected_new = if spec.chunk_index == 1 {
        profile.chunk_size
    } else {
        profile.stride()
    };
    if spec.start != expected_start {
        return Err(format!(
            "chunk {} must start at {}, got {}",
            spec.chunk_index, expected_start, spec.start
        ));
    }
    if spec.new_tokens != expected_new {
        return Err(format!(
            "chunk {} must carry {} new tokens, got {}",
            spec.chunk_index, expected_new, spec.new_tokens
        ));
    }
    if spec.length < profile.chunk_size || spec.length > full {
        return Err(format!(
            "window of {} tokens outside {}..={}",
            spec.length, profile.chunk_size, full
        ));
    }
    Ok(())
}
