//! Logit processing and token sampling.
//!
//! Order of operations: repetition penalty, temperature (0 means greedy),
//! top-k, top-p, renormalize, draw.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::request::RequestId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    /// `None` disables top-k.
    #[serde(default)]
    pub top_k: Option<u32>,
    #[serde(default = "one")]
    pub top_p: f64,
    #[serde(default = "one")]
    pub repetition_penalty: f64,
    /// Number of most recent tokens (per codebook) the penalty looks at.
    #[serde(default = "default_window")]
    pub penalty_window: u32,
}

fn one() -> f64 {
    1.0
}

fn default_window() -> u32 {
    64
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_k: None,
            top_p: 1.0,
            repetition_penalty: 1.0,
            penalty_window: default_window(),
        }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        SamplingParams {
            temperature: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::InvalidSamplingParams(what.to_string()));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be finite and >= 0");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be >= 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty >= 1.0) {
            return bad("repetition_penalty must be >= 1");
        }
        Ok(())
    }
}

/// Per-request sampling cache: the penalty window and a seeded generator.
#[derive(Debug, Clone)]
pub struct SamplingState {
    recent: Vec<VecDeque<u32>>,
    window: usize,
    rng: ChaCha8Rng,
    digest: u64,
}

const DIGEST_SEED: u64 = 0xcbf2_9ce4_8422_2325;
const DIGEST_PRIME: u64 = 0x0000_0100_0000_01b3;

impl SamplingState {
    /// A fresh state whose generator stream is keyed by `(seed, request)`.
    pub fn new(codebooks: usize, window: u32, seed: u64, request: RequestId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(request.0);
        SamplingState {
            recent: vec![VecDeque::with_capacity(window as usize); codebooks.max(1)],
            window: window as usize,
            rng,
            digest: DIGEST_SEED,
        }
    }

    pub fn recent(&self, codebook: usize) -> impl Iterator<Item = u32> + '_ {
        self.recent[codebook].iter().copied()
    }

    pub fn recent_len(&self, codebook: usize) -> usize {
        self.recent[codebook].len()
    }

    /// Rolling hash of every token pushed so far.
    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn push(&mut self, codebook: usize, token: u32) {
        if self.window > 0 {
            let w = &mut self.recent[codebook];
            if w.len() == self.window {
                w.pop_front();
            }
            w.push_back(token);
        }
        self.digest = (self.digest ^ u64::from(token)).wrapping_mul(DIGEST_PRIME);
    }

    fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

/// The truncated, renormalized candidate distribution sampling draws from,
/// as `(token, probability)` pairs sorted by decreasing probability.
///
/// Greedy decoding (temperature 0) yields the single argmax candidate.
pub fn sampling_distribution(
    logits: &[f32],
    params: &SamplingParams,
    recent: impl IntoIterator<Item = u32>,
) -> Result<Vec<(u32, f64)>, ModelError> {
    if logits.is_empty() {
        return Err(ModelError::DegenerateDistribution);
    }
    if logits.iter().any(|l| l.is_nan() || *l == f32::INFINITY) {
        return Err(ModelError::NonFiniteLogits);
    }
    let mut work: Vec<f64> = logits.iter().map(|&l| f64::from(l)).collect();

    if params.repetition_penalty != 1.0 {
        let mut seen = vec![false; work.len()];
        for t in recent {
            let t = t as usize;
            if t < work.len() && !seen[t] {
                seen[t] = true;
                work[t] = if work[t] > 0.0 {
                    work[t] / params.repetition_penalty
                } else {
                    work[t] * params.repetition_penalty
                };
            }
        }
    }

    if params.temperature == 0.0 {
        let (best, &v) = work
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        if v == f64::NEG_INFINITY {
            return Err(ModelError::DegenerateDistribution);
        }
        return Ok(vec![(best as u32, 1.0)]);
    }

    let inv_t = 1.0 / params.temperature;
    let mut order: Vec<(u32, f64)> = work
        .iter()
        .enumerate()
        .map(|(i, &l)| (i as u32, l * inv_t))
        .collect();
    // Stable: equal logits keep token order.
    order.sort_by(|a, b| b.1.total_cmp(&a.1));

    if let Some(k) = params.top_k {
        order.truncate(k as usize);
    }

    let max = order[0].1;
    if max == f64::NEG_INFINITY {
        return Err(ModelError::DegenerateDistribution);
    }
    let mut total = 0.0;
    for entry in order.iter_mut() {
        entry.1 = (entry.1 - max).exp();
        total += entry.1;
    }
    for entry in order.iter_mut() {
        entry.1 /= total;
    }

    if params.top_p < 1.0 {
        let mut cumulative = 0.0;
        let mut keep = order.len();
        for (i, entry) in order.iter().enumerate() {
            cumulative += entry.1;
            if cumulative >= params.top_p {
                keep = i + 1;
                break;
            }
        }
        order.truncate(keep);
        let kept: f64 = order.iter().map(|e| e.1).sum();
        for entry in order.iter_mut() {
            entry.1 /= kept;
        }
    }
    order.retain(|e| e.1 > 0.0);
    if order.is_empty() {
        return Err(ModelError::DegenerateDistribution);
    }
    Ok(order)
}

/// Draws the next token for `codebook` and appends it to the penalty window.
pub fn sample(
    logits: &[f32],
    params: &SamplingParams,
    state: &mut SamplingState,
    codebook: usize,
) -> Result<u32, ModelError> {
    let dist = sampling_distribution(logits, params, state.recent(codebook))?;
    let token = if dist.len() == 1 {
        dist[0].0
    } else {
        let u = state.uniform();
        let mut acc = 0.0;
        let mut chosen = dist[dist.len() - 1].0;
        for &(t, p) in &dist {
            acc += p;
            if u < acc {
                chosen = t;
                break;
            }
        }
        chosen
    };
    state.push(codebook, token);
    Ok(token)
}
