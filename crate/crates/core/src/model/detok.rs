use serde::{Deserialize, Serialize};

use crate::request::RequestId;
use crate::time::Micros;

/// Placeholder PCM format: 24 kHz mono, 16-bit.
pub const PCM_SAMPLE_RATE: u32 = 24_000;

/// Per-request detokenizer state carried between calls.
///
/// Synthetic executors keep the tail of the previous window (the overlap or
/// lookahead context a real causal detokenizer would re-read) and a byte
/// count standing in for KV / activation caches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetokenizerCache {
    owner: RequestId,
    calls: u32,
    carried: Vec<u32>,
    state_bytes: usize,
}

impl DetokenizerCache {
    pub fn new(owner: RequestId) -> Self {
        DetokenizerCache {
            owner,
            calls: 0,
            carried: Vec::new(),
            state_bytes: 0,
        }
    }

    pub fn owner(&self) -> RequestId {
        self.owner
    }

    pub fn calls(&self) -> u32 {
        self.calls
    }

    pub fn carried(&self) -> &[u32] {
        &self.carried
    }

    pub fn state_bytes(&self) -> usize {
        self.state_bytes
    }

    pub(crate) fn advance(&self, carried: Vec<u32>, extra_state_bytes: usize) -> Self {
        DetokenizerCache {
            owner: self.owner,
            calls: self.calls + 1,
            state_bytes: carried.len() * 4 + self.state_bytes.saturating_sub(self.carried.len() * 4)
                + extra_state_bytes,
            carried,
        }
    }
}

/// Descriptor of a synthesized waveform chunk. No samples are materialized;
/// `fingerprint` identifies the (window, cache) pair that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioChunk {
    pub duration: Micros,
    pub samples: u64,
    pub fingerprint: u64,
}

impl AudioChunk {
    pub fn silence(duration: Micros, fingerprint: u64) -> Self {
        AudioChunk {
            duration,
            samples: duration.0 * u64::from(PCM_SAMPLE_RATE) / 1_000_000,
            fingerprint,
        }
    }
}
