//! Streaming-aware serving for speech language models.
//!
//! The crate models a serving system that turns prompts into streamed audio
//! chunks: an LM backbone produces audio tokens, a detokenizer turns token
//! windows into waveform chunks, and a scheduler decides which requests run
//! each iteration. Model execution is synthetic (seeded logits, affine
//! latency costs) so whole runs are reproducible bit for bit.
//!
//! - [`time`], [`request`], [`trace`], [`metrics`]: the shared vocabulary and
//!   the time-to-first-audio / streaming-viability metrics.
//! - [`model`]: the executor interface plus sampling and the synthetic
//!   executor.
//! - [`profiles`]: built-in model profiles, cost models and chunking rules.
//! - [`scheduler`]: streaming-aware, FCFS and throughput-max policies.
//! - [`engine`]: the iteration loop, device timelines and scenario drivers.
//! - [`workload`]: Poisson and burst request streams.

pub mod engine;
pub mod metrics;
pub mod model;
pub mod profiles;
pub mod request;
pub mod scheduler;
pub mod time;
pub mod trace;
pub mod workload;

pub use engine::{Engine, EngineConfig, EngineError, PipelineMode, ScenarioSpec, Topology};
pub use metrics::MetricsReport;
pub use profiles::{builtin_profile, BuiltinProfile, ModelProfile};
pub use request::RequestId;
pub use scheduler::{PolicyConfig, PolicyKind};
pub use time::Micros;
pub use trace::Trace;
