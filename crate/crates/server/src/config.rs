//! Scenario configuration: a single TOML document, validated strictly.
//!
//! Unknown keys are rejected and every error names the offending path.
//! `cost` and `policy` are partial tables layered over the chosen profile's
//! defaults; `--set key.path=value` overrides are applied to the raw document
//! before anything else.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use speechserve_core::engine::ClockMode;
use speechserve_core::profiles::{CostModel, ModelProfile};
use speechserve_core::workload::{
    default_output_tokens, ArrivalProcess, LengthDist, WorkloadError, WorkloadSpec,
};
use speechserve_core::{Micros, PipelineMode, PolicyConfig, PolicyKind, ScenarioSpec, Topology};
use thiserror::Error;

/// Schema version this build reads.
pub const CONFIG_VERSION: u32 = 1;

/// The JSON schema describing the config document.
pub const SCHEMA: &str = include_str!("../schema/scenario.schema.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid TOML: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{path}: at `{key}`: {message}")]
    Invalid {
        path: PathBuf,
        key: String,
        message: String,
    },
    #[error("bad override `{0}` (expected key.path=value)")]
    Override(String),
}

impl ConfigError {
    /// The config key the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

/// A built-in profile name or a complete inline profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileRef {
    Name(String),
    Inline(Box<ModelProfile>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default)]
    pub arrival: ArrivalProcess,
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub count: u32,
    /// Defaults to 50 tokens.
    pub prompt_length: Option<LengthDist>,
    /// Defaults to about eight seconds of audio for the profile.
    pub output_length: Option<LengthDist>,
    /// Defaults to the top-level seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub rates: Vec<f64>,
    pub policies: Vec<PolicyKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub csv: String,
    pub manifest: String,
    /// Trace files go here inside `dir`, one per run.
    pub traces: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            csv: "metrics.csv".into(),
            manifest: "manifest.json".into(),
            traces: "traces".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub bind: String,
    /// Live plus queued requests beyond this are refused with 429.
    pub max_live_requests: u32,
    /// Frames buffered per client before a stalled stream is cut off.
    pub buffer_frames: usize,
    /// Seconds in-flight streams get to finish after a shutdown signal.
    pub drain_timeout: f64,
    /// JSON-lines frames instead of binary ones.
    pub json: bool,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            bind: "127.0.0.1:8080".into(),
            max_live_requests: 64,
            buffer_frames: 64,
            drain_timeout: 10.0,
            json: false,
        }
    }
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

/// The document as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub profile: ProfileRef,
    /// Partial cost model merged over the profile's.
    #[serde(default)]
    pub cost: toml::Table,
    /// Partial policy config merged over the profile-derived defaults.
    #[serde(default)]
    pub policy: toml::Table,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default)]
    pub pipeline: PipelineMode,
    #[serde(default)]
    pub delivery_overhead_ms: f64,
    pub max_live_requests: Option<u32>,
    pub stop_token: Option<u32>,
    #[serde(default)]
    pub workload: WorkloadSection,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub server: ServerSection,
}

/// One cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunPoint {
    pub rate: f64,
    pub policy: PolicyKind,
}

/// A validated config with every default filled in.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub workload: WorkloadSpec,
    /// Grid to run; a single point when the config has no sweep.
    pub points: Vec<RunPoint>,
    pub output: OutputSection,
    pub server: ServerSection,
    /// SHA-256 of the canonical effective document (after overrides).
    pub config_hash: String,
    /// The effective document as JSON.
    pub effective: serde_json::Value,
}

impl Scenario {
    /// The `ScenarioSpec` and workload for one sweep point.
    pub fn at(&self, point: RunPoint) -> (ScenarioSpec, WorkloadSpec) {
        let mut spec = self.spec.clone();
        spec.policy.policy = point.policy;
        let mut workload = self.workload.clone();
        workload.rate = point.rate;
        (spec, workload)
    }
}

/// Reads, overrides, validates and resolves a config file.
pub fn load(path: &Path, overrides: &[String]) -> Result<Scenario, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf);
    parse(&text, path, base.as_deref(), overrides)
}

/// Like [`load`] for an in-memory document; `origin` is only used in error
/// messages and `base` resolves relative histogram paths.
pub fn parse(text: &str, origin: &Path, base: Option<&Path>, overrides: &[String]) -> Result<Scenario, ConfigError> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Syntax {
        path: origin.to_path_buf(),
        message: e.message().to_string(),
    })?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let invalid = |key: String, message: String| ConfigError::Invalid {
        path: origin.to_path_buf(),
        key,
        message,
    };
    let config: ScenarioConfig = typed(toml::Value::Table(doc.clone()), "").map_err(|(k, m)| invalid(k, m))?;
    if config.version != CONFIG_VERSION {
        return Err(invalid(
            "version".into(),
            format!("unsupported version {} (this build reads {CONFIG_VERSION})", config.version),
        ));
    }

    let mut profile = match &config.profile {
        ProfileRef::Name(name) => ModelProfile::by_name(name).map_err(|e| invalid("profile".into(), e.to_string()))?,
        ProfileRef::Inline(p) => (**p).clone(),
    };
    if !config.cost.is_empty() {
        let merged = merge(to_value(&profile.cost), &config.cost);
        profile.cost = typed::<CostModel>(merged, "cost").map_err(|(k, m)| invalid(k, m))?;
    }
    profile.validate().map_err(|e| invalid("profile".into(), e.to_string()))?;

    let defaults = PolicyConfig::for_profile(PolicyKind::StreamingAware, &profile);
    let policy: PolicyConfig =
        typed(merge(to_value(&defaults), &config.policy), "policy").map_err(|(k, m)| invalid(k, m))?;
    policy.validate().map_err(|e| invalid("policy".into(), e.to_string()))?;
    config
        .topology
        .validate()
        .map_err(|e| invalid("topology".into(), e.to_string()))?;
    if !(config.delivery_overhead_ms.is_finite() && config.delivery_overhead_ms >= 0.0) {
        return Err(invalid("delivery_overhead_ms".into(), "must be >= 0".into()));
    }

    let workload = resolve_workload(&config, &profile, base).map_err(|e| invalid("workload".into(), e.to_string()))?;

    let points = match &config.sweep {
        None => vec![RunPoint {
            rate: workload.rate,
            policy: policy.policy,
        }],
        Some(s) => {
            if s.rates.is_empty() || s.policies.is_empty() {
                return Err(invalid("sweep".into(), "rates and policies must be non-empty".into()));
            }
            if let Some(r) = s.rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
                return Err(invalid("sweep.rates".into(), format!("rate {r} must be >= 0")));
            }
            s.rates
                .iter()
                .flat_map(|&rate| s.policies.iter().map(move |&policy| RunPoint { rate, policy }))
                .collect()
        }
    };
    if config.server.max_live_requests == 0 || config.server.buffer_frames == 0 {
        return Err(invalid("server".into(), "max_live_requests and buffer_frames must be >= 1".into()));
    }

    let mut spec = ScenarioSpec::new(profile, policy, config.seed);
    spec.pipeline = config.pipeline;
    spec.topology = config.topology;
    spec.clock = config.clock;
    spec.delivery_overhead = Micros::from_secs_f64(config.delivery_overhead_ms / 1e3);
    spec.max_live_requests = config.max_live_requests;
    spec.stop_token = config.stop_token;

    let effective = serde_json::to_value(&doc).expect("toml tables are JSON-representable");
    let canonical = serde_json::to_vec(&effective).expect("serializable");
    Ok(Scenario {
        spec,
        workload,
        points,
        output: config.output,
        server: config.server,
        config_hash: hex::encode(Sha256::digest(&canonical)),
        effective,
    })
}

fn resolve_workload(config: &ScenarioConfig, profile: &ModelProfile, base: Option<&Path>) -> Result<WorkloadSpec, WorkloadError> {
    let w = &config.workload;
    let mut prompt = w.prompt_length.clone().unwrap_or(LengthDist::Fixed(50));
    let mut output = w
        .output_length
        .clone()
        .unwrap_or(LengthDist::Fixed(default_output_tokens(&profile.name)));
    prompt.resolve(base)?;
    output.resolve(base)?;
    let spec = WorkloadSpec {
        arrival: w.arrival,
        rate: w.rate,
        duration: w.duration.unwrap_or(60.0),
        count: w.count,
        prompt_length: prompt,
        output_length: output,
        seed: w.seed.unwrap_or(config.seed),
    };
    spec.validate()?;
    Ok(spec)
}

fn to_value<T: Serialize>(v: &T) -> toml::Value {
    toml::Value::try_from(v).expect("config types serialize to TOML")
}

/// Deep-merges `over` into `base`; tables merge key by key, anything else
/// replaces.
fn merge(mut base: toml::Value, over: &toml::Table) -> toml::Value {
    if let toml::Value::Table(t) = &mut base {
        for (k, v) in over {
            match (t.get_mut(k), v) {
                (Some(existing @ toml::Value::Table(_)), toml::Value::Table(sub)) => {
                    let merged = merge(existing.clone(), sub);
                    *existing = merged;
                }
                _ => {
                    t.insert(k.clone(), v.clone());
                }
            }
        }
    }
    base
}

/// Deserializes with the failing key path attached.
fn typed<T: DeserializeOwned>(value: toml::Value, prefix: &str) -> Result<T, (String, String)> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let key = match (prefix.is_empty(), inner.as_str()) {
            (true, _) => inner.clone(),
            (false, ".") => prefix.to_string(),
            (false, _) => format!("{prefix}.{inner}"),
        };
        (key, e.into_inner().to_string())
    })
}

/// Applies `a.b.c=value`. The value is parsed as a TOML value, falling back
/// to a bare string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::Override(spec.to_string())),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}
