//! Scenario drivers: virtual-clock simulation, wall-clock pacing and
//! decision-log replay.

use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{route_dp, ClockMode, Engine, EngineConfig, EngineError, PipelineMode, Poll, Topology};
use crate::model::SyntheticExecutor;
use crate::profiles::ModelProfile;
use crate::request::RequestId;
use crate::scheduler::{DecisionRecord, PolicyConfig};
use crate::time::Micros;
use crate::trace::Trace;
use crate::workload::RequestSpec;

const ROUTER_STREAM: u64 = 0xd15_7a7c;

/// Everything needed to reproduce one run besides the request list.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub profile: ModelProfile,
    pub policy: PolicyConfig,
    pub pipeline: PipelineMode,
    pub topology: Topology,
    pub clock: ClockMode,
    pub delivery_overhead: Micros,
    pub max_live_requests: Option<u32>,
    pub stop_token: Option<u32>,
    pub log_decisions: bool,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(profile: ModelProfile, policy: PolicyConfig, seed: u64) -> Self {
        ScenarioSpec {
            profile,
            policy,
            pipeline: PipelineMode::default(),
            topology: Topology::default(),
            clock: ClockMode::default(),
            delivery_overhead: Micros::ZERO,
            max_live_requests: None,
            stop_token: None,
            log_decisions: true,
            seed,
        }
    }

    /// Executor seed of data-parallel instance `index`; instance 0 of a
    /// single-engine run uses the run seed itself.
    pub fn instance_seed(&self, index: u32) -> u64 {
        if self.topology.instances() == 1 {
            self.seed
        } else {
            self.seed ^ u64::from(index + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        }
    }

    pub fn engine(&self, index: u32) -> Result<Engine<SyntheticExecutor>, EngineError> {
        let config = EngineConfig {
            policy: self.policy.clone(),
            pipeline: self.pipeline,
            placement: self.topology.placement(index),
            delivery_overhead: self.delivery_overhead,
            max_live_requests: self.max_live_requests,
            stop_token: self.stop_token,
            log_decisions: self.log_decisions,
        };
        let exec = SyntheticExecutor::new(self.profile.clone(), self.instance_seed(index));
        Engine::new(exec, config)
    }
}

/// Runs `requests` (in arrival order; ids are their positions) to
/// completion and returns the merged trace.
pub fn run_scenario(spec: &ScenarioSpec, requests: &[RequestSpec]) -> Result<Trace, EngineError> {
    spec.topology.validate()?;
    let n = spec.topology.instances();
    let mut shards: Vec<Vec<(RequestId, RequestSpec)>> = vec![Vec::new(); n as usize];
    let mut router = ChaCha8Rng::seed_from_u64(spec.seed);
    router.set_stream(ROUTER_STREAM);
    for (i, r) in requests.iter().enumerate() {
        let target = if n == 1 { 0 } else { route_dp(n, &mut router)? };
        shards[target as usize].push((RequestId(i as u64), *r));
    }
    let traces = shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let engine = spec.engine(i as u32)?;
            match spec.clock {
                ClockMode::Virtual => drive_virtual(engine, shard),
                ClockMode::Wall => drive_wall(engine, shard),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trace::merge(traces))
}

fn submit(engine: &mut Engine<SyntheticExecutor>, id: RequestId, r: &RequestSpec) -> Result<(), EngineError> {
    match engine.submit_with_id(id, r.arrival, r.prompt_tokens, r.output_tokens) {
        // Counted in the trace as rejected.
        Ok(_) | Err(EngineError::Model(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

fn stalled() -> EngineError {
    EngineError::DependencyViolation("live requests but nothing schedulable".into())
}

fn drive_virtual(
    mut engine: Engine<SyntheticExecutor>,
    requests: &[(RequestId, RequestSpec)],
) -> Result<Trace, EngineError> {
    for (id, r) in requests {
        submit(&mut engine, *id, r)?;
    }
    let mut now = Micros::ZERO;
    loop {
        match engine.poll(now)? {
            Poll::Ran(_) => {}
            Poll::Idle { wake: Some(w) } => now = w,
            Poll::Idle { wake: None } => return Err(stalled()),
            Poll::Drained => break,
        }
    }
    Ok(engine.into_trace())
}

fn sleep_until(epoch: Instant, t: Micros) {
    let target = epoch + Duration::from_micros(t.0);
    let now = Instant::now();
    if target > now {
        thread::sleep(target - now);
    }
}

/// Paces the same engine against real time: requests are submitted when
/// their arrival time passes and each iteration starts no earlier than the
/// host is free.
fn drive_wall(
    mut engine: Engine<SyntheticExecutor>,
    requests: &[(RequestId, RequestSpec)],
) -> Result<Trace, EngineError> {
    let epoch = Instant::now();
    let elapsed = || Micros(epoch.elapsed().as_micros() as u64);
    let mut next = 0;
    loop {
        let now = elapsed();
        while next < requests.len() && requests[next].1.arrival <= now {
            let (id, r) = &requests[next];
            submit(&mut engine, *id, r)?;
            next += 1;
        }
        let upcoming = requests.get(next).map(|(_, r)| r.arrival);
        match engine.poll(now)? {
            Poll::Ran(_) => sleep_until(epoch, engine.host_ready()),
            Poll::Idle { wake } => match wake.into_iter().chain(upcoming).min() {
                Some(t) => sleep_until(epoch, t),
                None => return Err(stalled()),
            },
            Poll::Drained => match upcoming {
                Some(t) => sleep_until(epoch, t),
                None => break,
            },
        }
    }
    Ok(engine.into_trace())
}

/// Re-executes a single-instance decision log under `spec`'s pipeline mode
/// and placement. Every logged iteration is issued verbatim.
pub fn run_replay(
    spec: &ScenarioSpec,
    requests: &[RequestSpec],
    decisions: &[DecisionRecord],
) -> Result<Trace, EngineError> {
    if spec.topology.instances() != 1 {
        return Err(EngineError::Config("replay needs a single-instance topology".into()));
    }
    let mut engine = spec.engine(0)?;
    for (i, r) in requests.iter().enumerate() {
        submit(&mut engine, RequestId(i as u64), r)?;
    }
    for record in decisions {
        engine.replay(record)?;
    }
    if !engine.is_drained() {
        return Err(EngineError::Replay(format!(
            "{} live and {} pending requests after the last logged iteration",
            engine.live_count(),
            engine.pending_count()
        )));
    }
    Ok(engine.into_trace())
}
