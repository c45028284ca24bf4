use std::collections::BTreeSet;

use proptest::prelude::*;
use speechserve_core::model::SamplingState;
use speechserve_core::profiles::WindowSpec;
use speechserve_core::request::{Phase, Request};
use speechserve_core::scheduler::{classify, schedule, LmTask, PriorityClass, QueueEntry, SchedulerDecision};
use speechserve_core::{Micros, PolicyConfig, PolicyKind, RequestId};

#[derive(Debug, Clone)]
struct Shape {
    arrival: u64,
    /// (first chunk time, audio emitted)
    started: Option<(u64, u64)>,
    lm: bool,
    window: bool,
}

fn shape() -> impl Strategy<Value = Shape> {
    (
        0u64..5_000_000,
        prop::option::of((0u64..5_000_000, 0u64..6_000_000)),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(arrival, started, lm, window)| Shape {
            arrival,
            started: started.map(|(t, a)| (arrival + t, a)),
            lm,
            window,
        })
}

fn request(i: usize, s: &Shape) -> Request {
    let id = RequestId(i as u64);
    Request {
        id,
        arrival_time: Micros(s.arrival),
        prompt_tokens: 10,
        target_output_tokens: 100,
        phase: if s.started.is_some() { Phase::SteadyState } else { Phase::Startup },
        tokens_generated: 0,
        chunks_emitted: u32::from(s.started.is_some()),
        first_chunk_time: s.started.map(|(t, _)| Micros(t)),
        audio_emitted: Micros(s.started.map_or(0, |(_, a)| a)),
        stream_ended: false,
        sampling_state: SamplingState::new(1, 4, 0, id),
        detok_cache: None,
    }
}

fn entries<'a>(reqs: &'a [Request], shapes: &[Shape]) -> Vec<QueueEntry<'a>> {
    reqs.iter()
        .zip(shapes)
        .map(|(r, s)| QueueEntry {
            request: r,
            lm_task: s.lm.then_some(if s.started.is_some() { LmTask::Decode } else { LmTask::Prefill }),
            ready_window: s.window.then_some(WindowSpec {
                chunk_index: r.chunks_emitted + 1,
                start: 0,
                length: 15,
                new_tokens: 15,
                is_flush: false,
            }),
        })
        .collect()
}

fn config(policy: PolicyKind, lm: u32, detok: u32, startup: u32) -> PolicyConfig {
    PolicyConfig {
        policy,
        max_lm_batch: lm,
        max_detok_batch: detok,
        startup_concurrency_limit: startup,
        ..PolicyConfig::default()
    }
}

fn well_formed(d: &SchedulerDecision, q: &[QueueEntry<'_>], c: &PolicyConfig) -> Result<(), String> {
    let lm: BTreeSet<_> = d.lm_batch.iter().map(|e| e.request).collect();
    let dt: BTreeSet<_> = d.detok_batch.iter().map(|e| e.request).collect();
    if lm.len() != d.lm_batch.len() || dt.len() != d.detok_batch.len() {
        return Err("duplicate request in a batch".into());
    }
    if d.lm_batch.len() > c.max_lm_batch as usize || d.detok_batch.len() > c.max_detok_batch as usize {
        return Err("batch cap exceeded".into());
    }
    for e in &d.lm_batch {
        if q[e.request.0 as usize].lm_task != Some(e.task) {
            return Err(format!("{} has no such LM task", e.request));
        }
    }
    for e in &d.detok_batch {
        if q[e.request.0 as usize].ready_window != Some(e.window) {
            return Err(format!("{} has no such window", e.request));
        }
    }
    let lm_eligible = q.iter().filter(|e| e.lm_task.is_some()).count() as u32;
    let detok_eligible = q.iter().filter(|e| e.ready_window.is_some()).count() as u32;
    if (d.lm_eligible, d.detok_eligible) != (lm_eligible, detok_eligible) {
        return Err("eligible counts wrong".into());
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn arrival_order_policies_fill_batches(
        shapes in prop::collection::vec(shape(), 0..40),
        now in 0u64..12_000_000,
        lm_cap in 1u32..16,
        detok_cap in 1u32..16,
        throughput in any::<bool>(),
    ) {
        let policy = if throughput { PolicyKind::ThroughputMax } else { PolicyKind::Fcfs };
        let c = config(policy, lm_cap, detok_cap, 8);
        let reqs: Vec<Request> = shapes.iter().enumerate().map(|(i, s)| request(i, s)).collect();
        let q = entries(&reqs, &shapes);
        let d = schedule(&q, Micros(now), &c);
        prop_assert_eq!(well_formed(&d, &q, &c), Ok(()));
        prop_assert_eq!(d.lm_batch.len() as u32, d.lm_eligible.min(lm_cap));
        prop_assert_eq!(d.detok_batch.len() as u32, d.detok_eligible.min(detok_cap));
        let key = |id: RequestId| (reqs[id.0 as usize].arrival_time, id);
        prop_assert!(d.lm_batch.windows(2).all(|w| key(w[0].request) < key(w[1].request)));
        prop_assert!(d.detok_batch.windows(2).all(|w| key(w[0].request) < key(w[1].request)));
    }

    #[test]
    fn streaming_policy_orders_by_class(
        shapes in prop::collection::vec(shape(), 0..40),
        now in 0u64..12_000_000,
        lm_cap in 1u32..16,
        detok_cap in 1u32..16,
        startup in 1u32..6,
    ) {
        let c = config(PolicyKind::StreamingAware, lm_cap, detok_cap, startup);
        let reqs: Vec<Request> = shapes.iter().enumerate().map(|(i, s)| request(i, s)).collect();
        let q = entries(&reqs, &shapes);
        let now = Micros(now);
        let d = schedule(&q, now, &c);
        prop_assert_eq!(well_formed(&d, &q, &c), Ok(()));
        prop_assert_eq!(&d, &schedule(&q, now, &c));

        let class = |id: RequestId| classify(&reqs[id.0 as usize], now, &c);
        prop_assert!(d.lm_batch.windows(2).all(|w| class(w[0].request) <= class(w[1].request)));

        // LM: startup admissions capped, otherwise work-conserving.
        let startups = d.lm_batch.iter().filter(|e| class(e.request) == PriorityClass::Startup).count() as u32;
        prop_assert!(startups <= startup);
        let eligible_startup = q.iter().filter(|e| e.lm_task.is_some() && classify(e.request, now, &c) == PriorityClass::Startup).count() as u32;
        let eligible_other = d.lm_eligible - eligible_startup;
        prop_assert_eq!(d.lm_batch.len() as u32, (eligible_startup.min(startup) + eligible_other).min(lm_cap));

        // Detok: urgent windows always run (up to the cap) and lead the batch.
        let urgent: Vec<RequestId> = q
            .iter()
            .filter(|e| e.ready_window.is_some() && classify(e.request, now, &c) != PriorityClass::Slack)
            .map(|e| e.request.id)
            .collect();
        let chosen: Vec<RequestId> = d.detok_batch.iter().map(|e| e.request).collect();
        let n = urgent.len().min(detok_cap as usize);
        prop_assert!(chosen.len() >= n);
        prop_assert!(d.detok_batch.windows(2).all(|w| class(w[0].request) <= class(w[1].request)));
        let startup_or_risk: Vec<_> = chosen.iter().copied().filter(|id| class(*id) != PriorityClass::Slack).collect();
        prop_assert_eq!(startup_or_risk.len(), n);
        if chosen.is_empty() {
            prop_assert!(urgent.is_empty());
        }
    }
}
