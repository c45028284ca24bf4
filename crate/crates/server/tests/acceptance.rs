//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechserve::config;
use speechserve::loadtest::{self, LoadtestOptions};
use speechserve::runner;
use speechserve::service;
use speechserve_core::engine::{run_replay, run_scenario, PipelineMode};
use speechserve_core::metrics::{ttfa, viability};
use speechserve_core::model::{sample, sampling_distribution, SamplingParams, SamplingState};
use speechserve_core::profiles::chunk_ready;
use speechserve_core::trace::{ChunkEvent, Trace};
use speechserve_core::workload::{RequestSpec, WorkloadSpec};
use speechserve_core::{
    builtin_profile, BuiltinProfile, MetricsReport, Micros, ModelProfile, PolicyConfig, PolicyKind, RequestId,
    ScenarioSpec, Topology,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, started: Instant, what: &str) -> Result<(), String> {
    let took = started.elapsed();
    check(took < limit, || format!("{what} took {:.1}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()))
}

fn spec(profile: &ModelProfile, policy: PolicyKind, pipeline: PipelineMode, seed: u64) -> ScenarioSpec {
    let mut s = ScenarioSpec::new(profile.clone(), PolicyConfig::for_profile(policy, profile), seed);
    s.pipeline = pipeline;
    s.log_decisions = false;
    s
}

fn report(spec: &ScenarioSpec, requests: &[RequestSpec]) -> Result<MetricsReport, String> {
    run_scenario(spec, requests)
        .map(|t| MetricsReport::from_trace(&t))
        .map_err(|e| e.to_string())
}

fn p90(r: &MetricsReport) -> f64 {
    r.ttfa_p90.unwrap_or(f64::INFINITY)
}

/// Random traces scored against a direct deadline check on absolute times.
fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut chunks_checked = 0u64;
    for n in 0..1000 {
        let requests = rng.random_range(1..=6);
        let mut times: Vec<Vec<(u64, u64)>> = Vec::new();
        let mut chunks = Vec::new();
        for r in 0..requests {
            let len = rng.random_range(1..=20);
            let mut t = rng.random_range(0..5_000_000u64);
            let mut req = Vec::new();
            for i in 0..len {
                t += rng.random_range(0..1_200_000u64);
                let dur = rng.random_range(1..1_000_000u64);
                req.push((t, dur));
                chunks.push(ChunkEvent {
                    request: RequestId(r),
                    index: i + 1,
                    available_time: Micros(t),
                    playback_duration: Micros(dur),
                    new_tokens: 1,
                    window_sampled_at: Micros(t),
                    is_final: i + 1 == len,
                });
            }
            times.push(req);
        }
        chunks.shuffle(&mut rng);
        let stats = viability(&Trace {
            chunks,
            ..Trace::default()
        });

        let (mut on_time, mut total) = (0u64, 0u64);
        for req in &times {
            let start = req[0].0;
            for k in 0..req.len() {
                total += 1;
                let budget: u64 = req[..k].iter().map(|c| c.1).sum();
                if k == 0 || req[k].0 - start <= budget {
                    on_time += 1;
                }
            }
        }
        chunks_checked += total;
        let want = on_time as f64 / total as f64;
        check(stats.on_time == on_time && stats.total == total && stats.fraction == want, || {
            format!("trace {n}: got {}/{} want {on_time}/{total}", stats.on_time, stats.total)
        })?;
    }
    within(Duration::from_secs(10), started, "1000 traces")?;
    Ok(format!("1000 traces, {chunks_checked} chunks"))
}

/// Every output length 1..=500 on every profile, both through the chunking
/// rule alone and through full engine runs.
fn criterion_2() -> Outcome {
    let started = Instant::now();
    for which in BuiltinProfile::ALL {
        let p = builtin_profile(which);
        for target in 1..=500u32 {
            let (mut emitted, mut chunks) = (0u32, 0u32);
            for generated in 1..=target {
                while let Some(w) = chunk_ready(generated, chunks, &p, generated == target) {
                    emitted += w.new_tokens;
                    chunks += 1;
                }
            }
            check(emitted == target, || format!("{} target {target}: emitted {emitted}", p.name))?;
        }
    }
    let results: Vec<Result<(), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = BuiltinProfile::ALL
            .iter()
            .map(|&which| {
                s.spawn(move || {
                    let p = builtin_profile(which);
                    let requests: Vec<RequestSpec> = (1..=500)
                        .map(|n| RequestSpec {
                            arrival: Micros(u64::from(n) * 40_000),
                            prompt_tokens: 20,
                            output_tokens: n,
                        })
                        .collect();
                    let trace = run_scenario(&spec(&p, PolicyKind::Fcfs, PipelineMode::Asynchronous, 5), &requests)
                        .map_err(|e| e.to_string())?;
                    let mut sums: BTreeMap<u64, u32> = BTreeMap::new();
                    for c in &trace.chunks {
                        *sums.entry(c.request.0).or_default() += c.new_tokens;
                    }
                    check(trace.requests.len() == 500, || format!("{}: {} requests", p.name, trace.requests.len()))?;
                    for r in &trace.requests {
                        let got = sums.get(&r.id.0).copied().unwrap_or(0);
                        check(got == r.target_output_tokens, || {
                            format!("{} {}: {got} of {} tokens", p.name, r.id, r.target_output_tokens)
                        })?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>, String>>()?;
    within(Duration::from_secs(5), started, "conservation")?;
    Ok(format!("4 profiles x 500 lengths, {:.2}s", started.elapsed().as_secs_f64()))
}

/// Straight-line TTFA of one request on an idle engine, in microseconds.
fn critical_path_us(p: &ModelProfile, pipeline: PipelineMode, prompt: u32, delivery_ms: f64) -> f64 {
    let c = &p.cost;
    let h = c.host_overhead_ms;
    let prefill =
        c.preprocess_ms + c.prefill.base_ms + c.prefill.per_prompt_token_ms * f64::from(prompt) + c.prefill.per_request_ms;
    // Prefill yields no audio token: the first window needs chunk + lookahead
    // decode steps.
    let steps = f64::from(p.chunk_size + p.lookahead);
    let decode = c.decode.base_ms + c.decode.per_request_ms;
    let window = f64::from(p.chunk_size + p.lookahead + c.detokenize.ref_window_tokens);
    let detok = c.detokenize.base_ms + c.detokenize.per_request_ms + c.detokenize.per_window_token_ms * window;
    let host = match pipeline {
        PipelineMode::Synchronous => (steps + 2.0) * h,
        PipelineMode::Asynchronous => h,
    };
    (host + prefill + steps * decode + detok + delivery_ms) * 1e3
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    for which in [BuiltinProfile::CosyLike, BuiltinProfile::OrpheusLike, BuiltinProfile::StepAudioLike] {
        let p = builtin_profile(which);
        for pipeline in [PipelineMode::Asynchronous, PipelineMode::Synchronous] {
            let mut s = spec(&p, PolicyKind::StreamingAware, pipeline, 9);
            s.delivery_overhead = Micros::from_millis(1);
            let req = RequestSpec {
                arrival: Micros(250_000),
                prompt_tokens: 40,
                output_tokens: 120,
            };
            let trace = run_scenario(&s, &[req]).map_err(|e| e.to_string())?;
            let got = ttfa(&trace, RequestId(0)).map_err(|e| e.to_string())?.0 as f64;
            let want = critical_path_us(&p, pipeline, 40, 1.0);
            worst = worst.max((got - want).abs());
            check((got - want).abs() <= 1.0, || format!("{} {pipeline:?}: engine {got} us, oracle {want} us", p.name))?;
        }
    }
    Ok(format!("3 profiles x 2 pipelines, max deviation {worst:.2} us"))
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let p = builtin_profile(BuiltinProfile::CosyLike);
    let seed = 1;
    let fcfs = spec(&p, PolicyKind::Fcfs, PipelineMode::Asynchronous, seed);
    let streaming = spec(&p, PolicyKind::StreamingAware, PipelineMode::Asynchronous, seed);
    let single = [RequestSpec {
        arrival: Micros::ZERO,
        prompt_tokens: 50,
        output_tokens: 200,
    }];
    let unloaded = p90(&report(&fcfs, &single)?);
    for i in 1..=40 {
        let rate = 0.5 * f64::from(i);
        let requests = WorkloadSpec::poisson(rate, 60.0, 200, seed)
            .generate()
            .map_err(|e| e.to_string())?;
        let f = report(&fcfs, &requests)?;
        if p90(&f) <= 3.0 * unloaded {
            continue;
        }
        let s = report(&streaming, &requests)?;
        let ratio = p90(&f) / p90(&s);
        let detail = format!(
            "knee at {rate} req/s (unloaded {unloaded:.3}s): fcfs p90 {:.3}s viability {:.4}, streaming p90 {:.3}s viability {:.4}, ratio {ratio:.2}",
            p90(&f),
            f.viability_fraction,
            p90(&s),
            s.viability_fraction
        );
        check(ratio >= 1.5, || detail.clone())?;
        check(s.viability_fraction >= f.viability_fraction, || detail.clone())?;
        within(Duration::from_secs(60), started, "knee search")?;
        return Ok(detail);
    }
    Err("FCFS never exceeded 3x its unloaded p90 up to 20 req/s".into())
}

fn criterion_5() -> Outcome {
    let p = builtin_profile(BuiltinProfile::CosyLike);
    if p.cost.host_overhead_ms <= 0.0 {
        return Err("profile has no host overhead".into());
    }
    let rates = [1.0, 2.0, 4.0, 6.0, 8.0];
    let mut cells = Vec::new();
    let mut last = (0.0, 0.0);
    for &rate in &rates {
        let requests = WorkloadSpec::poisson(rate, 60.0, 200, 4)
            .generate()
            .map_err(|e| e.to_string())?;
        let a = p90(&report(&spec(&p, PolicyKind::StreamingAware, PipelineMode::Asynchronous, 4), &requests)?);
        let s = p90(&report(&spec(&p, PolicyKind::StreamingAware, PipelineMode::Synchronous, 4), &requests)?);
        cells.push(format!("{rate}: {a:.3}/{s:.3}"));
        check(a <= s, || format!("rate {rate}: async p90 {a:.4}s > sync {s:.4}s"))?;
        last = (a, s);
    }
    check(last.0 < last.1, || format!("no strict improvement at the highest rate: {last:?}"))?;

    let mut replays = 0;
    for which in BuiltinProfile::ALL {
        let prof = builtin_profile(which);
        for policy in PolicyKind::ALL {
            for (rate, seed) in [(2.0, 1), (8.0, 2)] {
                let requests = WorkloadSpec::poisson(rate, 10.0, 150, seed)
                    .generate()
                    .map_err(|e| e.to_string())?;
                let mut logged = spec(&prof, policy, PipelineMode::Synchronous, seed);
                logged.log_decisions = true;
                let decisions = run_scenario(&logged, &requests).map_err(|e| e.to_string())?.decisions;
                let end = |pipeline| -> Result<Micros, String> {
                    let s = spec(&prof, policy, pipeline, seed);
                    let t = run_replay(&s, &requests, &decisions).map_err(|e| e.to_string())?;
                    t.end_time().ok_or_else(|| "empty replay".to_string())
                };
                let (a, s) = (end(PipelineMode::Asynchronous)?, end(PipelineMode::Synchronous)?);
                check(a <= s, || format!("{} {policy} rate {rate}: async makespan {a} > sync {s}", prof.name))?;
                replays += 1;
            }
        }
    }
    Ok(format!("p90 async/sync {} ; {replays} replayed logs", cells.join(", ")))
}

fn max_viable_rate(p: &ModelProfile, topology: Topology) -> Result<f64, String> {
    let mut best = 0.0;
    for k in 0..60 {
        let rate = 1.1f64.powi(k);
        let requests = WorkloadSpec::poisson(rate, 60.0, 200, 11)
            .generate()
            .map_err(|e| e.to_string())?;
        let mut s = spec(p, PolicyKind::StreamingAware, PipelineMode::Asynchronous, 11);
        s.topology = topology;
        let r = report(&s, &requests)?;
        if r.viability_fraction >= 0.99 && p90(&r) < 1.0 {
            best = rate;
        }
        if r.viability_fraction < 0.5 {
            break;
        }
    }
    Ok(best)
}

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let p = builtin_profile(BuiltinProfile::CosyLike);
    let one = max_viable_rate(&p, Topology::Single)?;
    let four = max_viable_rate(&p, Topology::DataParallel { instances: 4 })?;
    let ratio = four / one;
    let detail = format!("max viable rate DP1 {one:.2}, DP4 {four:.2} req/s, ratio {ratio:.2}");
    check(one > 0.0 && (3.0..=5.0).contains(&ratio), || detail.clone())?;
    within(Duration::from_secs(300), started, "DP sweep")?;
    Ok(detail)
}

fn criterion_7() -> Outcome {
    let p = builtin_profile(BuiltinProfile::CosyLike);
    let requests = WorkloadSpec::burst(1000, 200, 3).generate().map_err(|e| e.to_string())?;
    let mut tp = spec(&p, PolicyKind::ThroughputMax, PipelineMode::Asynchronous, 3);
    tp.log_decisions = true;
    let trace = run_scenario(&tp, &requests).map_err(|e| e.to_string())?;
    for d in &trace.decisions {
        let lm = d.decision.lm_eligible.min(tp.policy.max_lm_batch);
        let detok = d.decision.detok_eligible.min(tp.policy.max_detok_batch);
        check(
            d.decision.lm_batch.len() as u32 == lm && d.decision.detok_batch.len() as u32 == detok,
            || {
                format!(
                    "iteration {}: lm {} of {} eligible, detok {} of {}",
                    d.iteration,
                    d.decision.lm_batch.len(),
                    d.decision.lm_eligible,
                    d.decision.detok_batch.len(),
                    d.decision.detok_eligible
                )
            },
        )?;
    }
    let throughput = MetricsReport::from_trace(&trace);
    let streaming = report(&spec(&p, PolicyKind::StreamingAware, PipelineMode::Asynchronous, 3), &requests)?;
    let detail = format!(
        "inverse RTF throughput_max {:.1}x, streaming_aware {:.1}x; {} iterations batch-maximal",
        throughput.inverse_rtf,
        streaming.inverse_rtf,
        trace.decisions.len()
    );
    check(throughput.requests_completed == 1000, || detail.clone())?;
    check(throughput.inverse_rtf > streaming.inverse_rtf, || detail.clone())?;
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let logits = [0.3f32, -1.2, 1.5, 0.0];
    let mut state = SamplingState::new(1, 64, 2024, RequestId(7));
    let draws = 100_000;
    let mut counts = [0u64; 4];
    for _ in 0..draws {
        let t = sample(&logits, &SamplingParams::default(), &mut state, 0).map_err(|e| e.to_string())?;
        counts[t as usize] += 1;
    }
    let z: f64 = logits.iter().map(|&l| f64::from(l).exp()).sum();
    let stat: f64 = logits
        .iter()
        .zip(counts)
        .map(|(&l, o)| {
            let e = f64::from(l).exp() / z * draws as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let critical = ChiSquared::new(3.0).map_err(|e| e.to_string())?.inverse_cdf(0.99);
    check(stat < critical, || format!("chi-square {stat:.2} >= {critical:.2}"))?;

    // Temperature 0 picks the argmax.
    let mut s = SamplingState::new(1, 8, 1, RequestId(0));
    let t = sample(&[2.0, 1.0, 0.0], &SamplingParams::greedy(), &mut s, 0).map_err(|e| e.to_string())?;
    check(t == 0, || format!("greedy picked {t}"))?;

    // A penalty of 1.3 on a repeated token 0 drops 1.0 to 0.769 < 0.95.
    let mut s = SamplingState::new(1, 8, 1, RequestId(0));
    s.push(0, 0);
    let params = SamplingParams {
        repetition_penalty: 1.3,
        ..SamplingParams::greedy()
    };
    let t = sample(&[1.0, 0.95], &params, &mut s, 0).map_err(|e| e.to_string())?;
    check(t == 1, || format!("penalized sampling picked {t}"))?;

    // top_p 0.7 over {0.5, 0.3, 0.2} keeps the first two.
    let logits: Vec<f32> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln() as f32).collect();
    let params = SamplingParams {
        top_p: 0.7,
        ..SamplingParams::default()
    };
    let kept: Vec<u32> = sampling_distribution(&logits, &params, [])
        .map_err(|e| e.to_string())?
        .iter()
        .map(|d| d.0)
        .collect();
    check(kept == [0, 1], || format!("top_p kept {kept:?}"))?;
    Ok(format!("chi-square {stat:.2} < {critical:.2} (df 3, alpha 0.01); 3 examples exact"))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = r#"
seed = 17
profile = "step_audio_like"

[topology]
kind = "disaggregated"
link_latency = 0.002

[workload]
duration = 15.0
output_length = { uniform_int = { lo = 20, hi = 300 } }
prompt_length = { uniform_int = { lo = 10, hi = 200 } }

[sweep]
rates = [2.0, 6.0]
policies = ["fcfs", "streaming_aware", "throughput_max"]
"#;
    let scenario = config::parse(text, Path::new("determinism.toml"), None, &[]).map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    runner::run(&scenario, Some(&a)).map_err(|e| e.to_string())?;
    runner::run(&scenario, Some(&b)).map_err(|e| e.to_string())?;
    let mut files = vec![scenario.output.csv.clone(), scenario.output.manifest.clone()];
    for &point in &scenario.points {
        files.push(format!("{}/{}", scenario.output.traces, runner::trace_name(point)));
    }
    let mut bytes = 0;
    for f in &files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        check(!x.is_empty() && x == y, || format!("{f} differs between runs"))?;
        bytes += x.len();
    }
    Ok(format!("{} files, {bytes} bytes identical", files.len()))
}

fn criterion_10() -> Outcome {
    let started = Instant::now();
    let text = "seed = 2\nprofile = \"cosy_like\"\nclock = \"wall\"\n[server]\nbind = \"127.0.0.1:0\"\n";
    let scenario = config::parse(text, Path::new("live.toml"), None, &[]).map_err(|e| e.to_string())?;
    let requests = WorkloadSpec::poisson(0.5, 40.0, 200, 10)
        .generate()
        .map_err(|e| e.to_string())?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    let result = runtime.block_on(async {
        let handle = service::start(&scenario, None, Some(false)).await.map_err(|e| e.to_string())?;
        let options = LoadtestOptions {
            url: handle.base_url(),
            timeout: Duration::from_secs(60),
        };
        let result = loadtest::run(&options, &requests).await;
        handle.shutdown().await.map_err(|e| e.to_string())?;
        Ok::<_, String>(result)
    })?;
    check(result.errored() == 0, || format!("{} requests errored", result.errored()))?;

    // The simulated run with the arrivals the server actually saw.
    let mut observed: Vec<_> = result
        .records
        .iter()
        .map(|r| (r.server_id.unwrap_or(u64::MAX), r))
        .collect();
    observed.sort_by_key(|o| o.0);
    let twin_requests: Vec<RequestSpec> = observed
        .iter()
        .map(|(_, r)| RequestSpec {
            arrival: r.server_arrival.unwrap_or(Micros::ZERO),
            ..r.spec
        })
        .collect();
    let twin = run_scenario(&service::virtual_twin(&scenario.spec), &twin_requests).map_err(|e| e.to_string())?;

    let bound = Micros::from_millis(20);
    let mut close = 0;
    let mut worst = 0i64;
    for (i, (_, r)) in observed.iter().enumerate() {
        let client = r.client_ttfa().ok_or("request without audio")?;
        let sim = ttfa(&twin, RequestId(i as u64)).map_err(|e| e.to_string())?;
        worst = worst.max(client.0 as i64 - sim.0 as i64);
        if client <= sim + bound {
            close += 1;
        }
    }
    let n = observed.len();
    let detail = format!(
        "{n} requests, client viability {:.4}, {close}/{n} within 20 ms of simulated TTFA (worst excess {:.1} ms), {:.0}s",
        result.report.viability_fraction,
        worst as f64 / 1e3,
        started.elapsed().as_secs_f64()
    );
    check(n > 0 && result.report.viability_fraction == 1.0, || detail.clone())?;
    check(close * 100 >= n * 95, || detail.clone())?;
    within(Duration::from_secs(90), started, "live run")?;
    Ok(detail)
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, f) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
