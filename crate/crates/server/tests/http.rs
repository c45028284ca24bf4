use std::path::Path;
use std::time::Duration;

use speechserve::config::{self, Scenario};
use speechserve::frame::{decode_all, WireFormat};
use speechserve::loadtest::{self, LoadtestOptions};
use speechserve::service::{self, ServiceHandle};
use speechserve_core::workload::WorkloadSpec;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

fn scenario(extra: &str) -> Scenario {
    let text = format!("profile = \"cosy_like\"\n[server]\nbind = \"127.0.0.1:0\"\n{extra}");
    config::parse(&text, Path::new("test.toml"), None, &[]).unwrap()
}

async fn start(s: &Scenario) -> ServiceHandle {
    service::start(s, None, None).await.unwrap()
}

async fn post(h: &ServiceHandle, body: &str) -> reqwest::Response {
    reqwest::Client::new()
        .post(format!("{}/v1/generate", h.base_url()))
        .body(body.to_string())
        .send()
        .await
        .unwrap()
}

#[tokio::test]
async fn one_chunk_request_streams_one_final_frame() {
    let h = start(&scenario("")).await;
    let resp = post(&h, r#"{"prompt_tokens": 30, "output_tokens": 15}"#).await;
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.headers()["content-type"], "application/octet-stream");
    let frames = decode_all(WireFormat::Binary, &resp.bytes().await.unwrap()).unwrap();
    assert_eq!(frames.len(), 1);
    assert!(frames[0].is_final() && !frames[0].is_error());
    assert_eq!(frames[0].playback_ms, 600);
    assert_eq!(frames[0].payload.len(), 28_800);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn json_mode_and_text_prompts() {
    let s = scenario("json = true\n");
    let h = start(&s).await;
    let resp = post(&h, r#"{"text": "hello there", "output_tokens": 40, "profile": "cosy_like"}"#).await;
    assert_eq!(resp.status(), 200);
    let frames = decode_all(WireFormat::JsonLines, &resp.bytes().await.unwrap()).unwrap();
    let indices: Vec<u32> = frames.iter().map(|f| f.chunk_index).collect();
    assert_eq!(indices, vec![1, 2, 3]);
    assert_eq!(frames.iter().map(|f| f.playback_ms).sum::<u32>(), 1600);
    assert!(frames[2].is_final() && !frames[1].is_final());
    assert!(frames.windows(2).all(|w| w[0].available_at_ms <= w[1].available_at_ms));
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn bad_requests_are_400() {
    let h = start(&scenario("")).await;
    for body in [
        r#"{"prompt_tokens": 10, "output_tokens": 0}"#,
        r#"{"output_tokens": 10}"#,
        r#"{"prompt_tokens": 10, "text": "x"}"#,
        r#"{"prompt_tokens": 10, "bogus": 1}"#,
        r#"{"prompt_tokens": 10, "profile": "orpheus_like"}"#,
        r#"{"prompt_tokens": 999999}"#,
        "not json",
    ] {
        let resp = post(&h, body).await;
        assert_eq!(resp.status(), 400, "{body}");
        let err: serde_json::Value = serde_json::from_slice(&resp.bytes().await.unwrap()).unwrap();
        assert!(err["error"].is_string());
    }
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn over_capacity_is_429_and_draining_is_503() {
    let h = start(&scenario("max_live_requests = 1\n")).await;
    let first = post(&h, r#"{"prompt_tokens": 10, "output_tokens": 150}"#).await;
    assert_eq!(first.status(), 200);
    let second = post(&h, r#"{"prompt_tokens": 10, "output_tokens": 15}"#).await;
    assert_eq!(second.status(), 429);

    let client = reqwest::Client::new();
    let metrics = client
        .get(format!("{}/v1/metrics", h.base_url()))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    let metrics: serde_json::Value = serde_json::from_slice(&metrics).unwrap();
    assert_eq!(metrics["requests_admitted"], 1);
    let health = client.get(format!("{}/v1/healthz", h.base_url())).send().await.unwrap();
    assert_eq!(health.status(), 200);

    h.begin_drain();
    assert_eq!(post(&h, r#"{"prompt_tokens": 10, "output_tokens": 15}"#).await.status(), 503);
    let health = client.get(format!("{}/v1/healthz", h.base_url())).send().await.unwrap();
    assert_eq!(health.status(), 503);

    // The in-flight stream still completes.
    let frames = decode_all(WireFormat::Binary, &first.bytes().await.unwrap()).unwrap();
    assert_eq!(frames.len(), 10);
    assert!(frames.last().unwrap().is_final() && !frames.last().unwrap().is_error());
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn stalled_client_is_cut_off_without_blocking_others() {
    // Fifteen-second chunks make each frame about 720 KB, so a client that
    // stops reading fills the socket and the one-frame queue quickly. FCFS
    // keeps generating regardless of how much audio the client has buffered.
    let mut p = speechserve_core::builtin_profile(speechserve_core::BuiltinProfile::CosyLike);
    p.token_rate = 1.0;
    p.name = "slow_reader".into();
    let mut doc = toml::Table::new();
    doc.insert("profile".into(), toml::Value::try_from(&p).unwrap());
    let mut server = toml::Table::new();
    server.insert("bind".into(), "127.0.0.1:0".into());
    server.insert("buffer_frames".into(), 1.into());
    doc.insert("server".into(), server.into());
    let s = config::parse(&toml::to_string(&doc).unwrap(), Path::new("t.toml"), None, &["policy.policy=fcfs".into()]).unwrap();
    let h = start(&s).await;

    let mut sock = tokio::net::TcpStream::connect(h.addr).await.unwrap();
    let body = r#"{"prompt_tokens": 10, "output_tokens": 450}"#;
    let req = format!(
        "POST /v1/generate HTTP/1.1\r\nhost: x\r\nconnection: close\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{body}",
        body.len()
    );
    sock.write_all(req.as_bytes()).await.unwrap();

    // Another client is served normally meanwhile.
    let other = post(&h, r#"{"prompt_tokens": 10, "output_tokens": 15}"#).await;
    let frames = decode_all(WireFormat::Binary, &other.bytes().await.unwrap()).unwrap();
    assert_eq!(frames.len(), 1);

    tokio::time::sleep(Duration::from_millis(2500)).await;
    let mut raw = Vec::new();
    tokio::time::timeout(Duration::from_secs(20), sock.read_to_end(&mut raw))
        .await
        .expect("server closes the stalled stream")
        .unwrap();
    let text_end = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap() + 4;
    let body = dechunk(&raw[text_end..]);
    let frames = decode_all(WireFormat::Binary, &body).unwrap();
    let last = frames.last().unwrap();
    assert!(last.is_final() && last.is_error(), "{} frames, last {:?}", frames.len(), last.flags);
    assert!(frames.len() < 30);
    h.shutdown().await.unwrap();
}

/// Decodes an HTTP/1.1 chunked body.
fn dechunk(mut data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let line_end = data.windows(2).position(|w| w == b"\r\n").unwrap();
        let size = usize::from_str_radix(std::str::from_utf8(&data[..line_end]).unwrap().trim(), 16).unwrap();
        data = &data[line_end + 2..];
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&data[..size]);
        data = &data[size + 2..];
    }
}

#[tokio::test]
async fn client_ttfa_tracks_server_ttfa() {
    let h = start(&scenario("")).await;
    let requests = WorkloadSpec::poisson(3.0, 3.0, 60, 5).generate().unwrap();
    assert!(requests.len() >= 3);
    let opts = LoadtestOptions {
        url: h.base_url(),
        timeout: Duration::from_secs(30),
    };
    let result = loadtest::run(&opts, &requests).await;
    assert_eq!(result.errored(), 0);
    assert_eq!(result.report.requests_completed as usize, requests.len());
    for r in &result.records {
        let client = r.client_ttfa().unwrap();
        let server = r.server_ttfa().unwrap();
        let gap = client.0 as i64 - server.0 as i64;
        assert!(gap < 20_000, "request {}: client {client} server {server}", r.index);
    }
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn unreachable_server_errors_every_request() {
    let requests = WorkloadSpec::poisson(20.0, 0.3, 15, 1).generate().unwrap();
    let opts = LoadtestOptions {
        url: "http://127.0.0.1:9".into(),
        timeout: Duration::from_secs(5),
    };
    let result = loadtest::run(&opts, &requests).await;
    assert_eq!(result.errored(), requests.len());
    assert_eq!(result.report.ttfa_p90, None);
    assert_eq!(result.report.requests_errored as usize, requests.len());
}
