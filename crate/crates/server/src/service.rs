//! Wall-clock HTTP streaming service.
//!
//! One engine thread owns the engine and paces it against real time. HTTP
//! handlers talk to it by message passing: a submission returns a bounded
//! per-request frame queue which the response body drains. The engine thread
//! never blocks on a client; a full queue ends that stream with an error
//! frame.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc as std_mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use speechserve_core::engine::{Engine, Poll};
use speechserve_core::model::SyntheticExecutor;
use speechserve_core::trace::ChunkEvent;
use speechserve_core::workload::default_output_tokens;
use speechserve_core::{EngineError, MetricsReport, Micros, RequestId, ScenarioSpec, Topology};
use tokio::sync::{mpsc, oneshot, Notify};

use crate::config::{Scenario, ServerSection};
use crate::frame::{ChunkFrame, WireFormat};

/// Response header carrying the engine request id.
pub const REQUEST_ID_HEADER: &str = "x-request-id";
/// Response header carrying the server-clock arrival time in microseconds.
pub const ARRIVAL_HEADER: &str = "x-server-arrival-us";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt_tokens: Option<u32>,
    /// Alternative to `prompt_tokens`: about one token per four bytes.
    pub text: Option<String>,
    pub output_tokens: Option<u32>,
    pub profile: Option<String>,
}

#[derive(Debug)]
enum Rejection {
    Busy,
    Invalid(String),
    Unavailable,
}

struct Admitted {
    id: RequestId,
    arrival: Micros,
    frames: mpsc::Receiver<ChunkFrame>,
}

enum Command {
    Submit {
        prompt_tokens: u32,
        output_tokens: u32,
        reply: oneshot::Sender<Result<Admitted, Rejection>>,
    },
    Metrics {
        reply: oneshot::Sender<MetricsReport>,
    },
}

#[derive(Clone)]
struct AppState {
    commands: std_mpsc::Sender<Command>,
    draining: Arc<AtomicBool>,
    profile: String,
    format: WireFormat,
}

/// A running service.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    draining: Arc<AtomicBool>,
    stop: Arc<Notify>,
    server: tokio::task::JoinHandle<io::Result<()>>,
    drain_timeout: Duration,
}

impl ServiceHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// New generate requests get 503 from now on; open streams continue.
    pub fn begin_drain(&self) {
        self.draining.store(true, Ordering::SeqCst);
    }

    /// Stops accepting requests and waits up to the drain timeout for
    /// in-flight streams to finish.
    pub async fn shutdown(self) -> io::Result<()> {
        self.begin_drain();
        self.stop.notify_one();
        match tokio::time::timeout(self.drain_timeout, self.server).await {
            Ok(joined) => joined.map_err(io::Error::other)?,
            Err(_) => Ok(()),
        }
    }

    /// Runs until ctrl-c or SIGTERM, then drains.
    pub async fn run_until_signal(self) -> io::Result<()> {
        shutdown_signal().await;
        self.shutdown().await
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

/// Binds `server.bind` (or `bind` when given) and starts serving.
pub async fn start(scenario: &Scenario, bind: Option<&str>, json: Option<bool>) -> Result<ServiceHandle, io::Error> {
    let spec = scenario.spec.clone();
    if matches!(spec.topology, Topology::DataParallel { .. }) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "serve supports single and disaggregated topologies",
        ));
    }
    let server = ServerSection {
        json: json.unwrap_or(scenario.server.json),
        ..scenario.server.clone()
    };
    let engine = spec
        .engine(0)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;

    let (tx, rx) = std_mpsc::channel();
    let max_live = server.max_live_requests as usize;
    let buffer = server.buffer_frames;
    thread::Builder::new()
        .name("engine".into())
        .spawn(move || engine_loop(engine, rx, max_live, buffer))?;

    let draining = Arc::new(AtomicBool::new(false));
    let state = AppState {
        commands: tx,
        draining: draining.clone(),
        profile: spec.profile.name.clone(),
        format: if server.json { WireFormat::JsonLines } else { WireFormat::Binary },
    };
    let app = Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/metrics", get(metrics))
        .route("/v1/healthz", get(healthz))
        .with_state(state);

    let listener = tokio::net::TcpListener::bind(bind.unwrap_or(&server.bind)).await?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(Notify::new());
    let stopped = stop.clone();
    let server_task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move { stopped.notified().await })
            .await
    });
    Ok(ServiceHandle {
        addr,
        draining,
        stop,
        server: server_task,
        drain_timeout: Duration::from_secs_f64(server.drain_timeout),
    })
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn prompt_len(req: &GenerateRequest) -> Result<u32, String> {
    match (req.prompt_tokens, &req.text) {
        (Some(_), Some(_)) => Err("give prompt_tokens or text, not both".into()),
        (Some(n), None) => Ok(n),
        (None, Some(t)) => Ok((t.len() as u32).div_ceil(4).max(1)),
        (None, None) => Err("prompt_tokens or text is required".into()),
    }
}

async fn generate(State(st): State<AppState>, body: Bytes) -> Response {
    if st.draining.load(Ordering::SeqCst) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "shutting down");
    }
    let req: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    if let Some(p) = &req.profile {
        if *p != st.profile {
            return error(StatusCode::BAD_REQUEST, format!("this server runs {}, not {p}", st.profile));
        }
    }
    let prompt_tokens = match prompt_len(&req) {
        Ok(n) => n,
        Err(m) => return error(StatusCode::BAD_REQUEST, m),
    };
    let output_tokens = req.output_tokens.unwrap_or_else(|| default_output_tokens(&st.profile));
    if output_tokens == 0 {
        return error(StatusCode::BAD_REQUEST, "output_tokens must be >= 1");
    }

    let (reply, answer) = oneshot::channel();
    let sent = st.commands.send(Command::Submit {
        prompt_tokens,
        output_tokens,
        reply,
    });
    let admitted = match (sent, answer.await) {
        (Ok(()), Ok(Ok(a))) => a,
        (Ok(()), Ok(Err(Rejection::Busy))) => return error(StatusCode::TOO_MANY_REQUESTS, "too many live requests"),
        (Ok(()), Ok(Err(Rejection::Invalid(m)))) => return error(StatusCode::BAD_REQUEST, m),
        _ => return error(StatusCode::SERVICE_UNAVAILABLE, "engine unavailable"),
    };

    let format = st.format;
    let id = admitted.id.0;
    let stream = futures::stream::unfold(
        (admitted.frames, false, 1u32, 0u64),
        move |(mut rx, done, next_index, last_ms)| async move {
            if done {
                return None;
            }
            let frame = match rx.recv().await {
                Some(f) => f,
                // Closed without a final frame: the queue overflowed.
                None => ChunkFrame::error(id, next_index, last_ms),
            };
            let bytes = format.encode(&frame);
            let state = (rx, frame.is_final(), frame.chunk_index + 1, frame.available_at_ms);
            Some((Ok::<_, io::Error>(bytes), state))
        },
    );
    let mut resp = Response::new(Body::from_stream(stream));
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(format.content_type()));
    headers.insert(REQUEST_ID_HEADER, HeaderValue::from(id));
    headers.insert(ARRIVAL_HEADER, HeaderValue::from(admitted.arrival.0));
    resp
}

async fn metrics(State(st): State<AppState>) -> Response {
    let (reply, answer) = oneshot::channel();
    if st.commands.send(Command::Metrics { reply }).is_err() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "engine unavailable");
    }
    match answer.await {
        Ok(report) => Json(report).into_response(),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "engine unavailable"),
    }
}

async fn healthz(State(st): State<AppState>) -> Response {
    if st.draining.load(Ordering::SeqCst) {
        (StatusCode::SERVICE_UNAVAILABLE, "draining").into_response()
    } else {
        (StatusCode::OK, "ok").into_response()
    }
}

struct Outbox {
    heap: BinaryHeap<Reverse<(Micros, u64)>>,
    pending: HashMap<u64, ChunkEvent>,
    seq: u64,
}

impl Outbox {
    fn push(&mut self, c: ChunkEvent) {
        self.heap.push(Reverse((c.available_time, self.seq)));
        self.pending.insert(self.seq, c);
        self.seq += 1;
    }

    fn next_time(&self) -> Option<Micros> {
        self.heap.peek().map(|Reverse((t, _))| *t)
    }

    fn pop_due(&mut self, now: Micros) -> Option<ChunkEvent> {
        match self.heap.peek() {
            Some(Reverse((t, _))) if *t <= now => {
                let Reverse((_, seq)) = self.heap.pop().expect("peeked");
                self.pending.remove(&seq)
            }
            _ => None,
        }
    }
}

fn to_ms(t: Micros) -> u64 {
    t.0 / 1000
}

/// Paces the engine against real time and delivers chunks when they become
/// available.
fn engine_loop(mut engine: Engine<SyntheticExecutor>, rx: std_mpsc::Receiver<Command>, max_live: usize, buffer: usize) {
    let epoch = Instant::now();
    let elapsed = || Micros(epoch.elapsed().as_micros() as u64);
    let mut streams: HashMap<RequestId, mpsc::Sender<ChunkFrame>> = HashMap::new();
    let mut outbox = Outbox {
        heap: BinaryHeap::new(),
        pending: HashMap::new(),
        seq: 0,
    };
    // Set when the engine reported Idle; cleared by new submissions.
    let mut blocked: Option<Option<Micros>> = None;
    let mut closed = false;

    let handle = |cmd: Command,
                  engine: &mut Engine<SyntheticExecutor>,
                  streams: &mut HashMap<RequestId, mpsc::Sender<ChunkFrame>>,
                  blocked: &mut Option<Option<Micros>>| match cmd {
        Command::Submit {
            prompt_tokens,
            output_tokens,
            reply,
        } => {
            if engine.live_count() + engine.pending_count() >= max_live {
                let _ = reply.send(Err(Rejection::Busy));
                return;
            }
            let arrival = elapsed();
            match engine.submit(arrival, prompt_tokens, output_tokens) {
                Ok(id) => {
                    let (tx, frames) = mpsc::channel(buffer);
                    streams.insert(id, tx);
                    *blocked = None;
                    let _ = reply.send(Ok(Admitted { id, arrival, frames }));
                }
                Err(EngineError::Model(e)) => {
                    let _ = reply.send(Err(Rejection::Invalid(e.to_string())));
                }
                Err(_) => {
                    let _ = reply.send(Err(Rejection::Unavailable));
                }
            }
        }
        Command::Metrics { reply } => {
            let _ = reply.send(MetricsReport::from_trace(&engine.trace_snapshot()));
        }
    };

    loop {
        loop {
            match rx.try_recv() {
                Ok(cmd) => handle(cmd, &mut engine, &mut streams, &mut blocked),
                Err(std_mpsc::TryRecvError::Empty) => break,
                Err(std_mpsc::TryRecvError::Disconnected) => {
                    closed = true;
                    break;
                }
            }
        }

        let now = elapsed();
        while let Some(c) = outbox.pop_due(now) {
            let Some(tx) = streams.get(&c.request) else { continue };
            let frame = ChunkFrame::audio(
                c.request.0,
                c.index,
                to_ms(c.available_time),
                (c.playback_duration.0 / 1000) as u32,
                c.is_final,
            );
            match tx.try_send(frame) {
                Ok(()) if !c.is_final => {}
                // Final, client gone, or queue full: end the stream.
                _ => {
                    streams.remove(&c.request);
                }
            }
        }

        let may_poll = match blocked {
            None => true,
            Some(Some(w)) => w <= now,
            Some(None) => false,
        };
        if !engine.is_drained() && engine.host_ready() <= now && may_poll {
            match engine.poll(now) {
                Ok(Poll::Ran(report)) => {
                    blocked = None;
                    for c in report.chunks {
                        outbox.push(c);
                    }
                    continue;
                }
                Ok(Poll::Idle { wake }) => blocked = Some(wake),
                Ok(Poll::Drained) => {}
                Err(_) => {
                    // Engine invariant broken: fail every open stream.
                    streams.clear();
                    break;
                }
            }
        }

        if closed && engine.is_drained() && outbox.next_time().is_none() {
            break;
        }
        let engine_wake = if engine.is_drained() {
            None
        } else if engine.host_ready() > now {
            Some(engine.host_ready())
        } else {
            match blocked {
                Some(w) => w,
                None => Some(now),
            }
        };
        let next = [engine_wake, outbox.next_time()].into_iter().flatten().min();
        let cmd = match next {
            Some(t) => {
                let wait = Duration::from_micros(t.0.saturating_sub(elapsed().0));
                match rx.recv_timeout(wait) {
                    Ok(c) => Some(c),
                    Err(std_mpsc::RecvTimeoutError::Timeout) => None,
                    Err(std_mpsc::RecvTimeoutError::Disconnected) => {
                        closed = true;
                        // Keep pacing the remaining work.
                        thread::sleep(wait);
                        None
                    }
                }
            }
            None if closed => break,
            None => match rx.recv() {
                Ok(c) => Some(c),
                Err(_) => {
                    closed = true;
                    None
                }
            },
        };
        if let Some(c) = cmd {
            handle(c, &mut engine, &mut streams, &mut blocked);
        }
    }
}

/// The simulated counterpart of a live run: same engine settings, virtual
/// clock.
pub fn virtual_twin(spec: &ScenarioSpec) -> ScenarioSpec {
    let mut twin = spec.clone();
    twin.clock = speechserve_core::engine::ClockMode::Virtual;
    twin
}
