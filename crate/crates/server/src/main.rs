use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use speechserve::config::{self, ConfigError};
use speechserve::{loadtest, runner, service};
use speechserve_core::metrics::CsvReportWriter;
use speechserve_core::workload::{LengthDist, WorkloadSpec};

#[derive(Parser)]
#[command(name = "speechserve", version, about = "Streaming speech-model serving simulator and service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Scenario config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set workload.rate=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario (or every point of its sweep) and write the metrics
    /// CSV, traces and manifest.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: `output.dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP streaming API on the wall clock.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        /// Listen address (default: `server.bind`).
        #[arg(long)]
        bind: Option<String>,
        /// Stream JSON-lines frames instead of binary ones.
        #[arg(long)]
        json: bool,
    },
    /// Drive a running server with Poisson arrivals and score what the
    /// client observed.
    Loadtest(LoadtestArgs),
    /// Print the config JSON schema.
    Schema,
}

#[derive(Args)]
struct LoadtestArgs {
    /// Server base URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    url: String,
    /// Take the workload from this config instead of the flags below.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Requests per second.
    #[arg(long)]
    rate: Option<f64>,
    /// Seconds of arrivals.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prompt_tokens: Option<u32>,
    #[arg(long)]
    output_tokens: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
    /// Metrics CSV (same columns as `run`).
    #[arg(long, default_value = "loadtest.csv")]
    out: PathBuf,
    /// Also write the client-side trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

/// A failure reported as one JSON object on stderr.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    key: Option<String>,
    path: Option<PathBuf>,
}

impl Failure {
    fn new(code: u8, kind: &'static str, message: impl ToString) -> Self {
        Failure {
            code,
            kind,
            message: message.to_string(),
            key: None,
            path: None,
        }
    }

    fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Failure {
            path: Some(path.to_path_buf()),
            ..Failure::new(3, "io", e)
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let path = match &e {
            ConfigError::Io { path, .. } | ConfigError::Syntax { path, .. } | ConfigError::Invalid { path, .. } => {
                Some(path.clone())
            }
            ConfigError::Override(_) => None,
        };
        Failure {
            key: e.key().map(str::to_string),
            path,
            ..Failure::new(2, "config", &e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let report = json!({
                "error": {
                    "kind": f.kind,
                    "message": f.message,
                    "key": f.key,
                    "path": f.path,
                }
            });
            eprintln!("{report}");
            ExitCode::from(f.code)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::new(3, "io", e))
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, out } => {
            let scenario = config::load(&config.config, &config.overrides)?;
            let outcome = runner::run(&scenario, out.as_deref()).map_err(|e| match e {
                runner::RunError::Io { path, source } => Failure::io(&path, source),
                other => Failure::new(1, "run", other),
            })?;
            for (point, report) in &outcome.rows {
                println!(
                    "{:<16} rate {:>7} p90 ttfa {:>9} viability {:.4} completed {}",
                    point.policy.as_str(),
                    point.rate,
                    report.ttfa_p90.map(|v| format!("{v:.3}s")).unwrap_or_else(|| "-".into()),
                    report.viability_fraction,
                    report.requests_completed,
                );
            }
            println!("wrote {}", outcome.csv.display());
            println!("wrote {}", outcome.manifest.display());
            Ok(())
        }
        Command::Serve { config, bind, json } => {
            let scenario = config::load(&config.config, &config.overrides)?;
            runtime()?.block_on(async {
                let handle = service::start(&scenario, bind.as_deref(), json.then_some(true))
                    .await
                    .map_err(|e| Failure::new(3, "io", e))?;
                println!("listening on {}", handle.base_url());
                handle.run_until_signal().await.map_err(|e| Failure::new(3, "io", e))
            })
        }
        Command::Loadtest(args) => loadtest_cmd(args),
        Command::Schema => {
            print!("{}", config::SCHEMA);
            Ok(())
        }
    }
}

fn loadtest_cmd(args: LoadtestArgs) -> Result<(), Failure> {
    let mut workload = match &args.config {
        Some(path) => config::load(path, &args.overrides)?.workload,
        None => WorkloadSpec::poisson(0.5, 60.0, 200, 0),
    };
    if let Some(r) = args.rate {
        workload.rate = r;
    }
    if let Some(d) = args.duration {
        workload.duration = d;
    }
    if let Some(s) = args.seed {
        workload.seed = s;
    }
    if let Some(n) = args.prompt_tokens {
        workload.prompt_length = LengthDist::Fixed(n);
    }
    if let Some(n) = args.output_tokens {
        workload.output_length = LengthDist::Fixed(n);
    }
    let requests = workload.generate().map_err(|e| Failure::new(2, "config", e))?;
    let options = loadtest::LoadtestOptions {
        url: args.url.clone(),
        timeout: Duration::from_secs_f64(args.timeout),
    };
    let result = runtime()?.block_on(loadtest::run(&options, &requests));

    let file = File::create(&args.out).map_err(|e| Failure::io(&args.out, e))?;
    let mut csv = CsvReportWriter::new(BufWriter::new(file)).map_err(|e| Failure::io(&args.out, e))?;
    csv.write_row(workload.rate, "loadtest", &result.report)
        .and_then(|_| csv.finish()?.flush())
        .map_err(|e| Failure::io(&args.out, e))?;
    if let Some(path) = &args.trace {
        let file = File::create(path).map_err(|e| Failure::io(path, e))?;
        result
            .trace
            .write_jsonl(BufWriter::new(file))
            .map_err(|e| Failure::io(path, e))?;
    }

    let r = &result.report;
    println!(
        "requests {} completed {} errored {} p90 ttfa {} viability {:.4}",
        requests.len(),
        r.requests_completed,
        result.errored(),
        r.ttfa_p90.map(|v| format!("{v:.3}s")).unwrap_or_else(|| "-".into()),
        r.viability_fraction,
    );
    for rec in result.records.iter().filter(|r| r.error.is_some()) {
        eprintln!("request {}: {}", rec.index, rec.error.as_deref().unwrap_or_default());
    }
    if result.errored() > 0 {
        return Err(Failure::new(
            4,
            "loadtest",
            format!("{} of {} requests failed", result.errored(), requests.len()),
        ));
    }
    Ok(())
}
