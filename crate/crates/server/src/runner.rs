//! Scenario and sweep execution with file outputs.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use speechserve_core::engine::run_scenario;
use speechserve_core::metrics::CsvReportWriter;
use speechserve_core::workload::WorkloadError;
use speechserve_core::{EngineError, MetricsReport};
use thiserror::Error;

use crate::config::{RunPoint, Scenario};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestRun {
    pub rate: f64,
    pub policy: String,
    pub requests: usize,
    pub trace: String,
}

/// Everything needed to reproduce the outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub workload_seed: u64,
    pub profile: String,
    pub csv: String,
    pub runs: Vec<ManifestRun>,
    pub config: serde_json::Value,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub csv: PathBuf,
    pub manifest: PathBuf,
    pub rows: Vec<(RunPoint, MetricsReport)>,
}

/// File name of the trace for one sweep point.
pub fn trace_name(point: RunPoint) -> String {
    format!("{}-rate{}.jsonl", point.policy, point.rate)
}

/// Runs every sweep point in order, writing one CSV row and one trace file
/// per point plus the manifest. `dir` overrides the configured output
/// directory.
pub fn run(scenario: &Scenario, dir: Option<&Path>) -> Result<RunOutcome, RunError> {
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| scenario.output.dir.clone());
    let traces = dir.join(&scenario.output.traces);
    fs::create_dir_all(&traces).map_err(io_err(&traces))?;

    let csv_path = dir.join(&scenario.output.csv);
    let csv_file = File::create(&csv_path).map_err(io_err(&csv_path))?;
    let mut csv = CsvReportWriter::new(BufWriter::new(csv_file)).map_err(io_err(&csv_path))?;

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &point in &scenario.points {
        let (spec, workload) = scenario.at(point);
        let requests = workload.generate()?;
        let trace = run_scenario(&spec, &requests)?;
        let report = MetricsReport::from_trace(&trace);
        csv.write_row(point.rate, point.policy.as_str(), &report)
            .map_err(io_err(&csv_path))?;

        let name = trace_name(point);
        let path = traces.join(&name);
        let file = File::create(&path).map_err(io_err(&path))?;
        trace.write_jsonl(BufWriter::new(file)).map_err(io_err(&path))?;
        runs.push(ManifestRun {
            rate: point.rate,
            policy: point.policy.to_string(),
            requests: requests.len(),
            trace: format!("{}/{name}", scenario.output.traces),
        });
        rows.push((point, report));
    }
    csv.finish()
        .and_then(|mut w| w.flush())
        .map_err(io_err(&csv_path))?;

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: scenario.config_hash.clone(),
        seed: scenario.spec.seed,
        workload_seed: scenario.workload.seed,
        profile: scenario.spec.profile.name.clone(),
        csv: scenario.output.csv.clone(),
        runs,
        config: scenario.effective.clone(),
    };
    let manifest_path = dir.join(&scenario.output.manifest);
    let mut text = serde_json::to_string_pretty(&manifest).expect("serializable");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;

    Ok(RunOutcome {
        dir,
        csv: csv_path,
        manifest: manifest_path,
        rows,
    })
}
