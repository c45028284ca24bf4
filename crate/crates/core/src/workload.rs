//! Request stream generation: Poisson or burst arrivals with configurable
//! prompt and output length distributions.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Micros;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("bad distribution: {0}")]
    BadDistribution(String),
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("reading histogram {path}: {source}")]
    Histogram {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// A `(length, weight)` histogram, either inline or loaded from a
/// two-column CSV file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Empirical {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<(u32, f64)>,
}

impl Empirical {
    /// Reads `length,weight` rows. A header row is allowed.
    pub fn from_csv(path: &Path) -> Result<Empirical, WorkloadError> {
        let err = |source| WorkloadError::Histogram {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(err)?;
        let mut entries = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(err)?;
            let parsed = (row.get(0).map(str::parse::<u32>), row.get(1).map(str::parse::<f64>));
            match parsed {
                (Some(Ok(len)), Some(Ok(w))) if row.len() == 2 => entries.push((len, w)),
                _ if line == 0 => continue,
                _ => {
                    return Err(WorkloadError::BadDistribution(format!(
                        "{}: row {} is not `length,weight`",
                        path.display(),
                        line + 1
                    )))
                }
            }
        }
        Ok(Empirical {
            path: Some(path.to_path_buf()),
            entries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Fixed(u32),
    UniformInt { lo: u32, hi: u32 },
    Empirical(Empirical),
}

impl LengthDist {
    /// Loads any referenced histogram file so the distribution is
    /// self-contained. Relative paths resolve against `base`.
    pub fn resolve(&mut self, base: Option<&Path>) -> Result<(), WorkloadError> {
        if let LengthDist::Empirical(e) = self {
            if e.entries.is_empty() {
                let Some(path) = &e.path else {
                    return Err(WorkloadError::BadDistribution(
                        "empirical distribution needs `path` or `entries`".into(),
                    ));
                };
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                let loaded = Empirical::from_csv(&full)?;
                e.entries = loaded.entries;
            }
        }
        Ok(())
    }

    pub fn sampler(&self) -> Result<LengthSampler, WorkloadError> {
        let bad = |m: String| Err(WorkloadError::BadDistribution(m));
        match self {
            LengthDist::Fixed(0) => bad("fixed length must be >= 1".into()),
            LengthDist::Fixed(n) => Ok(LengthSampler::Fixed(*n)),
            LengthDist::UniformInt { lo, hi } if *lo == 0 || lo > hi => {
                bad(format!("uniform_int needs 1 <= lo <= hi, got [{lo}, {hi}]"))
            }
            LengthDist::UniformInt { lo, hi } => Ok(LengthSampler::Uniform(*lo, *hi)),
            LengthDist::Empirical(e) => {
                if e.entries.is_empty() {
                    return bad("empirical histogram is empty or not loaded".into());
                }
                if let Some((len, _)) = e.entries.iter().find(|(l, _)| *l == 0) {
                    return bad(format!("histogram length {len} must be >= 1"));
                }
                let weights = e.entries.iter().map(|&(_, w)| w);
                let index = WeightedIndex::new(weights)
                    .map_err(|err| WorkloadError::BadDistribution(format!("histogram weights: {err}")))?;
                Ok(LengthSampler::Weighted(
                    e.entries.iter().map(|&(l, _)| l).collect(),
                    index,
                ))
            }
        }
    }
}

/// A validated, ready-to-draw length distribution.
#[derive(Debug, Clone)]
pub enum LengthSampler {
    Fixed(u32),
    Uniform(u32, u32),
    Weighted(Vec<u32>, WeightedIndex<f64>),
}

impl LengthSampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            LengthSampler::Fixed(n) => *n,
            LengthSampler::Uniform(lo, hi) => rng.random_range(*lo..=*hi),
            LengthSampler::Weighted(lengths, index) => lengths[index.sample(rng)],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Exponential inter-arrival gaps at `rate` over `duration`.
    #[default]
    Poisson,
    /// `count` requests at once, one microsecond apart.
    Burst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default)]
    pub arrival: ArrivalProcess,
    /// Requests per second (Poisson).
    #[serde(default)]
    pub rate: f64,
    /// Seconds (Poisson).
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Number of requests (Burst).
    #[serde(default)]
    pub count: u32,
    pub prompt_length: LengthDist,
    pub output_length: LengthDist,
    #[serde(default)]
    pub seed: u64,
}

fn default_duration() -> f64 {
    60.0
}

/// Output length giving about eight seconds of audio for each built-in
/// profile.
pub fn default_output_tokens(profile_name: &str) -> u32 {
    match profile_name {
        "orpheus_like" => 688,
        "depth_like" => 100,
        _ => 200,
    }
}

impl WorkloadSpec {
    pub fn poisson(rate: f64, duration: f64, output_tokens: u32, seed: u64) -> Self {
        WorkloadSpec {
            arrival: ArrivalProcess::Poisson,
            rate,
            duration,
            count: 0,
            prompt_length: LengthDist::Fixed(50),
            output_length: LengthDist::Fixed(output_tokens),
            seed,
        }
    }

    pub fn burst(count: u32, output_tokens: u32, seed: u64) -> Self {
        WorkloadSpec {
            arrival: ArrivalProcess::Burst,
            count,
            ..WorkloadSpec::poisson(0.0, default_duration(), output_tokens, seed)
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return Err(WorkloadError::Invalid(format!("rate must be >= 0, got {}", self.rate)));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(WorkloadError::Invalid(format!(
                "duration must be > 0, got {}",
                self.duration
            )));
        }
        self.prompt_length.sampler()?;
        self.output_length.sampler()?;
        Ok(())
    }

    pub fn arrivals(&self) -> Vec<Micros> {
        match self.arrival {
            ArrivalProcess::Poisson => poisson_arrivals(self.rate, self.duration, self.seed),
            ArrivalProcess::Burst => burst_arrivals(self.count),
        }
    }

    /// The full request list, in arrival order.
    pub fn generate(&self) -> Result<Vec<RequestSpec>, WorkloadError> {
        self.validate()?;
        let prompt = self.prompt_length.sampler()?;
        let output = self.output_length.sampler()?;
        let mut rng = stream_rng(self.seed, LENGTH_STREAM);
        Ok(self
            .arrivals()
            .into_iter()
            .map(|t| sample_request(&prompt, &output, t, &mut rng))
            .collect())
    }
}

/// One request to submit: when, and how long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub arrival: Micros,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

const ARRIVAL_STREAM: u64 = 1;
const LENGTH_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Arrival times with i.i.d. exponential gaps of mean `1/rate`, truncated at
/// `duration` seconds. Times are strictly increasing: ties on the microsecond
/// clock are pushed forward by one tick.
pub fn poisson_arrivals(rate: f64, duration: f64, seed: u64) -> Vec<Micros> {
    if rate.is_nan() || rate <= 0.0 {
        return Vec::new();
    }
    let exp = Exp::new(rate).expect("positive rate");
    let mut rng = stream_rng(seed, ARRIVAL_STREAM);
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut last: Option<Micros> = None;
    loop {
        t += exp.sample(&mut rng);
        if t >= duration {
            break;
        }
        let mut at = Micros::from_secs_f64(t);
        if let Some(prev) = last {
            at = at.max(prev + Micros(1));
        }
        out.push(at);
        last = Some(at);
    }
    out
}

pub fn burst_arrivals(count: u32) -> Vec<Micros> {
    (0..u64::from(count)).map(Micros).collect()
}

pub fn sample_request<R: Rng + ?Sized>(
    prompt: &LengthSampler,
    output: &LengthSampler,
    arrival: Micros,
    rng: &mut R,
) -> RequestSpec {
    RequestSpec {
        arrival,
        prompt_tokens: prompt.draw(rng),
        output_tokens: output.draw(rng),
    }
}
