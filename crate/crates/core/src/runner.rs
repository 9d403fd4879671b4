//! Experiment orchestration: configuration, Monte-Carlo execution,
//! aggregation and output files.
//!
//! A configuration is flat `key = value` text with dotted keys and `#`
//! comments:
//!
//! ```text
//! topology.kind = grid
//! topology.K = 100
//! problem.family = ls
//! methods = diffusion, exact_diffusion
//! mu = 0.005
//! iterations = 20000
//! runs = 50
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::algorithms::{run_methods, AlgorithmConfig, AlgorithmError, Method, RunOptions};
use crate::metrics::{
    steady_state, trajectories_to_csv, Accumulator, MetricsError, MsdTrajectory, SteadyState,
    DEFAULT_WINDOW_FRACTION,
};
use crate::problems::{
    make_logistic_problem, make_ls_problem, Family, LogisticSpec, LsSpec, ProblemError,
    ProblemInstance,
};
use crate::theory::{theory_report, TheoryError, TheoryReport};
use crate::topology::{
    build_graph, combination_matrix, CombinationMatrix, TopologyError, TopologyKind, WeightRule,
};

/// Environment variable giving the default number of worker threads.
pub const THREADS_ENV: &str = "DIFFSIM_THREADS";
pub const DEFAULT_RUNS: usize = 50;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing required key '{0}'")]
    MissingKey(String),
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("key '{0}' given more than once")]
    DuplicateKey(String),
    #[error("invalid value for '{key}': {message}")]
    InvalidValue { key: String, message: String },
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Topology {
        context: &'static str,
        source: TopologyError,
    },
    #[error("{context}: {source}")]
    Problem {
        context: &'static str,
        source: ProblemError,
    },
    #[error("{context}: {source}")]
    Theory {
        context: &'static str,
        source: TheoryError,
    },
    #[error("{context}: {source}")]
    Algorithm {
        context: &'static str,
        source: AlgorithmError,
    },
    #[error("{context}: {source}")]
    Metrics {
        context: &'static str,
        source: MetricsError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

impl RunnerError {
    /// `true` for failures of the numerics (solver non-convergence,
    /// eigensolver failures, divergence) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            RunnerError::Topology { source, .. } => !matches!(source, TopologyError::InvalidInput(_)),
            RunnerError::Problem { source, .. } => !matches!(source, ProblemError::InvalidInput(_)),
            RunnerError::Theory { source, .. } => !matches!(source, TheoryError::InvalidInput(_)),
            RunnerError::Algorithm { source, .. } => {
                matches!(source, AlgorithmError::Divergence { .. })
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    pub k: usize,
    pub weights: WeightRule,
    pub edge_probability: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemConfig {
    LeastSquares {
        m: usize,
        seed: u64,
        lambda_range: (f64, f64),
        noise_var: f64,
        zero_bias: bool,
        deterministic: bool,
    },
    Logistic {
        m: usize,
        seed: u64,
        rho: f64,
        eval_sample_count: usize,
        zero_bias: bool,
        noise_samples: usize,
    },
}

impl ProblemConfig {
    pub fn family(&self) -> Family {
        match self {
            ProblemConfig::LeastSquares { .. } => Family::LeastSquares,
            ProblemConfig::Logistic { .. } => Family::Logistic,
        }
    }

    /// Instantiates the problem for `k` agents.
    pub fn build(&self, k: usize) -> Result<ProblemInstance, ProblemError> {
        match *self {
            ProblemConfig::LeastSquares {
                m,
                seed,
                lambda_range,
                noise_var,
                zero_bias,
                deterministic,
            } => make_ls_problem(&LsSpec {
                k,
                m,
                seed,
                lambda_range,
                noise_var,
                zero_bias,
                deterministic,
            }),
            ProblemConfig::Logistic {
                m,
                seed,
                rho,
                eval_sample_count,
                zero_bias,
                noise_samples,
            } => make_logistic_problem(&LogisticSpec {
                k,
                m,
                seed,
                rho,
                eval_sample_count,
                zero_bias,
                noise_samples,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub topology: TopologyConfig,
    pub problem: ProblemConfig,
    /// Methods in output order; they share `iterations`.
    pub methods: Vec<AlgorithmConfig>,
    pub iterations: usize,
    pub runs: usize,
    pub seed: u64,
    /// CSV destination; the summary goes next to it with a `.json`
    /// extension.
    pub output: Option<PathBuf>,
    pub emit_theory: bool,
    /// Worker threads; `None` falls back to the environment.
    pub parallelism: Option<usize>,
    pub window_fraction: f64,
    /// Hash the samples each method consumes and check they agree.
    pub audit_streams: bool,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path).map_err(|source| RunnerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(text.parse()?)
    }

    /// Checks the cross-field invariants.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::InvalidValue {
            key: key.into(),
            message,
        };
        if self.methods.is_empty() {
            return Err(invalid("methods", "at least one method is required".into()));
        }
        for (i, a) in self.methods.iter().enumerate() {
            if self.methods[..i].iter().any(|b| b.method == a.method) {
                return Err(invalid("methods", format!("'{}' listed twice", a.method)));
            }
            if a.iterations != self.iterations {
                return Err(invalid("iterations", "methods must share the iteration count".into()));
            }
            if let Err(e) = a.validate() {
                return Err(invalid(&format!("method.{}.mu", a.method), e.to_string()));
            }
        }
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be at least 1".into()));
        }
        if self.runs == 0 {
            return Err(invalid("runs", "must be at least 1".into()));
        }
        if self.topology.k == 0 {
            return Err(invalid("topology.K", "must be at least 1".into()));
        }
        if self.parallelism == Some(0) {
            return Err(invalid("parallelism", "must be at least 1".into()));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 0.5) {
            return Err(invalid("window_fraction", "must lie in (0, 0.5]".into()));
        }
        Ok(())
    }

    /// Step size used for the headline theory figures: the shared `mu`
    /// when all methods agree, otherwise the first method's.
    pub fn reference_mu(&self) -> f64 {
        self.methods[0].mu
    }

    /// Replaces every method's step size.
    pub fn set_mu(&mut self, mu: f64) {
        for m in &mut self.methods {
            m.mu = mu;
        }
    }

    /// Canonical text form. Parsing it gives back an equal config, and
    /// its SHA-256 is the config digest. Output location and thread count
    /// do not affect results and are left out.
    pub fn normalized(&self) -> String {
        let mut s = String::new();
        let t = &self.topology;
        let _ = writeln!(s, "topology.kind = {}", t.kind);
        let _ = writeln!(s, "topology.K = {}", t.k);
        let _ = writeln!(s, "topology.weights = {}", t.weights);
        if let Some(p) = t.edge_probability {
            let _ = writeln!(s, "topology.edge_probability = {p:?}");
        }
        if let Some(seed) = t.seed {
            let _ = writeln!(s, "topology.seed = {seed}");
        }
        let _ = writeln!(s, "problem.family = {}", self.problem.family());
        match &self.problem {
            ProblemConfig::LeastSquares {
                m,
                seed,
                lambda_range,
                noise_var,
                zero_bias,
                deterministic,
            } => {
                let _ = writeln!(s, "problem.M = {m}");
                let _ = writeln!(s, "problem.seed = {seed}");
                let _ = writeln!(
                    s,
                    "problem.lambda_range = {:?}, {:?}",
                    lambda_range.0, lambda_range.1
                );
                let _ = writeln!(s, "problem.noise_var = {noise_var:?}");
                let _ = writeln!(s, "problem.zero_bias = {zero_bias}");
                let _ = writeln!(s, "problem.deterministic = {deterministic}");
            }
            ProblemConfig::Logistic {
                m,
                seed,
                rho,
                eval_sample_count,
                zero_bias,
                noise_samples,
            } => {
                let _ = writeln!(s, "problem.M = {m}");
                let _ = writeln!(s, "problem.seed = {seed}");
                let _ = writeln!(s, "problem.rho = {rho:?}");
                let _ = writeln!(s, "problem.eval_sample_count = {eval_sample_count}");
                let _ = writeln!(s, "problem.zero_bias = {zero_bias}");
                let _ = writeln!(s, "problem.noise_samples = {noise_samples}");
            }
        }
        let names: Vec<&str> = self.methods.iter().map(|m| m.method.name()).collect();
        let _ = writeln!(s, "methods = {}", names.join(", "));
        for m in &self.methods {
            let _ = writeln!(s, "method.{}.mu = {:?}", m.method, m.mu);
        }
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "runs = {}", self.runs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "emit_theory = {}", self.emit_theory);
        let _ = writeln!(s, "window_fraction = {:?}", self.window_fraction);
        let _ = writeln!(s, "audit_streams = {}", self.audit_streams);
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.normalized().as_bytes()))
    }
}

/// Raw `key = value` pairs, each remembered with its line number.
struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: idx + 1,
                message: format!("expected 'key = value', found '{line}'"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: idx + 1,
                    message: "empty key".into(),
                });
            }
            let canonical = canonical_key(key);
            if map
                .insert(canonical.clone(), (idx + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(ConfigError::DuplicateKey(key.to_string()));
            }
        }
        Ok(Entries { map })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(&canonical_key(key)).map(|(_, v)| v)
    }

    fn require(&mut self, key: &str) -> Result<String, ConfigError> {
        self.take(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key).map(|v| parse_value(key, &v)).transpose()
    }

    fn bool(&mut self, key: &str) -> Result<Option<bool>, ConfigError> {
        self.take(key).map(|v| parse_bool(key, &v)).transpose()
    }
}

/// Keys are case-sensitive except that `K`/`M` are accepted in either
/// case; the canonical spelling is upper case.
fn canonical_key(key: &str) -> String {
    match key {
        "topology.k" => "topology.K".into(),
        "problem.m" => "problem.M".into(),
        other => other.to_string(),
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        message: format!("'{value}': {e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.into(),
            message: format!("'{value}' is not a boolean"),
        }),
    }
}

/// Splits `a, b` or `[a, b]` into trimmed, non-empty items.
fn parse_list(value: &str) -> Vec<String> {
    value
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut e = Entries::parse(text)?;

        let kind: TopologyKind = parse_value("topology.kind", &e.require("topology.kind")?)?;
        let k: usize = parse_value("topology.K", &e.require("topology.K")?)?;
        let weights = match e.parsed::<WeightRule>("topology.weights")? {
            Some(w) => w,
            None if kind == TopologyKind::Complete => WeightRule::Uniform,
            None => WeightRule::Metropolis,
        };
        let topology = TopologyConfig {
            kind,
            k,
            weights,
            edge_probability: e.parsed("topology.edge_probability")?,
            seed: e.parsed("topology.seed")?,
        };

        let seed: u64 = e.parsed("seed")?.unwrap_or(0);
        let family: Family = parse_value("problem.family", &e.require("problem.family")?)?;
        let problem_seed = e.parsed("problem.seed")?.unwrap_or(seed);
        let zero_bias = e.bool("problem.zero_bias")?.unwrap_or(false);
        let problem = match family {
            Family::LeastSquares => {
                let d = LsSpec::default();
                let lambda_range = match e.take("problem.lambda_range") {
                    Some(v) => {
                        let items = parse_list(&v);
                        if items.len() != 2 {
                            return Err(ConfigError::InvalidValue {
                                key: "problem.lambda_range".into(),
                                message: format!("expected two numbers 'lo, hi', found '{v}'"),
                            });
                        }
                        (
                            parse_value("problem.lambda_range", &items[0])?,
                            parse_value("problem.lambda_range", &items[1])?,
                        )
                    }
                    None => d.lambda_range,
                };
                ProblemConfig::LeastSquares {
                    m: e.parsed("problem.M")?.unwrap_or(d.m),
                    seed: problem_seed,
                    lambda_range,
                    noise_var: e.parsed("problem.noise_var")?.unwrap_or(d.noise_var),
                    zero_bias,
                    deterministic: e.bool("problem.deterministic")?.unwrap_or(false),
                }
            }
            Family::Logistic => {
                let d = LogisticSpec::default();
                if e.bool("problem.deterministic")? == Some(true) {
                    return Err(ConfigError::InvalidValue {
                        key: "problem.deterministic".into(),
                        message: "the logistic family has no deterministic mode".into(),
                    });
                }
                ProblemConfig::Logistic {
                    m: e.parsed("problem.M")?.unwrap_or(d.m),
                    seed: problem_seed,
                    rho: e.parsed("problem.rho")?.unwrap_or(d.rho),
                    eval_sample_count: e
                        .parsed("problem.eval_sample_count")?
                        .unwrap_or(d.eval_sample_count),
                    zero_bias,
                    noise_samples: e.parsed("problem.noise_samples")?.unwrap_or(d.noise_samples),
                }
            }
        };

        let iterations: usize = parse_value("iterations", &e.require("iterations")?)?;
        let method_names = parse_list(&e.require("methods")?);
        let shared_mu: Option<f64> = e.parsed("mu")?;
        let mut overrides: BTreeMap<Method, f64> = BTreeMap::new();
        let override_keys: Vec<String> = e
            .map
            .keys()
            .filter(|k| k.starts_with("method.") && k.ends_with(".mu"))
            .cloned()
            .collect();
        for key in override_keys {
            let name = &key["method.".len()..key.len() - ".mu".len()];
            let method: Method = name.parse().map_err(|_| ConfigError::UnknownKey(key.clone()))?;
            let value = parse_value(&key, &e.take(&key).unwrap_or_default())?;
            if overrides.insert(method, value).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        let mut methods = Vec::with_capacity(method_names.len());
        for name in &method_names {
            let method: Method = parse_value("methods", name)?;
            let own = overrides.remove(&method);
            let mu = own.or(shared_mu).ok_or_else(|| ConfigError::MissingKey("mu".into()))?;
            methods.push(AlgorithmConfig {
                method,
                mu,
                iterations,
            });
        }
        if let Some(method) = overrides.keys().next() {
            return Err(ConfigError::InvalidValue {
                key: format!("method.{method}.mu"),
                message: format!("'{method}' is not in methods"),
            });
        }

        let config = ExperimentConfig {
            topology,
            problem,
            methods,
            iterations,
            runs: e.parsed("runs")?.unwrap_or(DEFAULT_RUNS),
            seed,
            output: e.take("output").map(PathBuf::from),
            emit_theory: e.bool("emit_theory")?.unwrap_or(false),
            parallelism: e.parsed("parallelism")?,
            window_fraction: e.parsed("window_fraction")?.unwrap_or(DEFAULT_WINDOW_FRACTION),
            audit_streams: e.bool("audit_streams")?.unwrap_or(false),
        };
        if let Some(key) = e.map.keys().next() {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        config.validate()?;
        Ok(config)
    }
}

/// Network and problem built from a config.
pub struct Setup {
    pub comb: CombinationMatrix,
    pub problem: ProblemInstance,
}

pub fn build_setup(config: &ExperimentConfig) -> Result<Setup, RunnerError> {
    let t = &config.topology;
    let graph = build_graph(t.kind, t.k, t.edge_probability, t.seed).map_err(|source| {
        RunnerError::Topology {
            context: "topology",
            source,
        }
    })?;
    let comb = combination_matrix(&graph, t.weights).map_err(|source| RunnerError::Topology {
        context: "topology.weights",
        source,
    })?;
    let problem = config
        .problem
        .build(t.k)
        .map_err(|source| RunnerError::Problem {
            context: "problem",
            source,
        })?;
    Ok(Setup { comb, problem })
}

/// Theory quantities at the reference step size, without simulating.
pub fn theory_for(config: &ExperimentConfig) -> Result<TheoryReport, RunnerError> {
    config.validate()?;
    let setup = build_setup(config)?;
    theory_report(&setup.problem, &setup.comb, config.reference_mu(), config.emit_theory).map_err(
        |source| RunnerError::Theory {
            context: "theory",
            source,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceInfo {
    pub run: usize,
    pub iteration: usize,
}

/// Aggregated outcome for one method.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub mu: f64,
    /// `None` when any run diverged.
    pub trajectory: Option<MsdTrajectory>,
    pub steady: Option<SteadyState>,
    /// First diverging run (in run-index order).
    pub divergence: Option<DivergenceInfo>,
    /// Combined SHA-256 of every sample the method consumed, when audited.
    pub stream_digest: Option<String>,
    pub theory: TheoryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub mu: f64,
    pub steady_state_db: Option<f64>,
    pub steady_state_stderr_db: Option<f64>,
    pub nonstationary: Option<bool>,
    pub msd_theory_db: f64,
    pub regime: String,
    pub diverged: Option<DivergenceInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream_digest: Option<String>,
}

/// Provenance record written as the summary JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config_digest: String,
    pub family: String,
    pub topology: String,
    pub k: usize,
    pub m: usize,
    pub iterations: usize,
    pub runs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub gap: f64,
    pub nu: f64,
    pub delta: f64,
    pub b_sq: f64,
    pub sigma_sq: f64,
    pub mu: f64,
    pub msd_theory_db: f64,
    pub regime: String,
    pub proxy_gradient_norm: Option<f64>,
    pub methods: Vec<MethodSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryReport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub methods: Vec<MethodResult>,
    /// Theory at the reference step size.
    pub theory: TheoryReport,
    pub summary: Summary,
}

impl ExperimentResult {
    pub fn any_diverged(&self) -> bool {
        self.methods.iter().any(|m| m.divergence.is_some())
    }

    pub fn method(&self, method: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// CSV in the metrics layout; diverged methods keep their columns
    /// with empty cells.
    pub fn csv(&self) -> String {
        let empty = MsdTrajectory {
            mean: Vec::new(),
            stderr: Vec::new(),
            runs: 0,
        };
        let series: Vec<(&str, &MsdTrajectory)> = self
            .methods
            .iter()
            .map(|m| (m.method.name(), m.trajectory.as_ref().unwrap_or(&empty)))
            .collect();
        trajectories_to_csv(&series)
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary is always serialisable") + "\n"
    }

    /// Writes `<output>` (CSV) and `<output>.json` (summary).
    pub fn write(&self, csv_path: &Path) -> Result<PathBuf, RunnerError> {
        if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| RunnerError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let json_path = csv_path.with_extension("json");
        for (path, body) in [(csv_path, self.csv()), (json_path.as_path(), self.summary_json())] {
            fs::write(path, body).map_err(|source| RunnerError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        Ok(json_path)
    }
}

/// Thread count: the config's, else `DIFFSIM_THREADS`, else all cores.
pub fn parallelism_width(config: &ExperimentConfig) -> usize {
    config
        .parallelism
        .or_else(|| std::env::var(THREADS_ENV).ok()?.trim().parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct MethodAccum {
    acc: Accumulator,
    divergence: Option<DivergenceInfo>,
    digest: Option<Sha256>,
}

/// Runs the Monte-Carlo experiment. Output is a pure function of the
/// config: runs are merged in run-index order whatever the scheduling.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentResult, RunnerError> {
    config.validate()?;
    let setup = build_setup(config)?;
    let Setup { comb, problem } = &setup;

    let theory_at = |mu: f64, full: bool| {
        theory_report(problem, comb, mu, full).map_err(|source| RunnerError::Theory {
            context: "theory",
            source,
        })
    };
    let theory = theory_at(config.reference_mu(), config.emit_theory)?;

    let width = parallelism_width(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(width)
        .build()
        .map_err(|e| RunnerError::Pool(e.to_string()))?;
    let options = RunOptions {
        digest_streams: config.audit_streams,
    };

    let mut accums: Vec<MethodAccum> = config
        .methods
        .iter()
        .map(|_| MethodAccum {
            acc: Accumulator::new(),
            divergence: None,
            digest: config.audit_streams.then(Sha256::new),
        })
        .collect();

    let run_ids: Vec<usize> = (0..config.runs).collect();
    for chunk in run_ids.chunks(width) {
        let outcomes: Vec<_> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&r| run_methods(&config.methods, problem, comb, config.seed, r as u64, options))
                .collect()
        });
        for (&r, outcome) in chunk.iter().zip(outcomes) {
            let traces = outcome.map_err(|source| RunnerError::Algorithm {
                context: "methods",
                source,
            })?;
            for (a, trace) in accums.iter_mut().zip(traces) {
                if let (Some(h), Some(d)) = (a.digest.as_mut(), trace.stream_digest) {
                    h.update(d);
                }
                if a.divergence.is_some() {
                    continue;
                }
                match trace.divergence {
                    Some(AlgorithmError::Divergence { iteration, .. }) => {
                        a.divergence = Some(DivergenceInfo { run: r, iteration });
                    }
                    Some(source) => {
                        return Err(RunnerError::Algorithm {
                            context: "methods",
                            source,
                        })
                    }
                    None => a.acc.add(&trace.msd).map_err(|source| RunnerError::Metrics {
                        context: "aggregation",
                        source,
                    })?,
                }
            }
        }
    }

    let mut methods = Vec::with_capacity(config.methods.len());
    for (cfg, a) in config.methods.iter().zip(accums) {
        let (trajectory, steady) = if a.divergence.is_some() {
            (None, None)
        } else {
            let traj = a.acc.finish().map_err(|source| RunnerError::Metrics {
                context: "aggregation",
                source,
            })?;
            let steady = steady_state(&traj, config.window_fraction).ok();
            (Some(traj), steady)
        };
        let theory = if cfg.mu == config.reference_mu() {
            theory.clone()
        } else {
            theory_at(cfg.mu, false)?
        };
        methods.push(MethodResult {
            method: cfg.method,
            mu: cfg.mu,
            trajectory,
            steady,
            divergence: a.divergence,
            stream_digest: a.digest.map(|h| hex::encode(h.finalize())),
            theory,
        });
    }

    let summary = Summary {
        config_digest: config.digest(),
        family: problem.family().to_string(),
        topology: config.topology.kind.to_string(),
        k: problem.k(),
        m: problem.m(),
        iterations: config.iterations,
        runs: config.runs,
        seed: config.seed,
        lambda: theory.lambda,
        gap: theory.gap,
        nu: theory.nu,
        delta: theory.delta,
        b_sq: theory.b_sq,
        sigma_sq: theory.sigma_sq,
        mu: theory.mu,
        msd_theory_db: theory.msd_theory_db,
        regime: theory.regime.regime.label().to_string(),
        proxy_gradient_norm: theory.proxy_gradient_norm,
        methods: methods
            .iter()
            .map(|m| MethodSummary {
                method: m.method.name().to_string(),
                mu: m.mu,
                steady_state_db: m.steady.as_ref().map(|s| s.mean_db),
                steady_state_stderr_db: m.steady.as_ref().map(|s| s.stderr_db),
                nonstationary: m.steady.as_ref().map(|s| s.nonstationary),
                msd_theory_db: m.theory.msd_theory_db,
                regime: m.theory.regime.regime.label().to_string(),
                diverged: m.divergence.clone(),
                stream_digest: m.stream_digest.clone(),
            })
            .collect(),
        theory: config.emit_theory.then(|| theory.clone()),
    };

    Ok(ExperimentResult {
        methods,
        theory,
        summary,
    })
}

/// Parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Mu,
    K,
}

impl FromStr for SweepParam {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "mu" => Ok(SweepParam::Mu),
            "K" | "k" => Ok(SweepParam::K),
            other => Err(ConfigError::InvalidValue {
                key: "vary".into(),
                message: format!("expected 'mu' or 'K', found '{other}'"),
            }),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Mu => "mu",
            SweepParam::K => "K",
        }
    }
}

/// One point of a sweep.
pub struct SweepPoint {
    pub value: f64,
    pub config: ExperimentConfig,
    pub result: ExperimentResult,
}

/// Config for one sweep point. Varying `K` re-derives the problem with
/// the same seed, so sizes stay comparable.
pub fn sweep_config(
    base: &ExperimentConfig,
    param: SweepParam,
    value: f64,
) -> Result<ExperimentConfig, ConfigError> {
    let mut c = base.clone();
    match param {
        SweepParam::Mu => c.set_mu(value),
        SweepParam::K => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(ConfigError::InvalidValue {
                    key: "K".into(),
                    message: format!("'{value}' is not a positive integer"),
                });
            }
            c.topology.k = value as usize;
        }
    }
    c.output = base
        .output
        .as_ref()
        .map(|p| point_path(p, param, value));
    c.validate()?;
    Ok(c)
}

/// `out/run.csv` → `out/run_mu=0.005.csv`.
pub fn point_path(base: &Path, param: SweepParam, value: f64) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sweep".into());
    base.with_file_name(format!("{stem}_{}={value}.csv", param.name()))
}

/// Runs the experiment at every value, writing each point's files when
/// the base config has an output path.
pub fn sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>, RunnerError> {
    if values.is_empty() {
        return Err(ConfigError::InvalidValue {
            key: "values".into(),
            message: "at least one value is required".into(),
        }
        .into());
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let config = sweep_config(base, param, value)?;
        let result = execute(&config)?;
        if let Some(path) = &config.output {
            result.write(path)?;
        }
        points.push(SweepPoint {
            value,
            config,
            result,
        });
    }
    Ok(points)
}

/// Table of steady states per point: `<param>,lambda,msd_theory_db,regime`
/// followed by `<method>_db,<method>_stderr_db` pairs.
pub fn sweep_table(param: SweepParam, points: &[SweepPoint]) -> String {
    let mut out = format!("{},lambda,msd_theory_db,regime", param.name());
    if let Some(first) = points.first() {
        for m in &first.result.methods {
            let _ = write!(out, ",{0}_db,{0}_stderr_db", m.method);
        }
    }
    out.push('\n');
    for p in points {
        let t = &p.result.theory;
        let _ = write!(
            out,
            "{},{:.6},{:.6},{}",
            p.value,
            t.lambda,
            t.msd_theory_db,
            t.regime.regime.label()
        );
        for m in &p.result.methods {
            match &m.steady {
                Some(s) => {
                    let _ = write!(out, ",{:.6},{:.6}", s.mean_db, s.stderr_db);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}
