use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use diffsim::runner::{
    execute, sweep, sweep_table, theory_for, ExperimentConfig, RunnerError, SweepParam,
};
use diffsim::topology::{build_graph, combination_matrix, TopologyKind, WeightRule};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;

#[derive(Parser)]
#[command(name = "diffsim", version, about = "Decentralised stochastic optimisation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo experiment and write CSV + summary JSON.
    Run {
        config: PathBuf,
        /// CSV destination (overrides the config's `output`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Worker threads (overrides the config and DIFFSIM_THREADS).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the spectral report of a network.
    Topology {
        #[arg(long)]
        kind: TopologyKind,
        #[arg(long = "K")]
        k: usize,
        #[arg(long)]
        weights: Option<WeightRule>,
        #[arg(long)]
        edge_probability: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the combination matrix as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the theoretical quantities for a config without simulating.
    Theory {
        config: PathBuf,
        #[arg(long)]
        json: bool,
        /// Step size (overrides the config's).
        #[arg(long)]
        mu: Option<f64>,
    },
    /// Repeat an experiment over a grid of step sizes or network sizes.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        vary: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}

fn load(path: &Path, output: Option<PathBuf>, threads: Option<usize>) -> Result<ExperimentConfig, RunnerError> {
    let mut config = ExperimentConfig::from_path(path)?;
    if output.is_some() {
        config.output = output;
    }
    if threads.is_some() {
        config.parallelism = threads;
    }
    config.validate()?;
    Ok(config)
}

fn dispatch(command: Command) -> Result<ExitCode, RunnerError> {
    match command {
        Command::Run {
            config,
            output,
            threads,
        } => {
            let cfg = load(&config, output, threads)?;
            let result = execute(&cfg)?;
            let csv_path = cfg.output.clone().unwrap_or_else(|| config.with_extension("csv"));
            let json_path = result.write(&csv_path)?;
            let s = &result.summary;
            println!("config_digest {}", s.config_digest);
            println!(
                "lambda {:.6}  gap {:.6}  theory {:.3} dB  regime {}",
                s.lambda, s.gap, s.msd_theory_db, s.regime
            );
            for m in &s.methods {
                match (&m.steady_state_db, &m.diverged) {
                    (_, Some(d)) => println!(
                        "{:<20} mu {:<8} diverged (run {}, iteration {})",
                        m.method, m.mu, d.run, d.iteration
                    ),
                    (Some(db), None) => println!(
                        "{:<20} mu {:<8} steady state {:.3} ± {:.3} dB{}",
                        m.method,
                        m.mu,
                        db,
                        m.steady_state_stderr_db.unwrap_or(0.0),
                        if m.nonstationary == Some(true) { " (non-stationary)" } else { "" }
                    ),
                    (None, None) => println!("{:<20} mu {:<8} too few iterations for a steady state", m.method, m.mu),
                }
            }
            println!("wrote {} and {}", csv_path.display(), json_path.display());
            Ok(if result.any_diverged() {
                ExitCode::from(EXIT_NUMERIC)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Topology {
            kind,
            k,
            weights,
            edge_probability,
            seed,
            csv,
        } => {
            let graph = build_graph(kind, k, edge_probability, seed).map_err(|source| {
                RunnerError::Topology {
                    context: "topology",
                    source,
                }
            })?;
            let rule = weights.unwrap_or(if kind == TopologyKind::Complete {
                WeightRule::Uniform
            } else {
                WeightRule::Metropolis
            });
            let comb = combination_matrix(&graph, rule).map_err(|source| RunnerError::Topology {
                context: "weights",
                source,
            })?;
            println!("kind = {kind}");
            println!("K = {k}");
            println!("weights = {rule}");
            println!("edges = {}", graph.edge_count());
            println!("lambda2 = {:.12}", comb.lambda2);
            println!("lambda_K = {:.12}", comb.lambda_k);
            println!("lambda = {:.12}", comb.lambda);
            println!("lambda_prime = {:.12}", comb.lambda_prime);
            println!("gap = {:.12}", comb.spectral_gap());
            if let Some(path) = csv {
                std::fs::write(&path, comb.to_csv()).map_err(|source| RunnerError::Io {
                    path: path.clone(),
                    source,
                })?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Theory { config, json, mu } => {
            let mut cfg = load(&config, None, None)?;
            if let Some(mu) = mu {
                cfg.set_mu(mu);
                cfg.validate()?;
            }
            let report = theory_for(&cfg)?;
            let value = serde_json::to_value(&report).expect("report is serialisable");
            if json {
                println!("{}", serde_json::to_string_pretty(&value).expect("value is serialisable"));
            } else {
                let mut lines = Vec::new();
                flatten("", &value, &mut lines);
                for line in lines {
                    println!("{line}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            vary,
            values,
            output,
            threads,
        } => {
            let mut cfg = load(&config, output, threads)?;
            let base = cfg.output.take().unwrap_or_else(|| config.with_extension("csv"));
            cfg.output = Some(base.clone());
            let points = sweep(&cfg, vary, &values)?;
            let table = sweep_table(vary, &points);
            let table_path = base.with_file_name(format!(
                "{}_sweep.csv",
                base.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default()
            ));
            std::fs::write(&table_path, &table).map_err(|source| RunnerError::Io {
                path: table_path.clone(),
                source,
            })?;
            print!("{table}");
            Ok(if points.iter().any(|p| p.result.any_diverged()) {
                ExitCode::from(EXIT_NUMERIC)
            } else {
                ExitCode::SUCCESS
            })
        }
    }
}

/// `a.b = v` lines for every leaf of a JSON value.
fn flatten(prefix: &str, value: &Value, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(|v| v.to_string()).collect();
            out.push(format!("{prefix} = [{}]", parts.join(", ")));
        }
        Value::String(s) => out.push(format!("{prefix} = {s}")),
        other => out.push(format!("{prefix} = {other}")),
    }
}
